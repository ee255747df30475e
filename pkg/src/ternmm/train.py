"""Toy-scale quantization-aware training.

Two-phase recipe: phase 1 updates only the projector; phase 2 updates
projector and decoder. The vision tower is frozen in both phases, so
its features are computed once per sample. Latent full-precision
master weights are kept and re-quantized on every forward; the ternary
forward is paired with the identity-STE backward from ste.py.

Loss is next-token cross-entropy over text positions only; image rows
carry no targets. Per micro-batch the loss is the mean over samples of
each sample's mean position loss, and gradient accumulation averages
micro-batch gradients, so accumulation N with batch B matches
accumulation 1 with batch N*B on identical data order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .blocks import encoder_block_forward, patch_embed, Dense, EncoderBlockWeights
from .config import ModelConfig
from .errors import ConfigError, DataError
from .ste import (
    attention_bwd,
    attention_fwd,
    bitlinear_ste_backward,
    bitlinear_ste_forward,
    cross_entropy,
    gelu_tanh_fwd,
    gelu_tanh_grad,
    linear_bwd,
    linear_fwd,
    rmsnorm_bwd,
    rmsnorm_fwd,
    rope_bwd,
    rope_fwd,
    silu_fwd,
    silu_grad,
)
from .tensor import normalize
from .tokenizer import BOS, EOS


@dataclass
class TrainConfig:
    phase: int
    peak_lr: float
    total_steps: int
    batch_size: int
    accumulation: int = 1
    warmup_ratio: float = 0.03
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.0  # fields exposed, disabled by default
    grad_clip: float | None = None
    loss_mode: str = "plain"  # plain: all text positions; instruct: targets only
    seed: int = 0

    def __post_init__(self) -> None:
        if self.phase not in (1, 2):
            raise ConfigError(f"phase must be 1 or 2, got {self.phase}")
        if self.accumulation < 1:
            raise ConfigError("accumulation must be >= 1")
        if self.loss_mode not in ("plain", "instruct"):
            raise ConfigError(f"unknown loss_mode {self.loss_mode!r}")

    @property
    def warmup_steps(self) -> int:
        return max(0, int(math.floor(self.warmup_ratio * self.total_steps + 0.5)))


def fullscale_phase1(total_steps: int) -> TrainConfig:
    return TrainConfig(phase=1, peak_lr=1e-3, total_steps=total_steps, batch_size=32, accumulation=4)


def fullscale_phase2(total_steps: int) -> TrainConfig:
    return TrainConfig(phase=2, peak_lr=2e-5, total_steps=total_steps, batch_size=8, accumulation=2)


def toy_overfit(total_steps: int = 200) -> TrainConfig:
    # desk-scale preset: small model, few samples, lr tuned empirically
    return TrainConfig(phase=2, peak_lr=1e-2, total_steps=total_steps, batch_size=4, accumulation=1)


@dataclass
class ParamGroup:
    name: str
    params: list[str]
    frozen: bool


def build_groups(param_names, phase: int) -> list[ParamGroup]:
    """Freeze schedule: phase 1 trains the projector only; phase 2 trains
    projector and decoder; the vision tower is always frozen."""
    names = sorted(param_names)
    vision = [n for n in names if n.startswith("vision.")]
    projector = [n for n in names if n.startswith("projector.")]
    decoder = [n for n in names if n.startswith("llm.")]
    leftover = set(names) - set(vision) - set(projector) - set(decoder)
    if leftover:
        raise ConfigError(f"parameters outside known groups: {sorted(leftover)}")
    if phase not in (1, 2):
        raise ConfigError(f"phase must be 1 or 2, got {phase}")
    return [
        ParamGroup("vision", vision, frozen=True),
        ParamGroup("projector", projector, frozen=False),
        ParamGroup("decoder", decoder, frozen=(phase == 1)),
    ]


def cosine_warmup_lr(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to peak, then cosine decay to zero at total_steps."""
    total = cfg.total_steps
    warmup = cfg.warmup_steps
    if warmup > 0 and step <= warmup:
        return cfg.peak_lr * step / warmup
    if step >= total:
        return 0.0
    progress = (step - warmup) / (total - warmup)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    cfg: TrainConfig,
    names: list[str] | None = None,
) -> AdamState:
    """Bias-corrected Adam update, in place, over the given names."""
    names = sorted(grads) if names is None else names
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    if cfg.grad_clip is not None:
        norm = math.sqrt(sum(float(np.sum(grads[n] ** 2)) for n in names))
        if norm > cfg.grad_clip:
            scale = cfg.grad_clip / norm
            for n in names:
                grads[n] = grads[n] * scale
    for n in names:
        g = grads[n]
        if n not in state.m:
            state.m[n] = np.zeros_like(g)
            state.v[n] = np.zeros_like(g)
        state.m[n] = b1 * state.m[n] + (1.0 - b1) * g
        state.v[n] = b2 * state.v[n] + (1.0 - b2) * g * g
        m_hat = state.m[n] / bc1
        v_hat = state.v[n] / bc2
        update = lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        if cfg.weight_decay:
            update = update + lr * cfg.weight_decay * params[n]
        params[n] = (params[n] - update).astype(np.float32)
    return state


@dataclass
class TrainSample:
    image: np.ndarray  # f32 [3, S, S], already preprocessed
    caption: list[int]  # byte-token target ids
    prompt: list[int] = field(default_factory=list)


def vision_features(params: dict[str, np.ndarray], config: ModelConfig, image: np.ndarray) -> np.ndarray:
    """Frozen vision tower forward straight off the parameter dict."""
    v = config.vision
    proj = Dense(params["vision.patch_proj.weight"], params["vision.patch_proj.bias"])
    h = patch_embed(image, proj, params["vision.pos_embed"], patch=v.patch)
    for i in range(v.layers):
        pre = f"vision.blocks.{i}"
        block = EncoderBlockWeights(
            ln1_gain=params[f"{pre}.ln1.gain"],
            ln1_bias=params[f"{pre}.ln1.bias"],
            wq=Dense(params[f"{pre}.attn.wq.weight"], params[f"{pre}.attn.wq.bias"]),
            wk=Dense(params[f"{pre}.attn.wk.weight"], params[f"{pre}.attn.wk.bias"]),
            wv=Dense(params[f"{pre}.attn.wv.weight"], params[f"{pre}.attn.wv.bias"]),
            wo=Dense(params[f"{pre}.attn.wo.weight"], params[f"{pre}.attn.wo.bias"]),
            ln2_gain=params[f"{pre}.ln2.gain"],
            ln2_bias=params[f"{pre}.ln2.bias"],
            fc1=Dense(params[f"{pre}.ffn.fc1.weight"], params[f"{pre}.ffn.fc1.bias"]),
            fc2=Dense(params[f"{pre}.ffn.fc2.weight"], params[f"{pre}.ffn.fc2.bias"]),
            heads=v.heads,
        )
        h = encoder_block_forward(h, block)
    return normalize(h, "layer", params["vision.final_norm.gain"], params["vision.final_norm.bias"])


def _decoder_layer_fwd(x, i, params, config):
    d = config.decoder
    pre = f"llm.blocks.{i}"
    t = x.shape[0]
    positions = np.arange(t)

    n1, c_n1 = rmsnorm_fwd(x, params[f"{pre}.attn_norm.gain"])
    yq, wq_eff = bitlinear_ste_forward(params[f"{pre}.attn.wq.weight"], n1)
    yk, wk_eff = bitlinear_ste_forward(params[f"{pre}.attn.wk.weight"], n1)
    yv, wv_eff = bitlinear_ste_forward(params[f"{pre}.attn.wv.weight"], n1)
    q3 = yq.reshape(t, d.heads, d.head_dim)
    k3 = yk.reshape(t, d.heads, d.head_dim)
    v3 = yv.reshape(t, d.heads, d.head_dim)
    qr = rope_fwd(q3, positions, d.rope_base)
    kr = rope_fwd(k3, positions, d.rope_base)
    ao, c_attn = attention_fwd(qr, kr, v3, causal=True)
    am = ao.reshape(t, d.heads * d.head_dim)
    yo, wo_eff = bitlinear_ste_forward(params[f"{pre}.attn.wo.weight"], am)
    x1 = x + yo

    n2, c_n2 = rmsnorm_fwd(x1, params[f"{pre}.ffn_norm.gain"])
    yg, wg_eff = bitlinear_ste_forward(params[f"{pre}.ffn.gate.weight"], n2)
    yu, wu_eff = bitlinear_ste_forward(params[f"{pre}.ffn.up.weight"], n2)
    s = silu_fwd(yg)
    f = s * yu
    yd, wd_eff = bitlinear_ste_forward(params[f"{pre}.ffn.down.weight"], f)
    x2 = x1 + yd

    ctx = {
        "pos": positions,
        "n1": n1, "c_n1": c_n1,
        "wq_eff": wq_eff, "wk_eff": wk_eff, "wv_eff": wv_eff, "wo_eff": wo_eff,
        "c_attn": c_attn, "am": am,
        "n2": n2, "c_n2": c_n2,
        "wg_eff": wg_eff, "wu_eff": wu_eff, "wd_eff": wd_eff,
        "yg": yg, "yu": yu, "s": s, "f": f,
    }
    return x2, ctx


def _decoder_layer_bwd(dx2, ctx, i, config, grads):
    d = config.decoder
    pre = f"llm.blocks.{i}"
    t = dx2.shape[0]

    d_f, dWd = bitlinear_ste_backward(ctx["f"], ctx["wd_eff"], dx2)
    d_s = d_f * ctx["yu"]
    d_yu = d_f * ctx["s"]
    d_yg = d_s * silu_grad(ctx["yg"])
    d_n2a, dWg = bitlinear_ste_backward(ctx["n2"], ctx["wg_eff"], d_yg)
    d_n2b, dWu = bitlinear_ste_backward(ctx["n2"], ctx["wu_eff"], d_yu)
    d_x1_norm, dg2 = rmsnorm_bwd(ctx["c_n2"], d_n2a + d_n2b)
    dx1 = dx2 + d_x1_norm

    d_am, dWo = bitlinear_ste_backward(ctx["am"], ctx["wo_eff"], dx1)
    d_ao = d_am.reshape(t, d.heads, d.head_dim)
    d_qr, d_kr, d_v3 = attention_bwd(ctx["c_attn"], d_ao)
    d_q3 = rope_bwd(d_qr, ctx["pos"], d.rope_base)
    d_k3 = rope_bwd(d_kr, ctx["pos"], d.rope_base)
    d_yq = d_q3.reshape(t, -1)
    d_yk = d_k3.reshape(t, -1)
    d_yv = d_v3.reshape(t, -1)
    d_n1a, dWq = bitlinear_ste_backward(ctx["n1"], ctx["wq_eff"], d_yq)
    d_n1b, dWk = bitlinear_ste_backward(ctx["n1"], ctx["wk_eff"], d_yk)
    d_n1c, dWv = bitlinear_ste_backward(ctx["n1"], ctx["wv_eff"], d_yv)
    d_x_norm, dg1 = rmsnorm_bwd(ctx["c_n1"], d_n1a + d_n1b + d_n1c)
    dx = dx1 + d_x_norm

    for name, g in (
        (f"{pre}.attn_norm.gain", dg1),
        (f"{pre}.attn.wq.weight", dWq),
        (f"{pre}.attn.wk.weight", dWk),
        (f"{pre}.attn.wv.weight", dWv),
        (f"{pre}.attn.wo.weight", dWo),
        (f"{pre}.ffn_norm.gain", dg2),
        (f"{pre}.ffn.gate.weight", dWg),
        (f"{pre}.ffn.up.weight", dWu),
        (f"{pre}.ffn.down.weight", dWd),
    ):
        grads[name] = grads.get(name, 0.0) + g
    return dx


def sample_loss_and_grads(
    params: dict[str, np.ndarray],
    config: ModelConfig,
    feats: np.ndarray,
    sample: TrainSample,
    loss_mode: str,
) -> tuple[float, dict[str, np.ndarray]]:
    """Forward + backward for one (vision feats, token) pair."""
    n_img = feats.shape[0]
    prompt = list(sample.prompt)
    targets = list(sample.caption) + [EOS]

    # projector forward
    w1, b1 = params["projector.fc1.weight"], params["projector.fc1.bias"]
    w2, b2 = params["projector.fc2.weight"], params["projector.fc2.bias"]
    p1 = linear_fwd(feats, w1, b1)
    a1 = gelu_tanh_fwd(p1)
    img = linear_fwd(a1, w2, b2)

    embed = params["llm.embed.weight"]
    text_ids = prompt + targets
    rows = np.concatenate([embed[[BOS]], img, embed[text_ids]], axis=0).astype(np.float32)

    h = rows
    ctxs = []
    for i in range(config.decoder.layers):
        h, ctx = _decoder_layer_fwd(h, i, params, config)
        ctxs.append(ctx)
    hn, c_final = rmsnorm_fwd(h, params["llm.final_norm.gain"])
    logits = hn @ embed.T

    if loss_mode == "plain":
        loss_targets = text_ids
        first_row = 1 + n_img  # row of the first text token
    else:  # instruct: exclude the prompt span from the loss
        loss_targets = targets
        first_row = 1 + n_img + len(prompt)
    positions = np.arange(first_row - 1, first_row - 1 + len(loss_targets))
    loss, dlogits = cross_entropy(logits, np.array(loss_targets), positions)

    grads: dict[str, np.ndarray] = {}
    d_hn = dlogits @ embed
    d_embed_head = dlogits.T @ hn
    dh, dg_final = rmsnorm_bwd(c_final, d_hn)
    grads["llm.final_norm.gain"] = dg_final
    for i in reversed(range(config.decoder.layers)):
        dh = _decoder_layer_bwd(dh, ctxs[i], i, config, grads)

    d_embed = d_embed_head
    np.add.at(d_embed, [BOS], dh[0])
    np.add.at(d_embed, text_ids, dh[1 + n_img :])
    grads["llm.embed.weight"] = d_embed

    d_img = dh[1 : 1 + n_img]
    d_a1, dW2, db2 = linear_bwd(a1, w2, d_img)
    d_p1 = d_a1 * gelu_tanh_grad(p1)
    _, dW1, db1 = linear_bwd(feats, w1, d_p1)
    grads["projector.fc1.weight"] = dW1
    grads["projector.fc1.bias"] = db1
    grads["projector.fc2.weight"] = dW2
    grads["projector.fc2.bias"] = db2
    return loss, grads


def train_toy(
    params: dict[str, np.ndarray],
    config: ModelConfig,
    dataset: list[TrainSample],
    cfg: TrainConfig,
) -> list[dict]:
    """Run the per-phase training loop in place; returns the loss history.

    History rows are {"step", "lr", "loss"}; loss is the mean over the
    step's micro-batches. Frozen groups are never touched, byte for byte.
    """
    if not dataset:
        raise DataError("training dataset is empty")
    groups = build_groups(params.keys(), cfg.phase)
    trainable = sorted(n for g in groups if not g.frozen for n in g.params)

    feats = [vision_features(params, config, s.image) for s in dataset]

    order_rng = np.random.default_rng(cfg.seed)
    order: list[int] = []

    def next_index() -> int:
        nonlocal order
        if not order:
            order = list(order_rng.permutation(len(dataset)))
        return order.pop(0)

    state = AdamState()
    history: list[dict] = []
    for step in range(cfg.total_steps):
        lr = cosine_warmup_lr(step + 1, cfg)
        agg: dict[str, np.ndarray] = {}
        losses = []
        for _ in range(cfg.accumulation):
            micro: dict[str, np.ndarray] = {}
            micro_losses = []
            for _ in range(cfg.batch_size):
                idx = next_index()
                loss, grads = sample_loss_and_grads(
                    params, config, feats[idx], dataset[idx], cfg.loss_mode
                )
                micro_losses.append(loss)
                for n in trainable:
                    micro[n] = micro.get(n, 0.0) + grads[n]
            losses.append(float(np.mean(micro_losses)))
            for n in trainable:
                agg[n] = agg.get(n, 0.0) + micro[n] / cfg.batch_size
        final_grads = {n: (agg[n] / cfg.accumulation).astype(np.float32) for n in trainable}
        adam_step(params, final_grads, state, lr, cfg, names=trainable)
        history.append({"step": step, "lr": lr, "loss": float(np.mean(losses))})
    return history
