"""Attention and FFN blocks: full-precision encoder flavor, ternary
decoder flavor, plus rotary embedding, causal masking, KV cache, and
patch embedding.

Encoder blocks are pre-norm LayerNorm residual blocks with quick_gelu
FFNs and no mask. Decoder blocks are pre-norm RMSNorm residual blocks
whose q/k/v/out and SwiGLU linears are all ternary (no biases), with
rotary position encoding on q and k and a strict causal mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, ConfigError, ShapeError
from .kernels import KernelPlan, bitlinear_forward
from .quant import PackedTernaryMatrix
from .tensor import activation, as_f32, matmul, normalize, softmax_rows

_MASKED = np.float32(-1e30)


@dataclass
class Dense:
    weight: np.ndarray  # f32 [O, K]
    bias: np.ndarray | None = None  # f32 [O]


@dataclass
class Ternary:
    packed: PackedTernaryMatrix


LinearOp = Dense | Ternary


def apply_linear(op: LinearOp, x: np.ndarray, plan: KernelPlan | None = None) -> np.ndarray:
    """x [m, K] -> [m, O]; identical shape contract for both realizations."""
    if isinstance(op, Dense):
        y = matmul(x, op.weight.T)
        if op.bias is not None:
            y = y + op.bias
        return y.astype(np.float32)
    return bitlinear_forward(op.packed, x, plan)


def out_features(op: LinearOp) -> int:
    return op.weight.shape[0] if isinstance(op, Dense) else op.packed.rows


class KVCache:
    """Appended per-layer K/V tensors [t, heads, head_dim].

    Grows monotonically until reset; a single generation session is the
    single writer.
    """

    def __init__(self, n_layers: int, max_length: int) -> None:
        self.n_layers = n_layers
        self.max_length = max_length
        self.k: list[np.ndarray | None] = [None] * n_layers
        self.v: list[np.ndarray | None] = [None] * n_layers

    @property
    def length(self) -> int:
        if not self.k or self.k[0] is None:
            return 0
        return self.k[0].shape[0]

    def layer_length(self, layer: int) -> int:
        return 0 if self.k[layer] is None else self.k[layer].shape[0]

    def append(self, layer: int, k: np.ndarray, v: np.ndarray) -> None:
        if self.layer_length(layer) + k.shape[0] > self.max_length:
            raise CapacityError(
                f"cache layer {layer} would exceed max context {self.max_length}"
            )
        if self.k[layer] is None:
            self.k[layer] = k.copy()
            self.v[layer] = v.copy()
        else:
            self.k[layer] = np.concatenate([self.k[layer], k], axis=0)
            self.v[layer] = np.concatenate([self.v[layer], v], axis=0)

    def reset(self) -> None:
        self.k = [None] * self.n_layers
        self.v = [None] * self.n_layers


@dataclass
class EncoderBlockWeights:
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    wq: Dense
    wk: Dense
    wv: Dense
    wo: Dense
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    fc1: Dense
    fc2: Dense
    heads: int


@dataclass
class DecoderBlockWeights:
    attn_norm_gain: np.ndarray
    wq: Ternary
    wk: Ternary
    wv: Ternary
    wo: Ternary
    ffn_norm_gain: np.ndarray
    gate: Ternary
    up: Ternary
    down: Ternary
    heads: int
    head_dim: int
    rope_base: float = 10000.0


def patch_embed(
    image: np.ndarray, proj: Dense, pos_embed: np.ndarray, patch: int = 14
) -> np.ndarray:
    """Split [3, h, w] into non-overlapping patch x patch tiles, flatten
    each channel-major, project to d, and add the learned positional
    embedding. N = h*w / patch^2."""
    image = as_f32(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected [3, h, w] image, got {image.shape}")
    _, h, w = image.shape
    if h % patch or w % patch:
        raise ShapeError(
            f"image {h}x{w} not divisible by patch {patch}; resize before embedding"
        )
    gh, gw = h // patch, w // patch
    n = gh * gw
    patches = (
        image.reshape(3, gh, patch, gw, patch)
        .transpose(1, 3, 0, 2, 4)
        .reshape(n, 3 * patch * patch)
    )
    d = out_features(proj)
    if pos_embed.shape != (n, d):
        raise ShapeError(f"pos_embed shape {pos_embed.shape} != ({n}, {d})")
    return (apply_linear(proj, patches) + pos_embed).astype(np.float32)


def rope_apply(x: np.ndarray, positions: np.ndarray, base: float = 10000.0) -> np.ndarray:
    """Rotate adjacent pairs (2i, 2i+1) by positions * base^(-2i/head_dim)."""
    x = as_f32(x)
    if x.ndim != 3:
        raise ShapeError(f"expected [t, heads, head_dim], got {x.shape}")
    t, heads, hd = x.shape
    if hd % 2 != 0:
        raise ConfigError(f"head_dim {hd} must be even for rotary pairs")
    positions = np.asarray(positions, dtype=np.float32)
    # base^(-2i/hd) for pair index i
    freqs = np.float32(base) ** (-(2.0 * np.arange(hd // 2, dtype=np.float32)) / np.float32(hd))
    angles = positions[:, None] * freqs[None, :]  # [t, hd/2]
    cos = np.cos(angles).astype(np.float32)[:, None, :]
    sin = np.sin(angles).astype(np.float32)[:, None, :]
    x0 = x[:, :, 0::2]
    x1 = x[:, :, 1::2]
    out = np.empty_like(x)
    out[:, :, 0::2] = x0 * cos - x1 * sin
    out[:, :, 1::2] = x0 * sin + x1 * cos
    return out


def attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    causal: bool,
    cache: KVCache | None = None,
    layer: int = 0,
) -> np.ndarray:
    """Scaled dot-product attention over [t, heads, head_dim].

    With a cache, keys/values are (cache ++ current) and the causal mask
    is strict over absolute positions; k and v are appended to the cache.
    """
    t, heads, hd = q.shape
    past = 0
    if cache is not None:
        past = cache.layer_length(layer)
        cache.append(layer, k, v)
        k = cache.k[layer]
        v = cache.v[layer]
    tk = k.shape[0]
    qh = q.transpose(1, 0, 2)  # [H, t, hd]
    kh = k.transpose(1, 0, 2)
    vh = v.transpose(1, 0, 2)
    scale = np.float32(1.0 / np.sqrt(np.float32(hd)))
    scores = (qh @ kh.transpose(0, 2, 1)) * scale  # [H, t, tk]
    if causal:
        limit = past + np.arange(t)[:, None]  # query i may see keys <= past+i
        mask = np.arange(tk)[None, :] > limit
        scores = np.where(mask[None, :, :], _MASKED, scores)
    probs = softmax_rows(scores.reshape(heads * t, tk)).reshape(heads, t, tk)
    out = probs @ vh  # [H, t, hd]
    return out.transpose(1, 0, 2).astype(np.float32)


def causal_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    cache: KVCache | None = None,
    layer: int = 0,
) -> np.ndarray:
    return attention(q, k, v, causal=True, cache=cache, layer=layer)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    t, d = x.shape
    return x.reshape(t, heads, d // heads)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    t, heads, hd = x.shape
    return x.reshape(t, heads * hd)


def encoder_block_forward(x: np.ndarray, w: EncoderBlockWeights) -> np.ndarray:
    """Pre-norm residual block: x + Attn(LN(x)); then + FFN(LN(.)).

    Bidirectional attention, quick_gelu FFN.
    """
    n = normalize(x, "layer", w.ln1_gain, w.ln1_bias)
    q = _split_heads(apply_linear(w.wq, n), w.heads)
    k = _split_heads(apply_linear(w.wk, n), w.heads)
    v = _split_heads(apply_linear(w.wv, n), w.heads)
    attn = _merge_heads(attention(q, k, v, causal=False))
    x = x + apply_linear(w.wo, attn)
    n2 = normalize(x, "layer", w.ln2_gain, w.ln2_bias)
    h = activation(apply_linear(w.fc1, n2), "quick_gelu")
    x = x + apply_linear(w.fc2, h)
    return x.astype(np.float32)


def decoder_block_forward(
    x: np.ndarray,
    w: DecoderBlockWeights,
    cache: KVCache | None = None,
    layer: int = 0,
    plan: KernelPlan | None = None,
) -> np.ndarray:
    """Pre-norm RMS residual block with ternary attention and SwiGLU FFN."""
    t = x.shape[0]
    past = cache.layer_length(layer) if cache is not None else 0
    positions = np.arange(past, past + t)

    n = normalize(x, "rms", w.attn_norm_gain)
    q = _split_heads(apply_linear(w.wq, n, plan), w.heads)
    k = _split_heads(apply_linear(w.wk, n, plan), w.heads)
    v = _split_heads(apply_linear(w.wv, n, plan), w.heads)
    q = rope_apply(q, positions, w.rope_base)
    k = rope_apply(k, positions, w.rope_base)
    attn = _merge_heads(causal_attention(q, k, v, cache=cache, layer=layer))
    x = x + apply_linear(w.wo, attn, plan)

    n2 = normalize(x, "rms", w.ffn_norm_gain)
    gated = activation(apply_linear(w.gate, n2, plan), "silu") * apply_linear(w.up, n2, plan)
    x = x + apply_linear(w.down, gated, plan)
    return x.astype(np.float32)
