"""Model assembly: tensor naming scheme, parameter accounting, loader.

One tensor-spec table derived from the config drives everything: the
synthetic initializer, the checkpoint loader's completeness/shape
checks, and param_count. Ternary scale companions are storage metadata
and are not counted as parameters.

Naming scheme (f32 checkpoint):
  vision.patch_proj.weight/.bias, vision.pos_embed,
  vision.blocks.{i}.ln1.gain/.bias, .attn.wq|wk|wv|wo.weight/.bias,
  .ln2.gain/.bias, .ffn.fc1|fc2.weight/.bias, vision.final_norm.gain/.bias,
  projector.fc1|fc2.weight/.bias,
  llm.embed.weight (tied with the output head),
  llm.blocks.{i}.attn_norm.gain, .attn.wq|wk|wv|wo.weight,
  .ffn_norm.gain, .ffn.gate|up|down.weight, llm.final_norm.gain
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .blocks import Dense, DecoderBlockWeights, EncoderBlockWeights, Ternary
from .config import ModelConfig
from .container import TensorRecord, match_precision, read_container, record_f32
from .errors import ConfigError, FormatError, ShapeError
from .kernels import MAX_TERNARY_K
from .quant import PackedTernaryMatrix, bytes_per_row, pack_trits, validate_packed


@dataclass
class TensorSpec:
    name: str
    shape: tuple[int, ...]
    component: str  # vision | projector | decoder
    init: str  # weight | bias | gain | embed | pos


def tensor_specs(config: ModelConfig) -> list[TensorSpec]:
    v, p, d = config.vision, config.projector, config.decoder
    specs: list[TensorSpec] = []

    def add(name, shape, component, init):
        specs.append(TensorSpec(name, tuple(shape), component, init))

    patch_dim = 3 * v.patch * v.patch
    add("vision.patch_proj.weight", (v.d, patch_dim), "vision", "weight")
    add("vision.patch_proj.bias", (v.d,), "vision", "bias")
    add("vision.pos_embed", (v.n_patches, v.d), "vision", "pos")
    for i in range(v.layers):
        pre = f"vision.blocks.{i}"
        add(f"{pre}.ln1.gain", (v.d,), "vision", "gain")
        add(f"{pre}.ln1.bias", (v.d,), "vision", "bias")
        for wname in ("wq", "wk", "wv", "wo"):
            add(f"{pre}.attn.{wname}.weight", (v.d, v.d), "vision", "weight")
            add(f"{pre}.attn.{wname}.bias", (v.d,), "vision", "bias")
        add(f"{pre}.ln2.gain", (v.d,), "vision", "gain")
        add(f"{pre}.ln2.bias", (v.d,), "vision", "bias")
        add(f"{pre}.ffn.fc1.weight", (v.mlp_hidden, v.d), "vision", "weight")
        add(f"{pre}.ffn.fc1.bias", (v.mlp_hidden,), "vision", "bias")
        add(f"{pre}.ffn.fc2.weight", (v.d, v.mlp_hidden), "vision", "weight")
        add(f"{pre}.ffn.fc2.bias", (v.d,), "vision", "bias")
    add("vision.final_norm.gain", (v.d,), "vision", "gain")
    add("vision.final_norm.bias", (v.d,), "vision", "bias")

    add("projector.fc1.weight", (p.hidden, p.d_in), "projector", "weight")
    add("projector.fc1.bias", (p.hidden,), "projector", "bias")
    add("projector.fc2.weight", (p.d_out, p.hidden), "projector", "weight")
    add("projector.fc2.bias", (p.d_out,), "projector", "bias")

    attn_dim = d.heads * d.head_dim
    add("llm.embed.weight", (d.vocab, d.d), "decoder", "embed")
    for i in range(d.layers):
        pre = f"llm.blocks.{i}"
        add(f"{pre}.attn_norm.gain", (d.d,), "decoder", "gain")
        add(f"{pre}.attn.wq.weight", (attn_dim, d.d), "decoder", "weight")
        add(f"{pre}.attn.wk.weight", (attn_dim, d.d), "decoder", "weight")
        add(f"{pre}.attn.wv.weight", (attn_dim, d.d), "decoder", "weight")
        add(f"{pre}.attn.wo.weight", (d.d, attn_dim), "decoder", "weight")
        add(f"{pre}.ffn_norm.gain", (d.d,), "decoder", "gain")
        add(f"{pre}.ffn.gate.weight", (d.ffn_hidden, d.d), "decoder", "weight")
        add(f"{pre}.ffn.up.weight", (d.ffn_hidden, d.d), "decoder", "weight")
        add(f"{pre}.ffn.down.weight", (d.d, d.ffn_hidden), "decoder", "weight")
    add("llm.final_norm.gain", (d.d,), "decoder", "gain")
    return specs


def param_count(config: ModelConfig) -> dict[str, int]:
    """Closed-form per-component parameter counts (tied embeddings,
    no output-head duplicate, ternary scales excluded)."""
    counts = {"vision": 0, "projector": 0, "decoder": 0}
    for spec in tensor_specs(config):
        counts[spec.component] += math.prod(spec.shape)
    counts["total"] = counts["vision"] + counts["projector"] + counts["decoder"]
    return counts


def init_params(config: ModelConfig, seed: int = 0, scale: float = 0.02) -> dict[str, np.ndarray]:
    """Deterministic synthetic f32 parameter set for the given config."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for spec in tensor_specs(config):
        if spec.init == "gain":
            arr = np.ones(spec.shape, dtype=np.float32)
        elif spec.init == "bias":
            arr = np.zeros(spec.shape, dtype=np.float32)
        elif spec.init == "pos":
            arr = rng.normal(0.0, 0.01, spec.shape).astype(np.float32)
        else:  # weight, embed
            arr = rng.normal(0.0, scale, spec.shape).astype(np.float32)
        params[spec.name] = arr
    return params


def params_to_records(params: dict[str, np.ndarray]) -> dict[str, TensorRecord]:
    from .container import record_f32

    return {name: record_f32(arr) for name, arr in params.items()}


@dataclass
class VisionTower:
    patch_proj: Dense
    pos_embed: np.ndarray
    blocks: list[EncoderBlockWeights]
    final_gain: np.ndarray
    final_bias: np.ndarray
    patch: int


@dataclass
class Projector:
    fc1: Dense
    fc2: Dense


@dataclass
class DecoderStack:
    embed: np.ndarray  # [vocab, d'], tied output head
    blocks: list[DecoderBlockWeights]
    final_gain: np.ndarray


@dataclass
class Model:
    config: ModelConfig
    vision: VisionTower
    projector: Projector
    decoder: DecoderStack

    def parameter_elements(self) -> dict[str, int]:
        """Element counts of the instantiated weights (scales excluded)."""
        counts = {"vision": 0, "projector": 0, "decoder": 0}

        def dense_elems(op: Dense) -> int:
            return op.weight.size + (op.bias.size if op.bias is not None else 0)

        def tern_elems(op: Ternary) -> int:
            return op.packed.rows * op.packed.cols

        v = self.vision
        counts["vision"] += dense_elems(v.patch_proj) + v.pos_embed.size
        counts["vision"] += v.final_gain.size + v.final_bias.size
        for b in v.blocks:
            counts["vision"] += b.ln1_gain.size + b.ln1_bias.size
            counts["vision"] += b.ln2_gain.size + b.ln2_bias.size
            for op in (b.wq, b.wk, b.wv, b.wo, b.fc1, b.fc2):
                counts["vision"] += dense_elems(op)
        counts["projector"] += dense_elems(self.projector.fc1) + dense_elems(self.projector.fc2)
        dec = self.decoder
        counts["decoder"] += dec.embed.size + dec.final_gain.size
        for b in dec.blocks:
            counts["decoder"] += b.attn_norm_gain.size + b.ffn_norm_gain.size
            for op in (b.wq, b.wk, b.wv, b.wo, b.gate, b.up, b.down):
                counts["decoder"] += tern_elems(op)
        counts["total"] = counts["vision"] + counts["projector"] + counts["decoder"]
        return counts


def _fetch(
    tensors: dict[str, TensorRecord],
    spec: TensorSpec,
    pmap: list[tuple[str, str]],
):
    rec = tensors.get(spec.name)
    if rec is None:
        raise FormatError(f"container is missing tensor {spec.name!r}")
    want = match_precision(spec.name, pmap)
    if want == "ternary":
        if rec.dtype != "t2":
            raise FormatError(
                f"tensor {spec.name!r}: expected ternary (t2) payload, found {rec.dtype}"
            )
        if spec.shape[1] > MAX_TERNARY_K:
            raise FormatError(
                f"tensor {spec.name!r}: K={spec.shape[1]} exceeds the i32 "
                f"accumulation bound {MAX_TERNARY_K}"
            )
        if rec.shape != spec.shape:
            raise ShapeError(f"tensor {spec.name!r}: shape {rec.shape} != expected {spec.shape}")
        scale_rec = tensors.get(spec.name + ".scale")
        if scale_rec is None:
            raise FormatError(f"container is missing scale tensor {spec.name + '.scale'!r}")
        packed = PackedTernaryMatrix(
            rows=spec.shape[0],
            cols=spec.shape[1],
            data=rec.array,
            scale=float(scale_rec.array.reshape(())),
        )
        validate_packed(packed)
        return Ternary(packed)
    if rec.dtype != "f32":
        raise FormatError(
            f"tensor {spec.name!r}: expected dense f32 payload, found {rec.dtype}"
        )
    if rec.shape != spec.shape:
        raise ShapeError(f"tensor {spec.name!r}: shape {rec.shape} != expected {spec.shape}")
    return rec.array


def assemble_model(tensors: dict[str, TensorRecord], meta: dict) -> Model:
    cfg_dict = meta.get("config")
    if not cfg_dict:
        raise ConfigError("container meta carries no model config")
    config = ModelConfig.from_dict(cfg_dict)
    pmap = config.pmap
    spec_by_name = {s.name: s for s in tensor_specs(config)}

    def get(name):
        return _fetch(tensors, spec_by_name[name], pmap)

    def dense(name) -> Dense:
        w = get(f"{name}.weight")
        if isinstance(w, Ternary):
            raise FormatError(f"tensor {name}.weight: dense layer stored as ternary")
        return Dense(weight=w, bias=get(f"{name}.bias"))

    def ternary(name) -> Ternary:
        w = get(f"{name}.weight")
        if not isinstance(w, Ternary):
            raise FormatError(f"tensor {name}.weight: ternary layer stored as dense f32")
        return w

    v = config.vision
    vision = VisionTower(
        patch_proj=dense("vision.patch_proj"),
        pos_embed=get("vision.pos_embed"),
        blocks=[
            EncoderBlockWeights(
                ln1_gain=get(f"vision.blocks.{i}.ln1.gain"),
                ln1_bias=get(f"vision.blocks.{i}.ln1.bias"),
                wq=dense(f"vision.blocks.{i}.attn.wq"),
                wk=dense(f"vision.blocks.{i}.attn.wk"),
                wv=dense(f"vision.blocks.{i}.attn.wv"),
                wo=dense(f"vision.blocks.{i}.attn.wo"),
                ln2_gain=get(f"vision.blocks.{i}.ln2.gain"),
                ln2_bias=get(f"vision.blocks.{i}.ln2.bias"),
                fc1=dense(f"vision.blocks.{i}.ffn.fc1"),
                fc2=dense(f"vision.blocks.{i}.ffn.fc2"),
                heads=v.heads,
            )
            for i in range(v.layers)
        ],
        final_gain=get("vision.final_norm.gain"),
        final_bias=get("vision.final_norm.bias"),
        patch=v.patch,
    )
    projector = Projector(fc1=dense("projector.fc1"), fc2=dense("projector.fc2"))
    d = config.decoder
    decoder = DecoderStack(
        embed=get("llm.embed.weight"),
        blocks=[
            DecoderBlockWeights(
                attn_norm_gain=get(f"llm.blocks.{i}.attn_norm.gain"),
                wq=ternary(f"llm.blocks.{i}.attn.wq"),
                wk=ternary(f"llm.blocks.{i}.attn.wk"),
                wv=ternary(f"llm.blocks.{i}.attn.wv"),
                wo=ternary(f"llm.blocks.{i}.attn.wo"),
                ffn_norm_gain=get(f"llm.blocks.{i}.ffn_norm.gain"),
                gate=ternary(f"llm.blocks.{i}.ffn.gate"),
                up=ternary(f"llm.blocks.{i}.ffn.up"),
                down=ternary(f"llm.blocks.{i}.ffn.down"),
                heads=d.heads,
                head_dim=d.head_dim,
                rope_base=d.rope_base,
            )
            for i in range(d.layers)
        ],
        final_gain=get("llm.final_norm.gain"),
    )
    model = Model(config=config, vision=vision, projector=projector, decoder=decoder)
    _assert_precision_structure(model)
    return model


def _assert_precision_structure(model: Model) -> None:
    # every decoder linear ternary, every encoder/projector linear dense
    for b in model.vision.blocks:
        for op in (b.wq, b.wk, b.wv, b.wo, b.fc1, b.fc2):
            assert isinstance(op, Dense)
    assert isinstance(model.vision.patch_proj, Dense)
    for op in (model.projector.fc1, model.projector.fc2):
        assert isinstance(op, Dense)
    for b in model.decoder.blocks:
        for op in (b.wq, b.wk, b.wv, b.wo, b.gate, b.up, b.down):
            assert isinstance(op, Ternary)


def load_model(source) -> Model:
    """Load a quantized container (path or bytes) into a Model."""
    tensors, meta = read_container(source)
    return assemble_model(tensors, meta)


def build_synthetic_model(config: ModelConfig, seed: int = 0, zero: bool = False) -> Model:
    """Construct a Model directly, without an f32 checkpoint round trip.

    zero=True keeps all weights zero (gains one, scales one), which is
    enough for shape-chain checks at dimensions where materializing a
    random f32 checkpoint would be wasteful.
    """
    rng = np.random.default_rng(seed)
    pmap = config.pmap

    def make(spec: TensorSpec):
        if match_precision(spec.name, pmap) == "ternary":
            o, k = spec.shape
            if zero:
                return TensorRecord("t2", spec.shape, np.zeros((o, bytes_per_row(k)), np.uint8))
            trits = rng.integers(-1, 2, size=(o, k)).astype(np.int8)
            return TensorRecord("t2", spec.shape, pack_trits(trits))
        if spec.init == "gain":
            arr = np.ones(spec.shape, dtype=np.float32)
        elif zero or spec.init == "bias":
            arr = np.zeros(spec.shape, dtype=np.float32)
        elif spec.init == "pos":
            arr = rng.normal(0.0, 0.01, spec.shape).astype(np.float32)
        else:
            arr = rng.normal(0.0, 0.02, spec.shape).astype(np.float32)
        return record_f32(arr)

    tensors: dict[str, TensorRecord] = {}
    for spec in tensor_specs(config):
        rec = make(spec)
        tensors[spec.name] = rec
        if rec.dtype == "t2":
            scale = np.float32(1.0 if zero else abs(rng.normal(0.05, 0.01)) + 1e-3)
            tensors[spec.name + ".scale"] = record_f32(np.array(scale, dtype=np.float32))
    return assemble_model(tensors, {"config": config.to_dict()})
