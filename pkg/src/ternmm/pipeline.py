"""End-to-end image+text -> text: preprocessing, vision encoding,
projection, context assembly, and autoregressive sampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blocks import KVCache, decoder_block_forward, encoder_block_forward, patch_embed
from .config import GenerationParams
from .errors import CapacityError, DataError, ShapeError
from .kernels import KernelPlan
from .model import Model
from .rng import SplitMix64
from .tensor import activation, matmul, normalize
from .tokenizer import IMG

IMAGE_MEAN = np.array([0.48145466, 0.4578275, 0.40821073], dtype=np.float32)
IMAGE_STD = np.array([0.26862954, 0.26130258, 0.27577711], dtype=np.float32)


def _resize_bilinear(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear resize of u8 [h, w, 3] to f32 [out_h, out_w, 3]."""
    h, w = pixels.shape[:2]
    src = pixels.astype(np.float32)

    def axis_coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        coords = (np.arange(n_out, dtype=np.float32) + 0.5) * (n_in / n_out) - 0.5
        coords = np.clip(coords, 0.0, n_in - 1.0)
        lo = np.floor(coords).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = (coords - lo).astype(np.float32)
        return lo, hi, frac

    y0, y1, fy = axis_coords(h, out_h)
    x0, x1, fx = axis_coords(w, out_w)
    top = src[y0][:, x0] * (1 - fx)[None, :, None] + src[y0][:, x1] * fx[None, :, None]
    bot = src[y1][:, x0] * (1 - fx)[None, :, None] + src[y1][:, x1] * fx[None, :, None]
    return top * (1 - fy)[:, None, None] + bot * fy[:, None, None]


def preprocess_image(pixels: np.ndarray, size: int = 224) -> np.ndarray:
    """u8 RGB [h, w, 3] -> normalized f32 [3, size, size]."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.shape[0] < 1 or pixels.shape[1] < 1:
        raise DataError(f"expected non-empty u8 RGB [h, w, 3], got {pixels.shape}")
    resized = _resize_bilinear(pixels, size, size) / np.float32(255.0)
    normed = (resized - IMAGE_MEAN) / IMAGE_STD
    return normed.transpose(2, 0, 1).astype(np.float32)


def encode_image(model: Model, x: np.ndarray) -> np.ndarray:
    """[3, S, S] preprocessed image -> [N, d] encoder features."""
    v = model.vision
    h = patch_embed(x, v.patch_proj, v.pos_embed, patch=v.patch)
    for block in v.blocks:
        h = encoder_block_forward(h, block)
    return normalize(h, "layer", v.final_gain, v.final_bias)


def project_features(model: Model, img: np.ndarray) -> np.ndarray:
    """[N, d] -> [N, d'] through linear, gelu_tanh, linear."""
    p = model.projector
    if img.ndim != 2 or img.shape[1] != p.fc1.weight.shape[1]:
        raise ShapeError(
            f"projector expects [N, {p.fc1.weight.shape[1]}], got {img.shape}"
        )
    h = matmul(img, p.fc1.weight.T) + p.fc1.bias
    h = activation(h, "gelu_tanh")
    return (matmul(h, p.fc2.weight.T) + p.fc2.bias).astype(np.float32)


def assemble_context(
    text_ids: list[int],
    image_feats: np.ndarray | None,
    embed_table: np.ndarray,
) -> np.ndarray:
    """Embed text ids and splice in the projected image rows.

    The image block replaces a single IMG placeholder; with no
    placeholder it goes right after BOS, before the text.
    """
    vocab, d = embed_table.shape
    for i in text_ids:
        if i < 0 or i >= vocab:
            raise DataError(f"token id {i} outside vocab [0, {vocab})")
    if image_feats is None or image_feats.shape[0] == 0:
        image_feats = np.zeros((0, d), dtype=np.float32)
    if image_feats.shape[1] != d:
        raise ShapeError(
            f"image feature width {image_feats.shape[1]} != embedding width {d}"
        )
    img_positions = [i for i, t in enumerate(text_ids) if t == IMG]
    if len(img_positions) > 1:
        raise DataError(f"prompt contains {len(img_positions)} image placeholders, max 1")
    if img_positions:
        at = img_positions[0]
        before, after = text_ids[:at], text_ids[at + 1 :]
    else:
        before, after = text_ids[:1], text_ids[1:]  # after BOS
    rows = [embed_table[before], image_feats, embed_table[after]]
    return np.concatenate(rows, axis=0).astype(np.float32)


def decoder_forward(
    model: Model,
    rows: np.ndarray,
    cache: KVCache | None = None,
    plan: KernelPlan | None = None,
) -> np.ndarray:
    """Run [t, d'] rows through the decoder stack; returns [t, vocab] logits."""
    dec = model.decoder
    h = rows
    for i, block in enumerate(dec.blocks):
        h = decoder_block_forward(h, block, cache=cache, layer=i, plan=plan)
    h = normalize(h, "rms", dec.final_gain)
    return matmul(h, dec.embed.T)  # tied output head


@dataclass
class Session:
    """One generation stream: model + per-layer cache + emitted tokens."""

    model: Model
    plan: KernelPlan | None = None
    cache: KVCache = field(init=False)
    generated: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        cfg = self.model.config.decoder
        self.cache = KVCache(cfg.layers, cfg.max_context)


def nucleus_keep(probs: np.ndarray, top_p: float) -> tuple[np.ndarray, np.ndarray]:
    """Smallest probability-sorted prefix with mass >= top_p.

    Returns (kept token ids in probability order, renormalized probs);
    always keeps at least one token, ties broken by lowest id.
    """
    order = np.argsort(-probs, kind="stable")
    sorted_probs = probs[order]
    if top_p < 1.0:
        cum = np.cumsum(sorted_probs)
        cutoff = min(int(np.searchsorted(cum, top_p)), len(order) - 1)
    else:
        cutoff = len(order) - 1
    kept = sorted_probs[: cutoff + 1]
    return order[: cutoff + 1], kept / kept.sum()


def sample_token(logits: np.ndarray, params: GenerationParams, rng: SplitMix64) -> int:
    """Temperature scale, nucleus truncation, seeded draw.

    temperature 0 is greedy with lowest-id tie-break.
    """
    logits = logits.astype(np.float32)
    if params.temperature == 0.0:
        return int(np.argmax(logits))
    scaled = logits / np.float32(params.temperature)
    shifted = scaled - scaled.max()
    probs = np.exp(shifted.astype(np.float64))
    probs /= probs.sum()
    ids, kept = nucleus_keep(probs, params.top_p)
    u = rng.next_float()
    acc = 0.0
    for idx, prob in zip(ids, kept):
        acc += prob
        if u < acc:
            return int(idx)
    return int(ids[-1])


def generate(session: Session, context: np.ndarray, params: GenerationParams) -> list[int]:
    """Prefill the context rows, then sample until stop or budget."""
    params.validate()
    model = session.model
    max_context = model.config.decoder.max_context
    if context.shape[0] > max_context:
        raise CapacityError(
            f"context of {context.shape[0]} rows exceeds max context {max_context}"
        )
    rng = SplitMix64(params.seed)
    logits = decoder_forward(model, context, cache=session.cache, plan=session.plan)
    last = logits[-1]
    for _ in range(params.max_new_tokens):
        token = sample_token(last, params, rng)
        session.generated.append(token)
        if session.cache.length + 1 > max_context:
            raise CapacityError(f"generation exceeded max context {max_context}")
        # the emitted token is always fed back, so the cache length stays
        # equal to prompt rows + generated count
        row = model.decoder.embed[token][None, :]
        last = decoder_forward(model, row, cache=session.cache, plan=session.plan)[-1]
        if token == params.stop_id:
            break
    return list(session.generated)
