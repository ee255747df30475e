"""Ternary weight quantization, int8 activation quantization, trit packing.

Weights: per-tensor absmean ternarization. beta = mean(|W|), floored at
1e-8; trits = clip(round(W / beta), -1, +1) with round half away from
zero. Ratios and rounding are evaluated in float64 so results are
deterministic across platforms.

Activations: per-token absmax int8. gamma_i = max_k |x[i,k]|;
q[i,k] = clip(round(127 * x[i,k] / gamma_i), -127, 127), same rounding
mode; an all-zero row gets gamma = 0 and a zero q row.

Packing: 2-bit codes, 4 trits per byte. 0 -> 0b00, +1 -> 0b01,
-1 -> 0b10; 0b11 is forbidden. Trit j of a 4-group occupies bits
(2j+1..2j), so the first trit sits in the lowest bits. Each row is
padded independently to a whole byte with 0b00.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CorruptionError, DataError, ShapeError

BETA_FLOOR = 1e-8

# code -> trit; index 3 is the forbidden code and never produced
_CODE_TO_TRIT = np.array([0, 1, -1, 0], dtype=np.int8)

TritMatrix = np.ndarray  # int8 [O, K], values in {-1, 0, +1}


@dataclass
class PackedTernaryMatrix:
    """O x K trit matrix packed 4 trits/byte with a per-tensor scale."""

    rows: int
    cols: int
    data: np.ndarray  # uint8 [rows, ceil(cols/4)]
    scale: float  # beta >= 0

    def __post_init__(self) -> None:
        expected = (self.rows, bytes_per_row(self.cols))
        if self.data.shape != expected:
            raise ShapeError(
                f"packed data shape {self.data.shape} != expected {expected} "
                f"for {self.rows}x{self.cols}"
            )

    @property
    def nbytes(self) -> int:
        return self.rows * bytes_per_row(self.cols)


@dataclass
class QuantizedTokens:
    """Per-token int8 activation rows with per-token scales."""

    q: np.ndarray  # int8 [m, K]
    scales: np.ndarray  # float32 [m], gamma >= 0

    @property
    def m(self) -> int:
        return self.q.shape[0]

    @property
    def k(self) -> int:
        return self.q.shape[1]


def bytes_per_row(cols: int) -> int:
    return (cols + 3) // 4


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_weights_absmean(w: np.ndarray) -> tuple[TritMatrix, float]:
    """Ternarize a weight matrix; returns (trits, beta).

    beta is the float32 value of the float64 mean of |W|, floored at
    1e-8 so all-zero tensors stay well defined.
    """
    w = np.asarray(w, dtype=np.float32)
    if not np.all(np.isfinite(w)):
        raise DataError("weight tensor contains non-finite values")
    beta = np.float32(np.mean(np.abs(w), dtype=np.float64))
    if beta < BETA_FLOOR:
        beta = np.float32(BETA_FLOOR)
    ratio = w.astype(np.float64) / float(beta)
    trits = np.clip(_round_half_away(ratio), -1, 1).astype(np.int8)
    return trits, float(beta)


def quantize_activations_absmax(x: np.ndarray) -> QuantizedTokens:
    """Quantize a [m, K] activation batch to per-token int8."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2:
        raise ShapeError(f"expected [m, K] activations, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DataError("activation tensor contains non-finite values")
    gammas = np.abs(x).max(axis=1).astype(np.float32) if x.shape[1] else np.zeros(x.shape[0], np.float32)
    q = np.zeros(x.shape, dtype=np.int8)
    nonzero = gammas > 0
    if np.any(nonzero):
        scaled = 127.0 * x[nonzero].astype(np.float64) / gammas[nonzero, None].astype(np.float64)
        q[nonzero] = np.clip(_round_half_away(scaled), -127, 127).astype(np.int8)
    return QuantizedTokens(q=q, scales=gammas)


def pack_trits(trits: TritMatrix) -> np.ndarray:
    """Pack an [O, K] trit matrix into uint8 [O, ceil(K/4)]."""
    trits = np.asarray(trits)
    if trits.ndim != 2:
        raise ShapeError(f"expected 2-D trit matrix, got shape {trits.shape}")
    valid = (trits == -1) | (trits == 0) | (trits == 1)
    if not valid.all():
        bad = trits[~valid].flat[0]
        raise DataError(f"trit value {bad} outside {{-1, 0, 1}}")
    rows, cols = trits.shape
    nb = bytes_per_row(cols)
    codes = np.zeros((rows, nb * 4), dtype=np.uint8)
    codes[:, :cols][trits == 1] = 0b01
    codes[:, :cols][trits == -1] = 0b10
    groups = codes.reshape(rows, nb, 4)
    packed = (
        groups[:, :, 0]
        | (groups[:, :, 1] << 2)
        | (groups[:, :, 2] << 4)
        | (groups[:, :, 3] << 6)
    )
    return packed.astype(np.uint8)


def unpack_trits(data: np.ndarray, rows: int, cols: int) -> TritMatrix:
    """Exact inverse of pack_trits; rejects forbidden codes and bad padding."""
    data = np.asarray(data, dtype=np.uint8)
    nb = bytes_per_row(cols)
    if data.size != rows * nb:
        raise ShapeError(
            f"packed byte count {data.size} != {rows}*ceil({cols}/4) = {rows * nb}"
        )
    data = data.reshape(rows, nb)
    codes = np.empty((rows, nb, 4), dtype=np.uint8)
    for j in range(4):
        codes[:, :, j] = (data >> (2 * j)) & 0b11
    codes = codes.reshape(rows, nb * 4)
    bad = codes == 0b11
    if bad.any():
        r, pos = np.argwhere(bad)[0]
        raise CorruptionError(
            f"forbidden trit code 0b11 at row {r}, byte {pos // 4} (trit slot {pos % 4})"
        )
    if nb * 4 > cols and codes[:, cols:].any():
        r, pos = np.argwhere(codes[:, cols:])[0]
        raise CorruptionError(
            f"nonzero padding code at row {r}, byte {(cols + pos) // 4}"
        )
    return _CODE_TO_TRIT[codes[:, :cols]]


def validate_packed(p: PackedTernaryMatrix) -> None:
    """Check a packed matrix for forbidden codes without materializing trits."""
    unpack_trits(p.data, p.rows, p.cols)


def pack_matrix(trits: TritMatrix, scale: float) -> PackedTernaryMatrix:
    rows, cols = np.asarray(trits).shape
    return PackedTernaryMatrix(rows=rows, cols=cols, data=pack_trits(trits), scale=float(scale))


def quantize_and_pack(w: np.ndarray) -> PackedTernaryMatrix:
    """absmean-quantize then pack a weight matrix."""
    trits, beta = quantize_weights_absmean(w)
    return pack_matrix(trits, beta)


def dequantize_weights(p: PackedTernaryMatrix) -> np.ndarray:
    """Recover the f32 matrix beta * T; every element is in {-beta, 0, beta}."""
    trits = unpack_trits(p.data, p.rows, p.cols)
    return (trits.astype(np.float32) * np.float32(p.scale)).astype(np.float32)
