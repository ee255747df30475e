"""Dense float32 tensor primitives.

All non-ternary math in the toolkit runs through these functions. Tensors
are plain numpy arrays: float32, row-major, explicit shapes, no
broadcasting (callers reshape). Every operation returns finite float32
output for finite input.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DataError, ShapeError

Tensor = np.ndarray  # float32, C-contiguous by convention

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
GELU_CUBIC = 0.044715
QUICK_GELU_SLOPE = 1.702


def as_f32(x, copy: bool = False) -> Tensor:
    """Coerce nested lists / arrays to a float32 ndarray."""
    a = np.array(x, dtype=np.float32, copy=True) if copy else np.asarray(x, dtype=np.float32)
    return a


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(x)):
        raise DataError(f"{what} contains non-finite values")
    return x


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Dense [M,K] x [K,N] -> [M,N] with f32 accumulation."""
    a = as_f32(a)
    b = as_f32(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability.

    Inputs must be finite; rows of -inf are a caller bug and rejected.
    """
    x = as_f32(x)
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects 2-D input, got {x.shape}")
    check_finite(x, "softmax input")
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def normalize(
    x: Tensor,
    kind: str,
    gain: Tensor,
    bias: Tensor | None = None,
    eps: float = 1e-5,
) -> Tensor:
    """Per-row layer or RMS normalization.

    layer: (x - mean) / sqrt(var + eps) * gain + bias
    rms:   x / sqrt(mean(x^2) + eps) * gain
    """
    x = as_f32(x)
    gain = as_f32(gain)
    if x.ndim != 2:
        raise ShapeError(f"normalize expects 2-D input, got {x.shape}")
    n = x.shape[1]
    if gain.shape != (n,):
        raise ShapeError(f"gain shape {gain.shape} does not match row width {n}")
    if eps <= 0:
        raise DataError("eps must be positive")
    if kind == "layer":
        mean = x.mean(axis=1, keepdims=True, dtype=np.float32)
        var = np.mean((x - mean) ** 2, axis=1, keepdims=True, dtype=np.float32)
        out = (x - mean) / np.sqrt(var + np.float32(eps)) * gain
        if bias is not None:
            bias = as_f32(bias)
            if bias.shape != (n,):
                raise ShapeError(f"bias shape {bias.shape} does not match row width {n}")
            out = out + bias
        return out.astype(np.float32)
    if kind == "rms":
        ms = np.mean(x * x, axis=1, keepdims=True, dtype=np.float32)
        return (x / np.sqrt(ms + np.float32(eps)) * gain).astype(np.float32)
    raise DataError(f"unknown normalization kind {kind!r}")


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise nonlinearity: gelu_tanh, silu, or quick_gelu."""
    x = as_f32(x)
    if kind == "gelu_tanh":
        inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)
        return (0.5 * x * (1.0 + np.tanh(inner))).astype(np.float32)
    if kind == "silu":
        return (x * _sigmoid(x)).astype(np.float32)
    if kind == "quick_gelu":
        return (x * _sigmoid(QUICK_GELU_SLOPE * x)).astype(np.float32)
    raise DataError(f"unknown activation kind {kind!r}")


def _sigmoid(x: Tensor) -> Tensor:
    # exp of -|x| never overflows; both branches are the textbook identity.
    out = np.empty_like(x, dtype=np.float32)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
