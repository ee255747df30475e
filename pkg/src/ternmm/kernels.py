"""Integer-accumulating kernels over packed ternary weights.

The defining semantics: y[o] = (sum_k q[k] * T[o,k]) * beta * gamma / 127
with the inner sum carried in 32-bit integers; a trit of +1 adds q[k],
-1 subtracts it, 0 skips. Because every product is 0 or +-q[k] and
|q| <= 127, any faithful evaluation order yields the same integer, so
results are bit-identical across block sizes, decode strategies, and
thread counts.

Fast path: when 127*K < 2^24 every partial sum fits exactly in a float32
mantissa, so a float32 GEMM against the decoded trits produces the exact
integer accumulator at BLAS speed. Larger K falls back to an int32
matmul. Both paths feed the same fixed scalar epilogue
((acc * beta) * gamma) / 127 evaluated per element in float32.

i32 accumulation cannot overflow for K <= 2^24 since |q| <= 127; the
model loader asserts that bound for every ternary layer.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .quant import (
    PackedTernaryMatrix,
    QuantizedTokens,
    quantize_activations_absmax,
)

MAX_TERNARY_K = 1 << 24
_F32_EXACT_MAX_K = (1 << 24) // 127  # 127*K < 2^24 => exact f32 accumulation

# byte -> 4 trits, first trit from the lowest 2 bits; code 0b11 never
# survives load validation, the table maps it to 0 only to stay total
_BYTE_LUT = np.zeros((256, 4), dtype=np.int8)
for _b in range(256):
    for _j in range(4):
        _code = (_b >> (2 * _j)) & 0b11
        _BYTE_LUT[_b, _j] = 1 if _code == 1 else (-1 if _code == 2 else 0)

DECODE_STRATEGIES = ("byte-lut", "shift-mask")


@dataclass
class KernelPlan:
    """Execution knobs; results are bit-identical for every valid plan."""

    block_rows: int = 64
    decode: str = "byte-lut"
    threads: int = 1

    def __post_init__(self) -> None:
        if self.block_rows < 1:
            raise ShapeError("block_rows must be >= 1")
        if self.decode not in DECODE_STRATEGIES:
            raise ShapeError(f"decode must be one of {DECODE_STRATEGIES}")
        if self.threads < 1:
            raise ShapeError("threads must be >= 1")


DEFAULT_PLAN = KernelPlan()


def decode_rows(p: PackedTernaryMatrix, start: int, stop: int, strategy: str) -> np.ndarray:
    """Decode packed rows [start, stop) to an int8 trit block."""
    block = p.data[start:stop]
    if strategy == "byte-lut":
        trits = _BYTE_LUT[block].reshape(block.shape[0], -1)
    else:  # shift-mask
        codes = np.empty((block.shape[0], block.shape[1] * 4), dtype=np.uint8)
        for j in range(4):
            codes[:, j::4] = (block >> (2 * j)) & 0b11
        trits = (codes == 1).astype(np.int8) - (codes == 2).astype(np.int8)
    return trits[:, : p.cols]


def _accumulate(q: np.ndarray, trits: np.ndarray) -> np.ndarray:
    """Exact integer accumulator sum_k q[.,k]*T[o,k] as float32 [m, rows]."""
    k = q.shape[1]
    if k <= _F32_EXACT_MAX_K:
        acc = q.astype(np.float32) @ trits.astype(np.float32).T
    else:
        acc = (q.astype(np.int32) @ trits.astype(np.int32).T).astype(np.float32)
    return acc


def _epilogue(acc: np.ndarray, beta: float, gammas: np.ndarray) -> np.ndarray:
    return ((acc * np.float32(beta)) * gammas[:, None].astype(np.float32)) / np.float32(127.0)


def ternary_matmul(
    p: PackedTernaryMatrix, tokens: QuantizedTokens, plan: KernelPlan | None = None
) -> np.ndarray:
    """Batched ternary x int8 product -> float32 [m, O]."""
    plan = plan or DEFAULT_PLAN
    if tokens.k != p.cols:
        raise ShapeError(f"activation width {tokens.k} != weight cols {p.cols}")
    m = tokens.m
    out = np.empty((m, p.rows), dtype=np.float32)
    if m == 0:
        return out
    blocks = [
        (start, min(start + plan.block_rows, p.rows))
        for start in range(0, p.rows, plan.block_rows)
    ]

    def run(block: tuple[int, int]) -> None:
        start, stop = block
        trits = decode_rows(p, start, stop, plan.decode)
        acc = _accumulate(tokens.q, trits)
        out[:, start:stop] = _epilogue(acc, p.scale, tokens.scales)

    if plan.threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=plan.threads) as pool:
            list(pool.map(run, blocks))
    else:
        for block in blocks:
            run(block)
    return out


def ternary_matvec(
    p: PackedTernaryMatrix, q: np.ndarray, gamma: float, plan: KernelPlan | None = None
) -> np.ndarray:
    """Single-token ternary product -> float32 [O]."""
    q = np.asarray(q, dtype=np.int8)
    if q.ndim != 1 or q.shape[0] != p.cols:
        raise ShapeError(f"vector length {q.shape} != weight cols {p.cols}")
    tokens = QuantizedTokens(q=q[None, :], scales=np.array([gamma], dtype=np.float32))
    return ternary_matmul(p, tokens, plan)[0]


def bitlinear_forward(
    p: PackedTernaryMatrix, x: np.ndarray, plan: KernelPlan | None = None
) -> np.ndarray:
    """Quantize activations per token, then ternary matmul. No bias."""
    tokens = quantize_activations_absmax(x)
    return ternary_matmul(p, tokens, plan)


def dense_reference_forward(p: PackedTernaryMatrix, x: np.ndarray) -> np.ndarray:
    """Oracle: dequantize both sides to f32 and run a dense matmul.

    Consumes the identical q, gamma, beta, T as bitlinear_forward;
    differs only by f32 summation order, bounded by ~1e-4 at toy sizes.
    """
    from .quant import dequantize_weights

    tokens = quantize_activations_absmax(x)
    x_deq = tokens.scales[:, None] * tokens.q.astype(np.float32) / np.float32(127.0)
    w_deq = dequantize_weights(p)
    return (x_deq @ w_deq.T).astype(np.float32)


class OpCounter:
    """Arithmetic recorder for the instrumented kernel."""

    def __init__(self) -> None:
        self.int_adds = 0
        self.int_muls = 0

    def add(self, a: int, b: int) -> int:
        self.int_adds += 1
        return a + b

    def sub(self, a: int, b: int) -> int:
        self.int_adds += 1
        return a - b

    def mul(self, a: int, b: int) -> int:
        self.int_muls += 1
        return a * b


def instrumented_matvec(
    p: PackedTernaryMatrix, q: np.ndarray, gamma: float
) -> tuple[np.ndarray, OpCounter]:
    """Pure-Python matvec whose accumulation loop dispatches add/sub/skip.

    Every integer operation inside the loop goes through the counter;
    the loop itself never calls mul, which the test suite asserts.
    """
    q = np.asarray(q, dtype=np.int8)
    if q.shape != (p.cols,):
        raise ShapeError(f"vector length {q.shape} != weight cols {p.cols}")
    counter = OpCounter()
    qi = [int(v) for v in q]
    out = np.empty(p.rows, dtype=np.float32)
    for o in range(p.rows):
        acc = 0
        row = p.data[o]
        for k in range(p.cols):
            code = (int(row[k >> 2]) >> (2 * (k & 3))) & 0b11
            if code == 1:
                acc = counter.add(acc, qi[k])
            elif code == 2:
                acc = counter.sub(acc, qi[k])
        out[o] = _epilogue(
            np.array([[acc]], dtype=np.float32),
            p.scale,
            np.array([gamma], dtype=np.float32),
        )[0, 0]
    return out, counter


def bench_kernels(
    p: PackedTernaryMatrix,
    x: np.ndarray,
    iters: int = 10,
    plan: KernelPlan | None = None,
) -> dict:
    """Time the ternary kernel against the dense oracle on one workload.

    Verifies agreement (<= 1e-4 max abs diff) before timing; reports
    elements/s and effective weight bytes/s for both paths plus the
    speed ratio. Informational only.
    """
    plan = plan or DEFAULT_PLAN
    y_kernel = bitlinear_forward(p, x, plan)
    y_oracle = dense_reference_forward(p, x)
    max_diff = float(np.max(np.abs(y_kernel - y_oracle))) if y_kernel.size else 0.0
    if max_diff > 1e-4:
        raise ShapeError(f"kernel/oracle disagreement {max_diff:.2e} exceeds 1e-4")

    m = x.shape[0]
    elements = m * p.rows * p.cols

    def timed(fn) -> float:
        t0 = time.perf_counter()
        for _ in range(iters):
            fn()
        return (time.perf_counter() - t0) / iters

    t_kernel = timed(lambda: bitlinear_forward(p, x, plan))
    t_oracle = timed(lambda: dense_reference_forward(p, x))
    return {
        "max_abs_diff": max_diff,
        "ternary_elements_per_s": elements / t_kernel,
        "ternary_bytes_per_s": p.nbytes / t_kernel,
        "dense_elements_per_s": elements / t_oracle,
        "dense_bytes_per_s": (p.rows * p.cols * 4) / t_oracle,
        "speed_ratio": t_oracle / t_kernel,
        "ternary_seconds": t_kernel,
        "dense_seconds": t_oracle,
    }
