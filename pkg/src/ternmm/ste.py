"""Straight-through-estimator building blocks and gradient checking.

Explicit forward/backward pairs over numpy arrays; no autodiff graph.
All functions preserve the input dtype so the finite-difference harness
can run the same code in float64.

The BitLinear rule: the forward is the true quantized path (per-token
int8 activations against packed trits); the backward treats both
quantizers as identity, i.e. it is exactly the dense layer backward
with effective weights beta*T, sharing the same float32 operations as
the dense twin.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError
from .kernels import KernelPlan, bitlinear_forward
from .quant import pack_matrix, quantize_weights_absmean

_C = math.sqrt(2.0 / math.pi)
_A = 0.044715


def linear_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    y = x @ w.T
    if b is not None:
        y = y + b
    return y


def linear_bwd(
    x: np.ndarray, w: np.ndarray, gy: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dx = gy @ w
    dw = gy.T @ x
    db = gy.sum(axis=0)
    return dx, dw, db


def gelu_tanh_fwd(x: np.ndarray) -> np.ndarray:
    inner = _C * (x + _A * x**3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_tanh_grad(x: np.ndarray) -> np.ndarray:
    inner = _C * (x + _A * x**3)
    th = np.tanh(inner)
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * _C * (1.0 + 3.0 * _A * x * x)


def silu_fwd(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def silu_grad(x: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


def dequantized_twin(w_latent: np.ndarray) -> np.ndarray:
    """The dense twin's weights: beta * T as float32."""
    trits, beta = quantize_weights_absmean(w_latent)
    return (trits.astype(np.float32) * np.float32(beta)).astype(np.float32)


def bitlinear_ste_forward(
    w_latent: np.ndarray, x: np.ndarray, plan: KernelPlan | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Quantized forward; returns (y, effective dense weights for backward)."""
    trits, beta = quantize_weights_absmean(w_latent)
    packed = pack_matrix(trits, beta)
    y = bitlinear_forward(packed, x, plan)
    w_eff = (trits.astype(np.float32) * np.float32(beta)).astype(np.float32)
    return y, w_eff


def bitlinear_ste_backward(
    x: np.ndarray, w_eff: np.ndarray, gy: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Identity STE: the dense-twin backward with weights beta*T."""
    dx, dw, _ = linear_bwd(x, w_eff, gy)
    return dx, dw


def bitlinear_train_step(
    w_latent: np.ndarray, x: np.ndarray, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One BitLinear forward + STE backward.

    Returns (output, dL/dW_latent, dL/dx) for x [m, K], upstream [m, O].
    """
    w_latent = np.asarray(w_latent, dtype=np.float32)
    x = np.asarray(x, dtype=np.float32)
    upstream = np.asarray(upstream, dtype=np.float32)
    if x.ndim != 2 or x.shape[1] != w_latent.shape[1]:
        raise ShapeError(f"input {x.shape} incompatible with latent weights {w_latent.shape}")
    if upstream.shape != (x.shape[0], w_latent.shape[0]):
        raise ShapeError(
            f"upstream {upstream.shape} != ({x.shape[0]}, {w_latent.shape[0]})"
        )
    y, w_eff = bitlinear_ste_forward(w_latent, x)
    dx, dw = bitlinear_ste_backward(x, w_eff, upstream)
    return y, dw, dx


def rmsnorm_fwd(x: np.ndarray, gain: np.ndarray, eps: float = 1e-5):
    ms = np.mean(x * x, axis=1, keepdims=True)
    r = np.sqrt(ms + eps)
    y = x / r * gain
    return y, (x, gain, r)


def rmsnorm_bwd(ctx, gy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x, gain, r = ctx
    n = x.shape[1]
    gg = gy * gain
    dot = np.sum(gg * x, axis=1, keepdims=True)
    dx = gg / r - x * dot / (n * r**3)
    dgain = np.sum(gy * x / r, axis=0)
    return dx, dgain


def rope_fwd(x: np.ndarray, positions: np.ndarray, base: float) -> np.ndarray:
    return _rope_rotate(x, positions, base, sign=1.0)


def rope_bwd(gy: np.ndarray, positions: np.ndarray, base: float) -> np.ndarray:
    # a rotation's adjoint is the inverse rotation
    return _rope_rotate(gy, positions, base, sign=-1.0)


def _rope_rotate(x: np.ndarray, positions: np.ndarray, base: float, sign: float) -> np.ndarray:
    t, heads, hd = x.shape
    freqs = base ** (-(2.0 * np.arange(hd // 2, dtype=x.dtype)) / hd)
    angles = np.asarray(positions, dtype=x.dtype)[:, None] * freqs[None, :] * sign
    cos = np.cos(angles)[:, None, :]
    sin = np.sin(angles)[:, None, :]
    x0, x1 = x[:, :, 0::2], x[:, :, 1::2]
    out = np.empty_like(x)
    out[:, :, 0::2] = x0 * cos - x1 * sin
    out[:, :, 1::2] = x0 * sin + x1 * cos
    return out


def attention_fwd(q: np.ndarray, k: np.ndarray, v: np.ndarray, causal: bool = True):
    """Full-sequence attention over [t, heads, hd]; saves softmax for backward."""
    t, heads, hd = q.shape
    qh, kh, vh = (a.transpose(1, 0, 2) for a in (q, k, v))
    scale = 1.0 / math.sqrt(hd)
    scores = (qh @ kh.transpose(0, 2, 1)) * scale
    if causal:
        mask = np.triu(np.ones((t, t), dtype=bool), k=1)
        scores = np.where(mask[None], np.asarray(-1e30, dtype=scores.dtype), scores)
    shifted = scores - scores.max(axis=2, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=2, keepdims=True)
    out = (probs @ vh).transpose(1, 0, 2)
    return out, (qh, kh, vh, probs, scale)


def attention_bwd(ctx, gout: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    qh, kh, vh, probs, scale = ctx
    go = gout.transpose(1, 0, 2)
    dv = probs.transpose(0, 2, 1) @ go
    dp = go @ vh.transpose(0, 2, 1)
    ds = probs * (dp - np.sum(dp * probs, axis=2, keepdims=True))
    dq = (ds @ kh) * scale
    dk = (ds.transpose(0, 2, 1) @ qh) * scale
    return dq.transpose(1, 0, 2), dk.transpose(1, 0, 2), dv.transpose(1, 0, 2)


def cross_entropy(
    logits: np.ndarray, targets: np.ndarray, positions: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean next-token loss over the given positions; returns (loss, dlogits).

    Positions index rows of logits; targets[i] is the token expected at
    positions[i]. Rows outside the position set carry no gradient.
    """
    positions = np.asarray(positions, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    sel = logits[positions]
    shifted = sel - sel.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    n = len(positions)
    nll = -np.log(probs[np.arange(n), targets] + 0.0)
    loss = float(nll.mean())
    dsel = probs.copy()
    dsel[np.arange(n), targets] -= 1.0
    dsel /= n
    dlogits = np.zeros_like(logits)
    dlogits[positions] = dsel.astype(logits.dtype)
    return loss, dlogits


def finite_diff_check(
    loss_fn,
    params: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    eps: float = 1e-3,
    max_coords_per_param: int = 64,
    seed: int = 0,
) -> float:
    """Central differences of loss_fn against analytic gradients.

    loss_fn(params) -> scalar must be deterministic and differentiable
    in every checked parameter (dense surrogates, not the piecewise-
    constant ternary path). Checks up to max_coords_per_param
    coordinates per tensor, deterministically sampled. Returns the max
    relative error |fd - g| / max(|fd|, |g|, 1e-8); a sign-flipped
    backward therefore scores about 2.0.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in sorted(params):
        theta = params[name]
        grad = analytic[name]
        if theta.shape != grad.shape:
            raise ShapeError(f"gradient shape {grad.shape} != parameter {theta.shape} ({name})")
        count = theta.size
        if count <= max_coords_per_param:
            coords = np.arange(count)
        else:
            coords = rng.choice(count, size=max_coords_per_param, replace=False)
        flat = theta.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            up = loss_fn(params)
            flat[c] = orig - eps
            down = loss_fn(params)
            flat[c] = orig
            fd = (up - down) / (2.0 * eps)
            g = float(grad.reshape(-1)[c])
            err = abs(fd - g) / max(abs(fd), abs(g), 1e-8)
            worst = max(worst, err)
    return worst
