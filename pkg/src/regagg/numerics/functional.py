"""Fused differentiable layer ops built on :mod:`regagg.numerics.tensor`."""

from __future__ import annotations

import math

import numpy as np

from ..errors import ConfigError, DimensionError, NumericError
from ..rng import Rng
from . import kernels
from .tensor import Tensor, add, as_tensor, matmul

LN_EPS = 1e-6
NORM_EPS = 1e-12


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored ``[in, out]``."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear expects last dim {weight.shape[0]}, got input shape {x.shape}")
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layernorm over last dim {d} got gain {gain.shape}, bias {bias.shape}")
    if eps <= 0:
        raise ConfigError("layernorm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=lead)
        g_bias = g.sum(axis=lead)
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, g_gain, g_bias

    return Tensor._result(out, (x, gain, bias), bw, "layernorm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._result(y, (x,), bw, "softmax")


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    mx = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - mx)
    s = e.sum(axis=axis, keepdims=True)
    out = mx + np.log(s)
    p = e / s

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * p,)

    return Tensor._result(out if keepdims else np.squeeze(out, axis), (x,), bw, "logsumexp")


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Unit L2 norm along ``axis``; norms below 1e-12 are clamped."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    clamped = norm < NORM_EPS
    denom = np.where(clamped, NORM_EPS, norm)
    y = x.data / denom

    def bw(g):
        proj = np.where(clamped, 0.0, (g * y).sum(axis=axis, keepdims=True))
        return ((g - y * proj) / denom,)

    return Tensor._result(y, (x,), bw, "l2_normalize")


def dropout(x: Tensor, rate: float, rng: Rng | None, training: bool) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-rate) at train time."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("training-mode dropout needs an rng")
    keep = rng.random(x.shape) >= rate
    scale = keep / (1.0 - rate)
    return Tensor._result(x.data * scale, (x,), lambda g: (g * scale,), "dropout")


def conv2d(x: Tensor, kernels_: Tensor) -> Tensor:
    """Zero-padded "same" cross-correlation.

    ``x`` is ``[C_in, H, W]`` or ``[B, C_in, H, W]``; kernels ``[C_out, C_in, k, k]``
    with odd ``k``.
    """
    k = kernels_.shape[-1]
    if kernels_.ndim != 4 or kernels_.shape[-2] != k:
        raise ConfigError(f"conv2d kernels must be [C_out, C_in, k, k], got {kernels_.shape}")
    if k % 2 == 0:
        raise ConfigError(f"conv2d kernel size must be odd for same padding, got {k}")
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or xd.shape[1] != kernels_.shape[1]:
        raise DimensionError(f"conv2d input {x.shape} does not match kernels {kernels_.shape}")
    out = kernels.conv2d_forward(xd, kernels_.data)

    def bw(g):
        gy = g[None] if single else g
        gx, gw = kernels.conv2d_backward(xd, kernels_.data, gy)
        return (gx[0] if single else gx), gw

    return Tensor._result(out[0] if single else out, (x, kernels_), bw, "conv2d")


def sinkhorn(scores: Tensor, iters: int = 3, eps: float = 1.0, log_col_marginal=None) -> Tensor:
    """Entropic transport plan between n rows (mass 1/n each) and m columns.

    Runs ``iters`` alternating log-domain row/column normalisations of the
    kernel ``exp(scores / eps)`` and returns the exponentiated plan.  The
    gradient is exact through the unrolled iterations.  ``scores`` is
    ``[n, m]`` or ``[B, n, m]``.  ``log_col_marginal`` overrides the uniform
    column marginal (used by the dustbin ablation).
    """
    if iters < 1:
        raise ConfigError("sinkhorn needs iters >= 1")
    if eps <= 0:
        raise ConfigError("sinkhorn eps must be positive")
    single = scores.ndim == 2
    s = scores.data[None] if single else scores.data
    if not np.isfinite(s).all():
        raise NumericError("sinkhorn received non-finite scores")
    _, n, m = s.shape
    log_k = s / eps
    log_a = -math.log(n)
    if log_col_marginal is None:
        log_b = np.full(m, -math.log(m))
    else:
        log_b = np.asarray(log_col_marginal, dtype=np.float64)
        if log_b.shape != (m,):
            raise DimensionError(f"column marginal must have length {m}")
    u, v, bad = kernels.sinkhorn_forward(log_k, iters, log_a, log_b)
    if bad:
        raise NumericError(f"sinkhorn produced a non-finite value at iteration {bad}")
    plan = np.exp(log_k + u[:, -1, :, None] + v[:, -1, None, :])

    def bw(g):
        gp = g[None] if single else g
        gs = kernels.sinkhorn_backward(log_k, u, v, plan, gp, log_a, log_b) / eps
        return (gs[0] if single else gs,)

    return Tensor._result(plan[0] if single else plan, (scores,), bw, "sinkhorn")
