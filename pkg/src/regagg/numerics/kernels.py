"""Hot numeric kernels: same-padded conv2d, unrolled log-domain Sinkhorn, GELU.

Each kernel exists twice: a numba ``@njit`` loop version and a vectorized
numpy version.  ``REGAGG_NUMBA=0`` (or numba missing) selects numpy.  Both
paths are tested against each other in ``tests/test_kernels.py`` and timed in
``benchmarks/bench_kernels.py``.

Array layouts:
    conv:     x [B, C_in, H, W], w [C_out, C_in, k, k], k odd, zero padding
    sinkhorn: log_k [B, n, m] (scores / eps); log column masses [m];
              histories u [B, T+1, n], v [B, T+1, m] with index 0 holding
              the zero initialisation
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba as _numba
except ImportError:  # pragma: no cover - exercised only without numba
    _numba = None


def _env_flag() -> bool:
    return os.environ.get("REGAGG_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


HAVE_NUMBA = _numba is not None
USE_NUMBA = HAVE_NUMBA and _env_flag()


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------


def _windows(x: np.ndarray, k: int) -> np.ndarray:
    r = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)))
    # [B, C, H, W, k, k]
    return np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))


def conv2d_forward_np(x, w):
    return np.einsum("bchwij,ocij->bohw", _windows(x, w.shape[-1]), w, optimize=True)


def conv2d_backward_np(x, w, gy):
    k = w.shape[-1]
    gw = np.einsum("bohw,bchwij->ocij", gy, _windows(x, k), optimize=True)
    w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    gx = np.einsum("bohwij,coij->bchw", _windows(gy, k), w_flip, optimize=True)
    return gx, gw


def _lse(a: np.ndarray, axis: int) -> np.ndarray:
    mx = a.max(axis=axis, keepdims=True)
    return np.squeeze(mx, axis) + np.log(np.exp(a - mx).sum(axis=axis))


def sinkhorn_forward_np(log_k, iters, log_a, log_b):
    bsz, n, m = log_k.shape
    u = np.zeros((bsz, iters + 1, n))
    v = np.zeros((bsz, iters + 1, m))
    # non-finite values are reported through the return value, not warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(1, iters + 1):
            u[:, t] = log_a - _lse(log_k + v[:, t - 1, None, :], axis=2)
            v[:, t] = log_b[None, :] - _lse(log_k + u[:, t, :, None], axis=1)
            if not (np.isfinite(u[:, t]).all() and np.isfinite(v[:, t]).all()):
                return u, v, t
    return u, v, 0


def sinkhorn_backward_np(log_k, u, v, plan, g_plan, log_a, log_b):
    iters = u.shape[1] - 1
    gx = g_plan * plan
    g_logk = gx.copy()
    gu = gx.sum(axis=2)
    gv = gx.sum(axis=1)
    for t in range(iters, 0, -1):
        q = np.exp(log_k + u[:, t, :, None] + v[:, t, None, :] - log_b[None, None, :])
        g_logk -= gv[:, None, :] * q
        gu = gu - np.einsum("bij,bj->bi", q, gv)
        r = np.exp(log_k + v[:, t - 1, None, :] + u[:, t, :, None] - log_a)
        g_logk -= gu[:, :, None] * r
        gv = -np.einsum("bij,bi->bj", r, gu)
        gu = np.zeros_like(gu)
    return g_logk


GELU_C = float(np.sqrt(2.0 / np.pi))
GELU_K = 0.044715


def gelu_np(x):
    """Tanh-approximated GELU value and derivative."""
    th = np.tanh(GELU_C * (x + GELU_K * (x * x * x)))
    out = 0.5 * x * (1.0 + th)
    deriv = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3 * GELU_K * x * x)
    return out, deriv


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:
    _njit = _numba.njit(cache=True, fastmath=False)
    # reassociation lets the tap loops vectorize; results stay run-to-run identical
    _njit_fast = _numba.njit(cache=True, fastmath=True)

    @_njit
    def _gelu_nb(x):
        flat = x.ravel()
        out = np.empty_like(flat)
        deriv = np.empty_like(flat)
        for i in range(flat.size):
            xi = flat[i]
            th = np.tanh(GELU_C * (xi + GELU_K * xi * xi * xi))
            out[i] = 0.5 * xi * (1.0 + th)
            deriv[i] = 0.5 * (1.0 + th) + 0.5 * xi * (1.0 - th * th) * GELU_C * (1.0 + 3 * GELU_K * xi * xi)
        return out.reshape(x.shape), deriv.reshape(x.shape)

    # Direct convolution over the flattened zero-padded image: with row
    # stride wp = w + 2r, tap (i, j) of output position p = y * wp + x reads
    # input position p + i * wp + j, so each tap is one contiguous loop of
    # length h * wp.  Columns x >= w of that loop are scratch and dropped.

    @_njit
    def _pad_flat(x, r):
        bsz, cin, h, wd = x.shape
        wp = wd + 2 * r
        xp = np.zeros((bsz, cin, (h + 2 * r) * wp + 2 * r))
        for b in range(bsz):
            for c in range(cin):
                for yy in range(h):
                    base = (yy + r) * wp + r
                    for xx in range(wd):
                        xp[b, c, base + xx] = x[b, c, yy, xx]
        return xp

    @_njit_fast
    def _conv2d_forward_nb(x, w):
        bsz, cin, h, wd = x.shape
        cout, _, k, _ = w.shape
        r = k // 2
        wp = wd + 2 * r
        span = h * wp
        xp = _pad_flat(x, r)
        out = np.empty((bsz, cout, h, wd))
        acc = np.empty(span)
        for b in range(bsz):
            for o in range(cout):
                acc[:] = 0.0
                for c in range(cin):
                    row = xp[b, c]
                    for i in range(k):
                        for j in range(k):
                            wv = w[o, c, i, j]
                            off = i * wp + j
                            for q in range(span):
                                acc[q] += wv * row[off + q]
                for yy in range(h):
                    for xx in range(wd):
                        out[b, o, yy, xx] = acc[yy * wp + xx]
        return out

    @_njit_fast
    def _conv2d_backward_nb(x, w, gy):
        bsz, cin, h, wd = x.shape
        cout, _, k, _ = w.shape
        r = k // 2
        wp = wd + 2 * r
        span = h * wp
        xp = _pad_flat(x, r)
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w)
        g = np.zeros(span)
        for b in range(bsz):
            for o in range(cout):
                for yy in range(h):
                    for xx in range(wd):
                        g[yy * wp + xx] = gy[b, o, yy, xx]
                for c in range(cin):
                    row = xp[b, c]
                    grow = gxp[b, c]
                    for i in range(k):
                        for j in range(k):
                            wv = w[o, c, i, j]
                            off = i * wp + j
                            acc = 0.0
                            for q in range(span):
                                acc += g[q] * row[off + q]
                            for q in range(span):
                                grow[off + q] += wv * g[q]
                            gw[o, c, i, j] += acc
        gx = np.empty_like(x)
        for b in range(bsz):
            for c in range(cin):
                for yy in range(h):
                    base = (yy + r) * wp + r
                    for xx in range(wd):
                        gx[b, c, yy, xx] = gxp[b, c, base + xx]
        return gx, gw

    @_njit
    def _sinkhorn_forward_nb(log_k, iters, log_a, log_b):
        bsz, n, m = log_k.shape
        u = np.zeros((bsz, iters + 1, n))
        v = np.zeros((bsz, iters + 1, m))
        for b in range(bsz):
            for t in range(1, iters + 1):
                for i in range(n):
                    mx = -np.inf
                    for j in range(m):
                        a = log_k[b, i, j] + v[b, t - 1, j]
                        if a > mx:
                            mx = a
                    s = 0.0
                    for j in range(m):
                        s += np.exp(log_k[b, i, j] + v[b, t - 1, j] - mx)
                    u[b, t, i] = log_a - (mx + np.log(s))
                for j in range(m):
                    mx = -np.inf
                    for i in range(n):
                        a = log_k[b, i, j] + u[b, t, i]
                        if a > mx:
                            mx = a
                    s = 0.0
                    for i in range(n):
                        s += np.exp(log_k[b, i, j] + u[b, t, i] - mx)
                    v[b, t, j] = log_b[j] - (mx + np.log(s))
                for i in range(n):
                    if not np.isfinite(u[b, t, i]):
                        return u, v, t
                for j in range(m):
                    if not np.isfinite(v[b, t, j]):
                        return u, v, t
        return u, v, 0

    @_njit
    def _sinkhorn_backward_nb(log_k, u, v, plan, g_plan, log_a, log_b):
        bsz, n, m = log_k.shape
        iters = u.shape[1] - 1
        g_logk = np.empty_like(log_k)
        gu = np.zeros(n)
        gv = np.zeros(m)
        for b in range(bsz):
            gu[:] = 0.0
            gv[:] = 0.0
            for i in range(n):
                for j in range(m):
                    gx = g_plan[b, i, j] * plan[b, i, j]
                    g_logk[b, i, j] = gx
                    gu[i] += gx
                    gv[j] += gx
            for t in range(iters, 0, -1):
                for i in range(n):
                    acc = 0.0
                    for j in range(m):
                        q = np.exp(log_k[b, i, j] + u[b, t, i] + v[b, t, j] - log_b[j])
                        g_logk[b, i, j] -= gv[j] * q
                        acc += q * gv[j]
                    gu[i] -= acc
                gv[:] = 0.0
                for i in range(n):
                    gi = gu[i]
                    for j in range(m):
                        rr = np.exp(log_k[b, i, j] + v[b, t - 1, j] + u[b, t, i] - log_a)
                        g_logk[b, i, j] -= gi * rr
                        gv[j] -= rr * gi
                gu[:] = 0.0
        return g_logk


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def gelu(x: np.ndarray):
    """``(gelu(x), gelu'(x))``."""
    if USE_NUMBA:
        return _gelu_nb(np.ascontiguousarray(x))
    return gelu_np(x)


def conv2d_forward(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    if USE_NUMBA:
        return _conv2d_forward_nb(np.ascontiguousarray(x, dtype=np.float64), np.ascontiguousarray(w, dtype=np.float64))
    return conv2d_forward_np(x, w)


def conv2d_backward(x: np.ndarray, w: np.ndarray, gy: np.ndarray):
    if USE_NUMBA:
        return _conv2d_backward_nb(
            np.ascontiguousarray(x, dtype=np.float64),
            np.ascontiguousarray(w, dtype=np.float64),
            np.ascontiguousarray(gy, dtype=np.float64),
        )
    return conv2d_backward_np(x, w, gy)


def sinkhorn_forward(log_k: np.ndarray, iters: int, log_a: float, log_b: np.ndarray):
    """Return ``(u_hist, v_hist, bad_iter)``; ``bad_iter`` is 0 when all finite.

    ``log_a`` is the (uniform) log row mass, ``log_b`` the per-column log mass.
    """
    log_b = np.ascontiguousarray(log_b, dtype=np.float64)
    if USE_NUMBA:
        return _sinkhorn_forward_nb(np.ascontiguousarray(log_k), int(iters), float(log_a), log_b)
    return sinkhorn_forward_np(log_k, iters, log_a, log_b)


def sinkhorn_backward(log_k, u, v, plan, g_plan, log_a: float, log_b: np.ndarray) -> np.ndarray:
    log_b = np.ascontiguousarray(log_b, dtype=np.float64)
    if USE_NUMBA:
        return _sinkhorn_backward_nb(
            np.ascontiguousarray(log_k), u, v, np.ascontiguousarray(plan),
            np.ascontiguousarray(g_plan), float(log_a), log_b,
        )
    return sinkhorn_backward_np(log_k, u, v, plan, g_plan, log_a, log_b)
