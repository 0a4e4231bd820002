"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad

H = 1e-5
# denominators below REL_FLOOR * max(1, |f|) are raised to it, so coordinates
# whose true gradient is ~0 are judged on absolute error.  Scaling with |f|
# keeps the measure unit-free: central-difference roundoff grows like
# eps * |f| / h, and a fixed floor would fail exact zeros on large losses.
REL_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grad(f: Callable[[], Tensor], t: Tensor, h: float = H, coords=None) -> np.ndarray:
    """d f() / d t by central differences; ``coords`` limits flat indices."""
    flat = t.data.reshape(-1)
    out = np.zeros_like(flat)
    idx = range(flat.size) if coords is None else coords
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            out[i] = (fp - fm) / (2 * h)
    return out.reshape(t.shape)


def check_grads(
    f: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = H, max_coords: int | None = None, rng=None
) -> float:
    """Max relative error between autodiff and finite differences over ``tensors``.

    ``f`` must be a deterministic closure producing a scalar.  When
    ``max_coords`` is set, a random subset of coordinates per tensor is checked.
    """
    for t in tensors:
        t.grad = None
    loss = f()
    floor = REL_FLOOR * max(1.0, abs(loss.item()))
    backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        coords = None
        if max_coords is not None and t.size > max_coords:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = gen.choice(t.size, size=max_coords, replace=False)
        numeric = numeric_grad(f, t, h, coords)
        a = analytic.reshape(-1)
        n = numeric.reshape(-1)
        if coords is not None:
            a, n = a[coords], n[coords]
        if a.size:
            worst = max(worst, float(relative_error(a, n, floor).max()))
    return worst
