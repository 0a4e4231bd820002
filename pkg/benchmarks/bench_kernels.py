"""Time the numba kernels against their numpy twins at toy-model shapes.

    python3 benchmarks/bench_kernels.py [--repeat N]

Both variants are called directly, so ``REGAGG_NUMBA`` does not matter here.
Prints one line per kernel: shape, numpy ms, numba ms, speed-up.
"""

from __future__ import annotations

import argparse
import math
import time

import numpy as np

from regagg.numerics import kernels as K


def timeit(fn, repeat: int) -> float:
    fn()  # warm-up (and JIT compile)
    best = math.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def cases(rng):
    # adapter convolutions: batch 64 on the 8x8 patch grid
    for cin, cout, k in ((32, 16, 1), (16, 6, 1), (16, 5, 3), (16, 5, 5), (16, 32, 1)):
        x = rng.normal(size=(64, cin, 8, 8))
        w = rng.normal(size=(cout, cin, k, k))
        gy = rng.normal(size=(64, cout, 8, 8))
        yield (
            f"conv2d fwd+bwd {cin}->{cout} k={k}",
            lambda x=x, w=w, gy=gy: (K.conv2d_forward_np(x, w), K.conv2d_backward_np(x, w, gy)),
            lambda x=x, w=w, gy=gy: (K._conv2d_forward_nb(x, w), K._conv2d_backward_nb(x, w, gy)),
        )
    # sinkhorn: toy (64 patches x 8 clusters) and paper-sized (256 x 64)
    for bsz, n, m, iters in ((64, 64, 8, 3), (4, 256, 64, 3), (1, 256, 64, 100)):
        log_k = rng.uniform(-5, 5, size=(bsz, n, m))
        log_a, log_b = -math.log(n), np.full(m, -math.log(m))
        u, v, _ = K.sinkhorn_forward_np(log_k, iters, log_a, log_b)
        plan = np.exp(log_k + u[:, -1, :, None] + v[:, -1, None, :])
        g = rng.normal(size=plan.shape)
        yield (
            f"sinkhorn fwd+bwd B={bsz} {n}x{m} T={iters}",
            lambda: (K.sinkhorn_forward_np(log_k, iters, log_a, log_b),
                     K.sinkhorn_backward_np(log_k, u, v, plan, g, log_a, log_b)),
            lambda: (K._sinkhorn_forward_nb(log_k, iters, log_a, log_b),
                     K._sinkhorn_backward_nb(log_k, u, v, plan, g, log_a, log_b)),
        )
    x = rng.normal(size=(64, 65, 256))
    yield "gelu 64x65x256", lambda: K.gelu_np(x), lambda: K._gelu_nb(x)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':44s} {'numpy ms':>10s} {'numba ms':>10s} {'speed-up':>9s}")
    for name, np_fn, nb_fn in cases(rng):
        t_np, t_nb = timeit(np_fn, args.repeat), timeit(nb_fn, args.repeat)
        print(f"{name:44s} {t_np:10.2f} {t_nb:10.2f} {t_np / t_nb:8.2f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
