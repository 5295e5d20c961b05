#!/usr/bin/env python3
"""Time the numba kernels against their pure-numpy fallbacks.

Shapes mirror a default training run (batch 128, embedding dim 16, bank 512,
label dumps over 2000 pairs). The numba path is warmed once before timing so
JIT compilation is excluded. Run as ``python benchmarks/bench_kernels.py``.
"""

import time

import numpy as np

from repair import kernels


def _time(fn, args, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    numba_impls = kernels._build_numba_impls()
    if numba_impls is None:
        print("numba unavailable; nothing to compare")
        return

    rng = np.random.default_rng(0)
    batch, dim, bank, dump = 128, 16, 512, 2000
    u = rng.standard_normal((batch, dim))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v = rng.standard_normal((batch, dim))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    margins = rng.uniform(0.0, 0.2, batch)
    d_img = rng.uniform(0.0, 2.0, (dump, bank))
    d_txt = rng.uniform(0.0, 2.0, (dump, bank))

    cases = [
        ("warmup_pair_losses", (u, v, 0.2), 50),
        ("warmup_loss_grads", (u, v, 0.2), 50),
        ("triplet_loss_grads", (u, v, margins), 50),
        ("spearman_batch", (d_img, d_txt), 5),
    ]

    print(f"{'kernel':22s} {'numpy':>10s} {'numba':>10s} {'speedup':>8s}")
    for name, args, repeats in cases:
        numba_fn = numba_impls[name]
        numba_fn(*args)  # warm the JIT
        t_np = _time(getattr(kernels, name + "_np"), args, repeats)
        t_nb = _time(numba_fn, args, repeats)
        print(f"{name:22s} {t_np * 1e3:8.2f}ms {t_nb * 1e3:8.2f}ms "
              f"{t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
