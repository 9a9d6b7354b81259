#!/usr/bin/env python3
"""Benchmark the numba-jitted kernels against the pure-numpy fallbacks.

Run twice to compare end-to-end import-time selection:

    python3 benchmarks/bench_kernels.py
    GEOVLM_DISABLE_NUMBA=1 python3 benchmarks/bench_kernels.py

Within one run, both implementations are timed directly when numba is
available (the fallback is always importable).
"""

import time

import numpy as np

from georank import kernels


def timeit(fn, *args, repeat=20):
    fn(*args)  # warm-up (JIT compilation on the numba path)
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - start)
    return best


def bench(name, np_fn, nb_fn, *args):
    t_np = timeit(np_fn, *args)
    if nb_fn is None:
        print(f"{name:28s} numpy {t_np * 1e3:8.3f} ms   (numba path disabled)")
        return
    t_nb = timeit(nb_fn, *args)
    faster = "numba" if t_nb < t_np else "numpy"
    ratio = max(t_np, t_nb) / max(min(t_np, t_nb), 1e-12)
    print(f"{name:28s} numpy {t_np * 1e3:8.3f} ms   numba {t_nb * 1e3:8.3f} ms   {faster} {ratio:4.1f}x")


def main():
    print(f"numba path enabled: {kernels.NUMBA_ENABLED}")
    rng = np.random.default_rng(0)

    refs = rng.standard_normal((100_000, 64)).astype(np.float32)
    query = rng.standard_normal(64).astype(np.float32)
    bench(
        "cosine_scores 100k x 64",
        kernels._cosine_scores_np,
        kernels._cosine_scores_nb if kernels.NUMBA_ENABLED else None,
        query,
        refs,
    )

    scores = rng.standard_normal(1_000_000)
    tie = rng.permutation(1_000_000).astype(np.int64)
    bench(
        "top_indices 1M, k=10",
        lambda s, t: kernels._top_indices_np(s, t, 10),
        (lambda s, t: kernels._top_indices_nb(s, t, 10)) if kernels.NUMBA_ENABLED else None,
        scores,
        tie,
    )

    lat1, lon1 = rng.uniform(-90, 90, 1_000_000), rng.uniform(-180, 180, 1_000_000)
    lat2, lon2 = rng.uniform(-90, 90, 1_000_000), rng.uniform(-180, 180, 1_000_000)
    bench(
        "haversine_km 1M pairs",
        lambda: kernels._haversine_km_np(lat1, lon1, lat2, lon2, 6371.0),
        (lambda: kernels._haversine_km_nb(lat1, lon1, lat2, lon2, 6371.0)) if kernels.NUMBA_ENABLED else None,
    )


if __name__ == "__main__":
    main()
