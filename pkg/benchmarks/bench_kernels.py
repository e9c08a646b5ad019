"""Benchmark the jitted kernels against the pure-numpy fallback.

Run as: python3 benchmarks/bench_kernels.py [--repeats N]
The numba path is whatever habit.kernels picked at import time, so set
HABIT_BACKEND=numpy to time the fallback alone.
"""
import argparse
import time

import numpy as np

from habit import kernels
from habit.features import normalize_rows


def bench_mk(fn, mats, tau, repeats):
    # warm once so jit compilation stays out of the timing
    fn(mats[0][0], mats[0][1], tau)
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        acc = 0.0
        for fc, ft in mats:
            acc += fn(fc, ft, tau)
        best = min(best, time.perf_counter() - t0)
    return best, acc


def bench_dbscan(fn, vals, eps, min_pts, repeats):
    fn(vals[0], eps, min_pts)
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        n_noise = 0
        for v in vals:
            n_noise += int(np.sum(fn(v, eps, min_pts)))
        best = min(best, time.perf_counter() - t0)
    return best, n_noise


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--n-mk", type=int, default=2000)
    ap.add_argument("--n-dbscan", type=int, default=2000)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    mats = [
        (normalize_rows(rng.standard_normal((8, 32))),
         normalize_rows(rng.standard_normal((8, 32))))
        for _ in range(args.n_mk)
    ]
    vals = [np.ascontiguousarray(rng.uniform(0, 1, size=64)) for _ in range(args.n_dbscan)]

    print(f"numba available/selected: {kernels.USE_NUMBA}")
    sel = "njit" if kernels.USE_NUMBA else "fallback"
    rows = []
    t, acc = bench_mk(kernels.mutual_knowledge_core, mats, 0.1, args.repeats)
    rows.append(("mutual_knowledge", sel, t, acc))
    t, acc2 = bench_mk(kernels._mutual_knowledge_numpy, mats, 0.1, args.repeats)
    rows.append(("mutual_knowledge", "numpy ref", t, acc2))
    assert abs(acc - acc2) < 1e-9 * len(mats)

    t, nn = bench_dbscan(kernels.dbscan_noise_flags, vals, 0.02, 4, args.repeats)
    rows.append(("dbscan_1d", sel, t, nn))
    t, nn2 = bench_dbscan(kernels._dbscan_noise_loops, vals, 0.02, 4, args.repeats)
    rows.append(("dbscan_1d", "python loops", t, nn2))
    assert nn == nn2

    print(f"{'kernel':<18} {'path':<14} {'best of ' + str(args.repeats):>12}")
    for name, path, t, _ in rows:
        print(f"{name:<18} {path:<14} {t * 1e3:>10.2f}ms")


if __name__ == "__main__":
    main()
