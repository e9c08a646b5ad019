"""Hot numeric kernels with a numba-compiled fast path.

The loop kernels are JIT-compiled when numba is importable. Setting the
environment variable ``HABIT_BACKEND=numpy`` (before import) forces the
pure-numpy fallbacks instead; ``benchmarks/bench_kernels.py`` compares the
two. Both paths implement identical math; results agree to float64
round-off (summation order differs).
"""

from __future__ import annotations

import os

import numpy as np

_want_numba = os.environ.get("HABIT_BACKEND", "numba").strip().lower() != "numpy"
try:
    from numba import njit

    _HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAS_NUMBA = False

USE_NUMBA = _want_numba and _HAS_NUMBA


def _mutual_knowledge_loops(fc, ft, tau):
    # softmax over all Qc*Qt token dot products, then MI of that joint
    # against its own marginals. Sequential sums keep the jitted and
    # interpreted paths bit-identical.
    qc, d = fc.shape
    qt = ft.shape[0]
    logits = np.empty((qc, qt))
    hi = -1e300
    for i in range(qc):
        for j in range(qt):
            acc = 0.0
            for k in range(d):
                acc += fc[i, k] * ft[j, k]
            v = acc / tau
            logits[i, j] = v
            if v > hi:
                hi = v
    total = 0.0
    for i in range(qc):
        for j in range(qt):
            logits[i, j] = np.exp(logits[i, j] - hi)
            total += logits[i, j]
    p = logits / total
    prow = np.zeros(qc)
    pcol = np.zeros(qt)
    for i in range(qc):
        for j in range(qt):
            prow[i] += p[i, j]
            pcol[j] += p[i, j]
    mk = 0.0
    for i in range(qc):
        for j in range(qt):
            mk += p[i, j] * np.log(p[i, j] / (prow[i] * pcol[j]))
    if mk < 0.0:
        mk = 0.0
    return mk


def _mutual_knowledge_numpy(fc, ft, tau):
    logits = (fc @ ft.T) / tau
    p = np.exp(logits - logits.max())
    p /= p.sum()
    prow = p.sum(axis=1)
    pcol = p.sum(axis=0)
    mk = float(np.sum(p * np.log(p / (prow[:, None] * pcol[None, :]))))
    return mk if mk > 0.0 else 0.0


def _dbscan_noise_loops(values, eps, min_pts):
    # Textbook DBSCAN on 1-D points; |x-y| <= eps neighborhoods include the
    # point itself. Returns 1 at noise positions (neither core nor
    # density-reachable from a core).
    n = values.shape[0]
    counts = np.zeros(n, dtype=np.int64)
    for i in range(n):
        c = 0
        for j in range(n):
            if abs(values[i] - values[j]) <= eps:
                c += 1
        counts[i] = c
    core = counts >= min_pts
    labels = np.full(n, -1, dtype=np.int64)
    stack = np.empty(n, dtype=np.int64)
    cluster = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = cluster
        top = 0
        stack[top] = i
        top += 1
        while top > 0:
            top -= 1
            cur = stack[top]
            for j in range(n):
                if labels[j] == -1 and abs(values[cur] - values[j]) <= eps:
                    labels[j] = cluster
                    if core[j]:
                        stack[top] = j
                        top += 1
        cluster += 1
    noise = np.zeros(n, dtype=np.int64)
    for i in range(n):
        if labels[i] == -1:
            noise[i] = 1
    return noise


if USE_NUMBA:
    mutual_knowledge_core = njit(cache=True)(_mutual_knowledge_loops)
    dbscan_noise_flags = njit(cache=True)(_dbscan_noise_loops)
else:
    mutual_knowledge_core = _mutual_knowledge_numpy
    dbscan_noise_flags = _dbscan_noise_loops
