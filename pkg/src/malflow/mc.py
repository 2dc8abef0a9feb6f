"""Monte Carlo aggregation with an order-insensitive summation contract.

Per-path quantities are computed chunk by chunk (possibly on several worker
threads) and concatenated in path-index order; means and variances are then
formed with ``math.fsum``, which is exactly rounded and therefore independent
of how the work was split.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

DEFAULT_CHUNK = 8192


def worker_count(workers: int | None = None) -> int:
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get("MALFLOW_THREADS")
    if env:
        return max(1, int(env))
    return 1


@dataclass(frozen=True)
class Estimate:
    mean: float
    se: float
    n: int


def fsum_mean(values) -> float:
    values = np.asarray(values, dtype=float).ravel()
    return math.fsum(values) / values.size


def mean_se(values) -> Estimate:
    """Sample mean and its standard error, reduction order-insensitive."""
    values = np.asarray(values, dtype=float).ravel()
    n = values.size
    if n == 0:
        raise ValueError("no samples")
    m = math.fsum(values) / n
    if n == 1:
        return Estimate(m, 0.0, 1)
    var = math.fsum((values - m) ** 2) / (n - 1)
    return Estimate(m, math.sqrt(var / n), n)


def column_mean_se(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column-wise :func:`mean_se` for a (n_paths, k) array."""
    values = np.asarray(values, dtype=float)
    est = [mean_se(values[:, j]) for j in range(values.shape[1])]
    return np.array([e.mean for e in est]), np.array([e.se for e in est])


def map_paths(fn, n_paths: int, chunk: int = DEFAULT_CHUNK, workers: int | None = None) -> np.ndarray:
    """Evaluate ``fn(start, count)`` over path chunks; concatenate in index order.

    ``fn`` must return an array whose first axis has length ``count`` and whose
    rows depend only on the absolute path index.
    """
    starts = list(range(0, n_paths, chunk))
    jobs = [(s, min(chunk, n_paths - s)) for s in starts]
    w = worker_count(workers)
    if w == 1 or len(jobs) == 1:
        parts = [fn(s, c) for s, c in jobs]
    else:
        with ThreadPoolExecutor(max_workers=w) as pool:
            parts = list(pool.map(lambda job: fn(*job), jobs))
    return np.concatenate(parts, axis=0)
