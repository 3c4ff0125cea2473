"""Distance-based and random retrieval baselines."""

from __future__ import annotations

import math
import random
from collections.abc import Sequence

import numpy as np

from .errors import DomainError
from .features import SIGNAL_COLUMNS
from .sequences import Candidate, Query


def dtw_distance(x, y) -> float:
    """Square root of the minimal summed squared cost over warping paths."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size == 0 or y.size == 0:
        raise DomainError("DTW needs non-empty sequences")
    n, m = x.size, y.size
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = (x[i - 1] - y[j - 1]) ** 2
            acc[i, j] = cost + min(acc[i - 1, j], acc[i, j - 1], acc[i - 1, j - 1])
    return math.sqrt(acc[n, m])


def dtw_to_many(x, ys: np.ndarray) -> np.ndarray:
    """DTW distance from ``x`` to each row of ``ys``, vectorised over rows."""
    x = np.asarray(x, dtype=float)
    ys = np.asarray(ys, dtype=float)
    n, m = x.size, ys.shape[1]
    prev = np.full((m + 1, ys.shape[0]), np.inf)
    prev[0] = 0.0
    for i in range(n):
        cur = np.full_like(prev, np.inf)
        for j in range(1, m + 1):
            cost = (x[i] - ys[:, j - 1]) ** 2
            cur[j] = cost + np.minimum(np.minimum(prev[j], cur[j - 1]), prev[j - 1])
        prev = cur
    return np.sqrt(prev[m])


def rank_by_distance(candidates: Sequence[Candidate], dist: np.ndarray, k: int) -> list[tuple[Candidate, float]]:
    """The ``k`` smallest distances, ties broken by (date, stock, indicator)."""
    n = len(candidates)
    if n == 0 or k <= 0:
        return []
    if k < n:
        cutoff = np.partition(dist, k - 1)[k - 1]
        pool = np.flatnonzero(dist <= cutoff)
    else:
        pool = np.arange(n)
    ranked = sorted(pool, key=lambda i: (dist[i], *candidates[i].sort_key))
    return [(candidates[i], float(dist[i])) for i in ranked[:k]]


def retrieve_dtw(query: Query, candidates: Sequence[Candidate], k: int) -> list[tuple[Candidate, float]]:
    """Nearest numeric candidates by DTW between raw value windows.

    Symbolic-signal candidates are skipped.
    """
    numeric = [c for c in candidates if c.indicator not in SIGNAL_COLUMNS]
    if not numeric or k <= 0:
        return []
    dist = dtw_to_many(query.adjusted_close_list, np.array([c.value_list for c in numeric], dtype=float))
    return rank_by_distance(numeric, dist, k)


def retrieve_random(query: Query, candidates: Sequence[Candidate], k: int, seed) -> list[Candidate]:
    """Uniform sample without replacement; the whole pool when ``k`` exceeds it."""
    if k <= 0:
        return []
    rng = random.Random(seed)
    return rng.sample(list(candidates), min(k, len(candidates)))
