"""Balanced two-way clustering and the hierarchical partitioner built on it."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .core import InvalidArgumentError, sq_distances


class SplitResult(NamedTuple):
    centroid1: np.ndarray
    members1: np.ndarray
    centroid2: np.ndarray
    members2: np.ndarray


def balance_slack(n: int) -> int:
    return max(1, int(0.1 * n))


def _assign(X, ids, c1, c2, lo, hi):
    """Best split for fixed centroids with cluster-1 size clamped to [lo, hi].

    Sorting by d1 - d2 and cutting at m gives the optimal assignment for a
    fixed size m, so clamping the unconstrained size is the balanced optimum.
    """
    diff = sq_distances(X, c1) - sq_distances(X, c2)
    order = np.lexsort((ids, diff))
    m = int(np.count_nonzero(diff < 0) + np.count_nonzero(diff == 0) // 2)
    m = min(max(m, lo), hi)
    mask = np.zeros(len(X), dtype=bool)
    mask[order[:m]] = True
    return mask


def balanced_split(ids, vectors, max_iter: int = 25) -> SplitResult:
    """Split points into two clusters whose sizes differ by at most ``balance_slack``.

    Deterministic: seeds are the point farthest from the mean and the point
    farthest from that one (ties to the lower id), then Lloyd iterations with
    the size-constrained assignment step. Returns the member *positions*.
    """
    ids = np.asarray(ids, dtype=np.uint64)
    X = np.asarray(vectors, dtype=np.float64)
    n = len(X)
    if n < 2:
        raise InvalidArgumentError("balanced_split needs at least two entries")
    slack = balance_slack(n)
    lo = max(1, -(-(n - slack) // 2))
    hi = min(n - 1, (n + slack) // 2)

    mean = X.mean(axis=0)
    d = sq_distances(X, mean)
    s1 = np.lexsort((ids, -d))[0]
    d = sq_distances(X, X[s1])
    s2 = np.lexsort((ids, -d))[0]
    if s2 == s1:
        s2 = next(i for i in np.argsort(ids, kind="stable") if i != s1)
    c1, c2 = X[s1].copy(), X[s2].copy()

    mask = None
    for _ in range(max_iter):
        new = _assign(X, ids, c1, c2, lo, hi)
        if mask is not None and np.array_equal(new, mask):
            break
        mask = new
        c1 = X[mask].mean(axis=0)
        c2 = X[~mask].mean(axis=0)
    return SplitResult(c1, np.flatnonzero(mask), c2, np.flatnonzero(~mask))


def hierarchical_partition(ids, vectors, max_size: int) -> list[np.ndarray]:
    """Recursively bisect until every part has at most ``max_size`` points.

    Returns a list of position arrays, one per leaf, in depth-first order.
    """
    ids = np.asarray(ids, dtype=np.uint64)
    X = np.asarray(vectors, dtype=np.float64)
    leaves = []
    stack = [np.arange(len(X))]
    while stack:
        pos = stack.pop()
        if len(pos) <= max_size:
            leaves.append(pos)
            continue
        res = balanced_split(ids[pos], X[pos])
        stack.append(pos[res.members2])
        stack.append(pos[res.members1])
    return leaves
