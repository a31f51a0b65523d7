"""AUC, RMSE and squared Pearson correlation.

Undefined metrics (single-class AUC, zero-variance r^2) come back as None.
"""

from __future__ import annotations

import math

import numpy as np


def _arrays(predicted, actual):
    p = np.asarray(predicted, dtype=np.float64).ravel()
    y = np.asarray(actual, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise ValueError("predicted and actual differ in length")
    return p, y


def auc(predicted, actual) -> float | None:
    """Mann-Whitney AUC with tied scores sharing their average rank."""
    p, y = _arrays(predicted, actual)
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(p, kind="mergesort")
    sp = p[order]
    ranks = np.empty(len(p))
    # average 1-based rank within each run of equal scores
    edges = np.flatnonzero(np.r_[True, sp[1:] != sp[:-1], True])
    for a, b in zip(edges[:-1], edges[1:]):
        ranks[order[a:b]] = 0.5 * (a + 1 + b)
    # rank sums are multiples of 0.5; keeping them doubled keeps the count exact
    u2 = 2.0 * ranks[pos].sum() - n_pos * (n_pos + 1)
    return u2 / (2.0 * n_pos * n_neg)


def rmse(predicted, actual) -> float:
    p, y = _arrays(predicted, actual)
    if p.size == 0:
        raise ValueError("rmse of an empty set")
    return math.sqrt(float(np.mean((p - y) ** 2)))


def r_squared(predicted, actual) -> float | None:
    p, y = _arrays(predicted, actual)
    if p.size < 2:
        return None
    dp = p - p.mean()
    dy = y - y.mean()
    sp, sy = float((dp * dp).sum()), float((dy * dy).sum())
    if sp == 0.0 or sy == 0.0:
        return None
    r = float((dp * dy).sum()) / math.sqrt(sp * sy)
    return min(r * r, 1.0)
