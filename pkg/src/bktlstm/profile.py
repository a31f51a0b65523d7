"""Temporal ability profiles.

A student's history is cut into windows of ``window`` attempts. After each
window the cumulative per-skill success rates form a performance vector;
k-means over training students' vectors gives centroids, and every later
window is labelled with its nearest centroid.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataset import Dataset

UNSEEN_RATE = 0.5
INITIAL_LABEL = 1


@dataclass(frozen=True)
class PerformanceVector:
    student_id: str | None
    interval_index: int
    values: np.ndarray


@dataclass(frozen=True, eq=False)
class AbilityModel:
    """Centroids in canonical order (ascending mean component)."""

    centroids: np.ndarray
    objective_history: tuple[float, ...] = ()
    n_iter: int = 0
    converged: bool = True

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def n_labels(self) -> int:
        return self.k + 1


@dataclass(frozen=True)
class AbilityProfile:
    student_id: str | None
    interval_index: int
    label: int


class ClusteringError(ValueError):
    pass


def segment_intervals(n_attempts: int, window: int = 20) -> list[tuple[int, int]]:
    """Half-open ``(start, stop)`` bounds of each window; the last may be partial."""
    if window < 1:
        raise ValueError("window must be >= 1")
    return [(a, min(a + window, n_attempts)) for a in range(0, n_attempts, window)]


def performance_vector(
    skills: Sequence[int],
    correct: Sequence[int],
    n_skills: int,
    student_id: str | None = None,
    interval_index: int = 1,
) -> PerformanceVector:
    """Per-skill success ratio over the given attempts; unseen skills get 0.5."""
    skills = np.asarray(skills, dtype=np.int64)
    correct = np.asarray(correct, dtype=np.float64)
    attempts = np.bincount(skills, minlength=n_skills).astype(np.float64)
    hits = np.bincount(skills, weights=correct, minlength=n_skills)
    values = np.full(n_skills, UNSEEN_RATE)
    seen = attempts > 0
    values[seen] = hits[seen] / attempts[seen]
    return PerformanceVector(student_id, interval_index, values)


def cumulative_vectors(skills: np.ndarray, correct: np.ndarray, n_skills: int, window: int = 20) -> np.ndarray:
    """Row ``z-1`` is the performance vector through interval ``z``."""
    bounds = segment_intervals(len(skills), window)
    out = np.empty((len(bounds), n_skills))
    attempts = np.zeros(n_skills)
    hits = np.zeros(n_skills)
    for z, (a, b) in enumerate(bounds):
        np.add.at(attempts, skills[a:b], 1.0)
        np.add.at(hits, skills[a:b], correct[a:b].astype(np.float64))
        row = np.full(n_skills, UNSEEN_RATE)
        seen = attempts > 0
        row[seen] = hits[seen] / attempts[seen]
        out[z] = row
    return out


def training_vectors(data: Dataset, window: int = 20) -> np.ndarray:
    """Every cumulative (student, interval) vector in ``data``, stacked."""
    rows = [
        cumulative_vectors(data.skill[sl], data.correct[sl], data.n_skills, window)
        for _, sl in data.student_slices()
    ]
    if not rows:
        return np.empty((0, data.n_skills))
    return np.vstack(rows)


def _sq_distances(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    # explicit differences rather than the |x|^2 - 2xc + |c|^2 expansion, so
    # exact ties and zero distances stay exact
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def _canonical_order(C: np.ndarray) -> np.ndarray:
    keys = [C[:, j] for j in range(C.shape[1] - 1, -1, -1)] + [C.mean(axis=1)]
    return np.lexsort(keys)


def fit_kmeans(
    vectors: np.ndarray | Iterable[PerformanceVector],
    k: int = 7,
    seed: int = 42,
    init: str = "random",
    max_iter: int = 100,
) -> AbilityModel:
    """Lloyd's algorithm with seeded initialisation.

    Input rows are sorted lexicographically first, so the result does not
    depend on their order. ``init="random"`` draws ``k`` distinct rows;
    ``init="farthest"`` draws one and then repeatedly adds the row farthest
    from the chosen set. An emptied cluster is moved onto the point that is
    currently worst served by its own centroid.
    """
    X = _as_matrix(vectors)
    if k < 1:
        raise ClusteringError("k must be >= 1")
    X = X[np.lexsort(X.T[::-1])] if len(X) else X
    distinct = np.unique(X, axis=0)
    if len(distinct) < k:
        raise ClusteringError(f"need at least {k} distinct vectors, got {len(distinct)}")
    rng = np.random.default_rng(seed)
    if init == "random":
        C = distinct[np.sort(rng.choice(len(distinct), size=k, replace=False))].copy()
    elif init == "farthest":
        chosen = [int(rng.integers(len(distinct)))]
        d = _sq_distances(distinct, distinct[chosen]).min(axis=1)
        while len(chosen) < k:
            nxt = int(np.argmax(d))
            chosen.append(nxt)
            d = np.minimum(d, _sq_distances(distinct, distinct[[nxt]])[:, 0])
        C = distinct[chosen].copy()
    else:
        raise ValueError(f"unknown init {init!r}")

    labels = None
    history: list[float] = []
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        D = _sq_distances(X, C)
        new_labels = np.argmin(D, axis=1)
        history.append(float(D[np.arange(len(X)), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            converged = True
            break
        labels = new_labels
        point_cost = D[np.arange(len(X)), labels]
        for j in range(k):
            members = labels == j
            if members.any():
                C[j] = X[members].mean(axis=0)
            else:
                far = int(np.argmax(point_cost))
                C[j] = X[far]
                point_cost[far] = 0.0
    C = C[_canonical_order(C)]
    return AbilityModel(centroids=C, objective_history=tuple(history), n_iter=n_iter, converged=converged)


def _as_matrix(vectors) -> np.ndarray:
    if isinstance(vectors, np.ndarray):
        return np.asarray(vectors, dtype=np.float64)
    rows = [v.values if isinstance(v, PerformanceVector) else v for v in vectors]
    return np.asarray(rows, dtype=np.float64)


def nearest_labels(model: AbilityModel, X: np.ndarray) -> np.ndarray:
    """Profile labels (2..k+1) for each row; ties go to the lower label."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.centroids.shape[1]:
        raise ClusteringError(f"vector length {X.shape[1]} != centroid length {model.centroids.shape[1]}")
    return np.argmin(_sq_distances(X, model.centroids), axis=1) + INITIAL_LABEL + 1


def assign_profile(model: AbilityModel, vector: PerformanceVector) -> AbilityProfile:
    label = int(nearest_labels(model, vector.values)[0])
    return AbilityProfile(vector.student_id, vector.interval_index, label)


def profile_sequence(data: Dataset, model: AbilityModel, window: int = 20) -> np.ndarray:
    """Ability label of every record in ``data``.

    Interval 1 is labelled 1; interval ``z >= 2`` carries the label of the
    cumulative vector through interval ``z - 1``.
    """
    labels = np.full(data.n_records, INITIAL_LABEL, dtype=np.int64)
    for _, sl in data.student_slices():
        n = sl.stop - sl.start
        if n <= window:
            continue
        vecs = cumulative_vectors(data.skill[sl], data.correct[sl], data.n_skills, window)
        assigned = nearest_labels(model, vecs[:-1])
        for z, (a, b) in enumerate(segment_intervals(n, window)[1:]):
            labels[sl.start + a : sl.start + b] = assigned[z]
    return labels


def profile_rows(data: Dataset, model: AbilityModel, window: int = 20) -> list[AbilityProfile]:
    """One :class:`AbilityProfile` per (student, interval)."""
    labels = profile_sequence(data, model, window)
    rows = []
    for sid, sl in data.student_slices():
        for z, (a, _) in enumerate(segment_intervals(sl.stop - sl.start, window), start=1):
            rows.append(AbilityProfile(sid, z, int(labels[sl.start + a])))
    return rows


def save_centroids(model: AbilityModel, skill_ids: Sequence[str], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["label", *skill_ids])
        for j, row in enumerate(model.centroids):
            w.writerow([j + INITIAL_LABEL + 1, *(f"{v:.17g}" for v in row)])


def load_centroids(path: str | Path) -> AbilityModel:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))[1:]
    return AbilityModel(centroids=np.array([[float(v) for v in r[1:]] for r in rows]))


def save_profiles(rows: Iterable[AbilityProfile], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["student_id", "interval_index", "label"])
        for p in rows:
            w.writerow([p.student_id, p.interval_index, p.label])
