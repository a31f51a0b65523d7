"""Per-skill Bayesian Knowledge Tracing.

Scalar update rules, sequence tracing, exhaustive grid fitting and the
mastery feature P(L_{t-1}) that feeds the recurrent predictor.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numba
import numpy as np

from .dataset import Dataset

PROB_FLOOR = 1e-9


class NumericalDegeneracyWarning(RuntimeWarning):
    """A posterior update hit a zero denominator and kept its prior."""


@dataclass(frozen=True)
class BktParams:
    l0: float
    t: float
    g: float
    s: float

    def __post_init__(self):
        for name in ("l0", "t", "g", "s"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} is not a probability")


FALLBACK_PARAMS = BktParams(l0=0.5, t=0.1, g=0.2, s=0.1)


@dataclass(frozen=True)
class SkillModel:
    skill: int
    params: BktParams
    train_log_likelihood: float
    fallback: bool = False


@dataclass(frozen=True)
class MasteryTrace:
    student_id: str | None
    skill: int
    masteries: tuple[float, ...]


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned parameter grid with guess/slip caps.

    Every axis runs from ``lo`` to ``hi`` in ``step`` increments; guess and
    slip are additionally truncated at ``g_max`` / ``s_max``. Values must lie
    strictly inside (0, 1).
    """

    step: float = 0.05
    lo: float = 0.05
    hi: float = 0.95
    g_max: float = 0.30
    s_max: float = 0.30

    def axis(self, cap: float | None = None) -> np.ndarray:
        n = int(round((self.hi - self.lo) / self.step))
        values = np.round(self.lo + self.step * np.arange(n + 1), 10)
        if cap is not None:
            values = values[values <= cap + 1e-12]
        if values.size == 0 or values[0] <= 0.0 or values[-1] >= 1.0:
            raise ValueError("grid values must lie strictly inside (0, 1)")
        return values

    def points(self) -> np.ndarray:
        """All grid points as rows ``(l0, t, g, s)``, ordered by (g, s, t, l0)."""
        g, s, t, l0 = np.meshgrid(
            self.axis(self.g_max), self.axis(self.s_max), self.axis(), self.axis(), indexing="ij"
        )
        return np.column_stack([l0.ravel(), t.ravel(), g.ravel(), s.ravel()])


# --- update rules ------------------------------------------------------------


def posterior_update(params: BktParams, prior: float, outcome: int) -> float:
    if outcome:
        num = prior * (1.0 - params.s)
        den = num + (1.0 - prior) * params.g
    else:
        num = prior * params.s
        den = num + (1.0 - prior) * (1.0 - params.g)
    if den == 0.0:
        warnings.warn("zero evidence denominator; prior kept", NumericalDegeneracyWarning, stacklevel=2)
        return prior
    return min(max(num / den, 0.0), 1.0)


def learn_step(params: BktParams, posterior: float) -> float:
    return min(posterior + (1.0 - posterior) * params.t, 1.0)


def predict_correct(params: BktParams, prior: float) -> float:
    return prior * (1.0 - params.s) + (1.0 - prior) * params.g


def run_sequence(
    params: BktParams, outcomes: Sequence[int], student_id: str | None = None, skill: int = 0
) -> tuple[MasteryTrace, list[float]]:
    """Trace one student's attempts on one skill.

    ``masteries[i]`` is the belief entering attempt ``i`` and
    ``predicted[i]`` the corresponding probability of a correct answer.
    """
    if len(outcomes) == 0:
        raise ValueError("run_sequence needs at least one outcome")
    m = params.l0
    masteries, predicted = [], []
    for r in outcomes:
        masteries.append(m)
        predicted.append(predict_correct(params, m))
        m = learn_step(params, posterior_update(params, m, int(r)))
    return MasteryTrace(student_id, skill, tuple(masteries)), predicted


def sequence_log_likelihood(params: BktParams, sequences: Iterable[Sequence[int]]) -> float:
    """Bernoulli log-likelihood of the step-wise correctness predictions."""
    total = 0.0
    for seq in sequences:
        if len(seq) == 0:
            continue
        _, predicted = run_sequence(params, seq)
        for r, p in zip(seq, predicted):
            p = min(max(p, PROB_FLOOR), 1.0 - PROB_FLOOR)
            total += math.log(p if r else 1.0 - p)
    return total


# --- grid fitting ------------------------------------------------------------

_RENORM_EVERY = 16


@numba.njit(cache=True)
def _grid_log_likelihood(l0, t, g, s, obs, offsets, weights):  # pragma: no cover - compiled
    # Two-state forward pass with unnormalised (known, unknown) mass; the
    # sequence likelihood equals the product of the step predictions.
    n_grid = l0.shape[0]
    out = np.zeros(n_grid)
    ek1 = 1.0 - s
    eu1 = g.copy()
    ek0 = s.copy()
    eu0 = 1.0 - g
    stay = 1.0 - t
    ak = np.empty(n_grid)
    au = np.empty(n_grid)
    acc = np.empty(n_grid)
    for q in range(offsets.shape[0] - 1):
        for k in range(n_grid):
            ak[k] = l0[k]
            au[k] = 1.0 - l0[k]
            acc[k] = 0.0
        j = 0
        for i in range(offsets[q], offsets[q + 1]):
            if obs[i]:
                for k in range(n_grid):
                    a = ak[k] * ek1[k]
                    u = au[k] * eu1[k]
                    ak[k] = a + u * t[k]
                    au[k] = u * stay[k]
            else:
                for k in range(n_grid):
                    a = ak[k] * ek0[k]
                    u = au[k] * eu0[k]
                    ak[k] = a + u * t[k]
                    au[k] = u * stay[k]
            j += 1
            if j == _RENORM_EVERY:
                j = 0
                for k in range(n_grid):
                    z = ak[k] + au[k]
                    acc[k] += np.log(z)
                    ak[k] /= z
                    au[k] /= z
        w = weights[q]
        for k in range(n_grid):
            out[k] += w * (acc[k] + np.log(ak[k] + au[k]))
    return out


def _pack_sequences(sequences: Iterable[Sequence[int]]):
    counts: dict[tuple[int, ...], int] = {}
    for seq in sequences:
        key = tuple(int(r) for r in seq)
        if key:
            counts[key] = counts.get(key, 0) + 1
    if not counts:
        return None
    keys = sorted(counts)
    offsets = np.zeros(len(keys) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(k) for k in keys])
    obs = np.fromiter((r for k in keys for r in k), dtype=np.int8, count=int(offsets[-1]))
    weights = np.array([counts[k] for k in keys], dtype=np.float64)
    return obs, offsets, weights


def grid_log_likelihoods(sequences: Iterable[Sequence[int]], grid: GridSpec | None = None):
    """Log-likelihood at every grid point; returns ``(points, values)``."""
    grid = grid or GridSpec()
    packed = _pack_sequences(sequences)
    if packed is None:
        raise ValueError("all sequences are empty")
    pts = grid.points()
    values = _grid_log_likelihood(
        np.ascontiguousarray(pts[:, 0]),
        np.ascontiguousarray(pts[:, 1]),
        np.ascontiguousarray(pts[:, 2]),
        np.ascontiguousarray(pts[:, 3]),
        *packed,
    )
    return pts, values


def fit_skill(sequences: Sequence[Sequence[int]], grid: GridSpec | None = None, skill: int = 0) -> SkillModel:
    """Exhaustive maximum-likelihood search over ``grid``.

    Grid points are enumerated in (g, s, t, l0) order, so the first maximum
    is the one with the smallest guess, then slip, then transition, then
    prior. The reported likelihood is recomputed with the scalar rules.
    """
    sequences = [list(s) for s in sequences]
    pts, values = grid_log_likelihoods(sequences, grid)
    best = pts[int(np.argmax(values))]
    params = BktParams(*(float(v) for v in best))
    return SkillModel(skill, params, sequence_log_likelihood(params, sequences))


def skill_sequences(data: Dataset) -> dict[int, list[list[int]]]:
    """Per-skill outcome sequences, one per (student, skill) pair."""
    out: dict[int, list[list[int]]] = {}
    for _, sl in data.student_slices():
        per_skill: dict[int, list[int]] = {}
        for k, r in zip(data.skill[sl].tolist(), data.correct[sl].tolist()):
            per_skill.setdefault(k, []).append(r)
        for k, seq in per_skill.items():
            out.setdefault(k, []).append(seq)
    return out


def fit_skills(data: Dataset, grid: GridSpec | None = None, n_jobs: int = 1) -> dict[int, SkillModel]:
    """Fit one model per skill present in ``data``; skills are independent."""
    seqs = skill_sequences(data)
    skills = sorted(seqs)
    if n_jobs == 1:
        fitted = [fit_skill(seqs[k], grid, skill=k) for k in skills]
    else:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            fitted = list(pool.map(lambda k: fit_skill(seqs[k], grid, skill=k), skills))
    return {m.skill: m for m in fitted}


def complete_models(models: Mapping[int, SkillModel], n_skills: int) -> dict[int, SkillModel]:
    """Fill skills without a fitted model with the fallback parameters."""
    full = dict(models)
    for k in range(n_skills):
        if k not in full:
            full[k] = SkillModel(k, FALLBACK_PARAMS, 0.0, fallback=True)
    return full


def trace_dataset(data: Dataset, models: Mapping[int, SkillModel]) -> tuple[np.ndarray, np.ndarray]:
    """Mastery entering each record and the matching correctness prediction.

    Each skill's belief advances only on that skill's own attempts. Skills
    absent from ``models`` use :data:`FALLBACK_PARAMS`.
    """
    mastery = np.empty(data.n_records)
    predicted = np.empty(data.n_records)
    params = {k: m.params for k, m in models.items()}
    skills = data.skill.tolist()
    correct = data.correct.tolist()
    for _, sl in data.student_slices():
        belief: dict[int, float] = {}
        for i in range(sl.start, sl.stop):
            k = skills[i]
            p = params.get(k, FALLBACK_PARAMS)
            m = belief.get(k, p.l0)
            mastery[i] = m
            predicted[i] = predict_correct(p, m)
            belief[k] = learn_step(p, posterior_update(p, m, correct[i]))
    return mastery, predicted


def mastery_features(data: Dataset, models: Mapping[int, SkillModel]) -> np.ndarray:
    """P(L_{t-1}) for the skill of every record, aligned with ``data``."""
    return trace_dataset(data, models)[0]


# --- serialisation -----------------------------------------------------------

BKT_COLUMNS = ("skill_id", "l0", "t", "g", "s", "log_likelihood", "fallback")


def save_models(models: Mapping[int, SkillModel], skill_ids: Sequence[str], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(BKT_COLUMNS)
        for k in sorted(models):
            m = models[k]
            p = m.params
            w.writerow(
                [skill_ids[k]]
                + [f"{v:.17g}" for v in (p.l0, p.t, p.g, p.s, m.train_log_likelihood)]
                + [int(m.fallback)]
            )


def load_models(path: str | Path, skill_ids: Sequence[str]) -> dict[int, SkillModel]:
    index = {s: i for i, s in enumerate(skill_ids)}
    models = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            k = index[row["skill_id"]]
            params = BktParams(float(row["l0"]), float(row["t"]), float(row["g"]), float(row["s"]))
            models[k] = SkillModel(k, params, float(row["log_likelihood"]), bool(int(row.get("fallback") or 0)))
    return models
