"""Interaction-log ingestion, cleaning and student-level folds.

A :class:`Dataset` is stored column-wise: one numpy array per field, with
records grouped by student and sorted by the order column inside each
student. Identifiers are kept as strings and mapped to dense indices.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MISSING_TOKENS = frozenset({"", "na", "nan", "null", "none"})
CANONICAL_COLUMNS = ("student_id", "problem_id", "skill_id", "correct", "order")
MANDATORY_ROLES = ("student", "skill", "correct", "order")

# Column maps for the public datasets. A role mapped to a tuple joins the
# listed columns with "|" (KDD problem identity is problem name + step name).
PRESETS: dict[str, dict[str, str | tuple[str, ...]]] = {
    "canonical": {
        "student": "student_id",
        "problem": "problem_id",
        "skill": "skill_id",
        "correct": "correct",
        "order": "order",
    },
    "assist2009": {
        "student": "user_id",
        "problem": "problem_id",
        "skill": "skill_id",
        "correct": "correct",
        "order": "order_id",
        "original": "original",
    },
    "assist2014": {
        "student": "user_id",
        "skill": "sequence_id",
        "correct": "correct",
        "order": "log_id",
    },
    "algebra2005": {
        "student": "Anon Student Id",
        "problem": ("Problem Name", "Step Name"),
        "skill": "KC(Default)",
        "correct": "Correct First Attempt",
        "order": "Row",
    },
}


class DatasetError(ValueError):
    """Raised for unusable input (missing columns, too few students)."""


@dataclass(frozen=True)
class InteractionRecord:
    student_id: str
    problem_id: str | None
    skill_id: str
    correct: int
    order: float

    def __post_init__(self):
        if self.correct not in (0, 1):
            raise ValueError(f"correct must be 0 or 1, got {self.correct!r}")


@dataclass(frozen=True)
class FoldSplit:
    fold_id: int
    train_students: frozenset[str]
    test_students: frozenset[str]


def _id_sort_key(value: str):
    # numeric ids sort numerically, everything else lexically after them
    try:
        return (0, float(value), value)
    except ValueError:
        return (1, 0.0, value)


def _index(values: Iterable[str]) -> tuple[str, ...]:
    return tuple(sorted(set(values), key=_id_sort_key))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable column store of interaction records.

    ``problem`` holds -1 where a record carries no problem identifier. The
    skill and problem index tuples are bijections onto ``0..n-1``.
    """

    student_ids: tuple[str, ...]
    skill_ids: tuple[str, ...]
    problem_ids: tuple[str, ...]
    student: np.ndarray
    problem: np.ndarray
    skill: np.ndarray
    correct: np.ndarray
    order: np.ndarray
    meta: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.student)
        for name in ("problem", "skill", "correct", "order"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name!r} has wrong length")
        for arr in (self.student, self.problem, self.skill, self.correct, self.order):
            arr.setflags(write=False)
        starts = np.flatnonzero(np.r_[True, self.student[1:] != self.student[:-1]]) if n else np.array([], int)
        ends = np.r_[starts[1:], n] if n else np.array([], int)
        object.__setattr__(self, "_bounds", (starts, ends))

    # -- sizes -----------------------------------------------------------
    @property
    def n_records(self) -> int:
        return len(self.student)

    @property
    def n_skills(self) -> int:
        return len(self.skill_ids)

    @property
    def n_problems(self) -> int:
        return len(self.problem_ids)

    @property
    def n_students(self) -> int:
        """Students with at least one record."""
        return len(self._bounds[0])

    @property
    def has_problems(self) -> bool:
        return self.n_problems > 0

    @property
    def skill_index(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.skill_ids)}

    @property
    def problem_index(self) -> dict[str, int]:
        return {p: i for i, p in enumerate(self.problem_ids)}

    def summary(self) -> dict[str, int]:
        return {
            "skills": self.n_skills,
            "problems": self.n_problems,
            "students": self.n_students,
            "records": self.n_records,
        }

    # -- iteration -------------------------------------------------------
    def student_slices(self) -> Iterator[tuple[str, slice]]:
        """Yield ``(student_id, slice)`` for each student's contiguous block."""
        starts, ends = self._bounds
        for a, b in zip(starts, ends):
            yield self.student_ids[self.student[a]], slice(int(a), int(b))

    def present_students(self) -> list[str]:
        return [sid for sid, _ in self.student_slices()]

    def records(self) -> Iterator[InteractionRecord]:
        for i in range(self.n_records):
            p = int(self.problem[i])
            yield InteractionRecord(
                student_id=self.student_ids[self.student[i]],
                problem_id=self.problem_ids[p] if p >= 0 else None,
                skill_id=self.skill_ids[self.skill[i]],
                correct=int(self.correct[i]),
                order=float(self.order[i]),
            )

    def subset(self, students: Iterable[str]) -> Dataset:
        """Records of the given students, keeping the global skill/problem index."""
        wanted = set(students)
        keep_idx = np.array([i for i, s in enumerate(self.student_ids) if s in wanted], dtype=np.int64)
        mask = np.isin(self.student, keep_idx)
        return self._take(mask)

    def _take(self, mask: np.ndarray) -> Dataset:
        return Dataset(
            student_ids=self.student_ids,
            skill_ids=self.skill_ids,
            problem_ids=self.problem_ids,
            student=self.student[mask].copy(),
            problem=self.problem[mask].copy(),
            skill=self.skill[mask].copy(),
            correct=self.correct[mask].copy(),
            order=self.order[mask].copy(),
        )

    # -- construction ----------------------------------------------------
    @classmethod
    def from_records(cls, records: Iterable[InteractionRecord], meta: Mapping[str, int] | None = None) -> Dataset:
        """Build a dataset, grouping by student and stably sorting by order."""
        records = list(records)
        student_ids = _index(r.student_id for r in records)
        skill_ids = _index(r.skill_id for r in records)
        problem_ids = _index(r.problem_id for r in records if r.problem_id is not None)
        s_idx = {s: i for i, s in enumerate(student_ids)}
        k_idx = {s: i for i, s in enumerate(skill_ids)}
        p_idx = {s: i for i, s in enumerate(problem_ids)}
        n = len(records)
        student = np.fromiter((s_idx[r.student_id] for r in records), dtype=np.int64, count=n)
        problem = np.fromiter(
            (p_idx[r.problem_id] if r.problem_id is not None else -1 for r in records), dtype=np.int64, count=n
        )
        skill = np.fromiter((k_idx[r.skill_id] for r in records), dtype=np.int64, count=n)
        correct = np.fromiter((r.correct for r in records), dtype=np.int8, count=n)
        order = np.fromiter((r.order for r in records), dtype=np.float64, count=n)
        perm = np.lexsort((order, student))  # lexsort is stable
        return cls(
            student_ids=student_ids,
            skill_ids=skill_ids,
            problem_ids=problem_ids,
            student=student[perm],
            problem=problem[perm],
            skill=skill[perm],
            correct=correct[perm],
            order=order[perm],
            meta=dict(meta or {}),
        )

    def to_csv(self, dest: str | Path | IO[str]) -> None:
        """Write the canonical five-column form."""
        if isinstance(dest, (str, Path)):
            with open(dest, "w", newline="", encoding="utf-8") as fh:
                self.to_csv(fh)
            return
        writer = csv.writer(dest, lineterminator="\n")
        writer.writerow(CANONICAL_COLUMNS)
        for rec in self.records():
            writer.writerow(
                [rec.student_id, rec.problem_id or "", rec.skill_id, rec.correct, _format_order(rec.order)]
            )


def _format_order(value: float) -> str:
    if float(value).is_integer():
        return str(int(value))
    return repr(float(value))


def _is_missing(value: str | None) -> bool:
    return value is None or value.strip().lower() in MISSING_TOKENS


def resolve_column_map(preset: str | None = None, column_map: Mapping[str, object] | None = None) -> dict:
    if preset is None and column_map is None:
        preset = "canonical"
    if preset is not None and preset not in PRESETS:
        raise DatasetError(f"unknown preset {preset!r}; available presets: {', '.join(sorted(PRESETS))}")
    merged = dict(PRESETS[preset]) if preset else {}
    merged.update(column_map or {})
    return merged


def load_interactions(
    source: str | Path | IO[str],
    column_map: Mapping[str, object] | None = None,
    preset: str | None = None,
) -> Dataset:
    """Read a delimiter-separated interaction log.

    The delimiter (tab or comma) is detected from the header line. Rows
    with a missing skill are dropped; rows whose student, outcome or order
    cannot be parsed are skipped and counted in ``meta["malformed_rows"]``.
    An optional ``original`` role keeps only rows whose value is 1
    (ASSISTments marks scaffolding sub-questions with 0).
    """
    if isinstance(source, (str, Path)):
        with open(source, newline="", encoding="utf-8", errors="replace") as fh:
            return load_interactions(fh, column_map, preset)

    cmap = resolve_column_map(preset, column_map)
    header_line = source.readline()
    if not header_line:
        raise DatasetError("input has no header line")
    delimiter = "\t" if "\t" in header_line else ","
    header = next(csv.reader([header_line], delimiter=delimiter))
    header = [h.strip().lstrip("﻿") for h in header]
    col = {name: i for i, name in enumerate(header)}

    def positions(role: str) -> tuple[int, ...] | None:
        spec = cmap.get(role)
        if spec is None:
            return None
        names = (spec,) if isinstance(spec, str) else tuple(spec)
        missing = [n for n in names if n not in col]
        if missing:
            if role in MANDATORY_ROLES:
                raise DatasetError(f"missing mandatory column(s) {missing} for role {role!r}")
            return None
        return tuple(col[n] for n in names)

    for role in MANDATORY_ROLES:
        if role not in cmap:
            raise DatasetError(f"column map lacks mandatory role {role!r}")
    pos = {role: positions(role) for role in ("student", "problem", "skill", "correct", "order", "original")}

    def cell(row: Sequence[str], role: str) -> str | None:
        idx = pos[role]
        if idx is None:
            return None
        parts = [row[i].strip() for i in idx]
        if any(_is_missing(p) for p in parts):
            return None
        return "|".join(parts)

    records: list[InteractionRecord] = []
    malformed = missing_skill = non_original = 0
    for row in csv.reader(source, delimiter=delimiter):
        if not row:
            continue
        if len(row) != len(header):
            malformed += 1
            continue
        if pos["original"] is not None and cell(row, "original") not in ("1", "1.0"):
            non_original += 1
            continue
        skill = cell(row, "skill")
        if skill is None:
            missing_skill += 1
            continue
        student = cell(row, "student")
        try:
            correct = float(cell(row, "correct"))
            order = float(cell(row, "order"))
        except (TypeError, ValueError):
            malformed += 1
            continue
        if student is None or correct not in (0.0, 1.0) or not np.isfinite(order):
            malformed += 1
            continue
        records.append(InteractionRecord(student, cell(row, "problem"), skill, int(correct), order))

    if malformed:
        logger.warning("skipped %d malformed row(s)", malformed)
    meta = {"malformed_rows": malformed, "missing_skill_rows": missing_skill, "non_original_rows": non_original}
    return Dataset.from_records(records, meta=meta)


def loads_interactions(text: str, column_map: Mapping[str, object] | None = None, preset: str | None = None) -> Dataset:
    return load_interactions(io.StringIO(text), column_map, preset)


def clean(raw: Dataset) -> Dataset:
    """Apply the first-attempt / missing-value / duplicate protocol.

    In order: exact duplicate records are collapsed; if the dataset carries
    problem identifiers, records without one are dropped and only the first
    attempt per (student, problem) is kept; finally a repeated order value
    within a student keeps its first record. Skill and problem indices are
    compacted to the surviving records.
    """
    n = raw.n_records
    keep = np.ones(n, dtype=bool)
    seen_rows: set = set()
    seen_pairs: set = set()
    seen_orders: set = set()
    has_problems = raw.has_problems
    for i in range(n):
        st, pr, order = int(raw.student[i]), int(raw.problem[i]), float(raw.order[i])
        row = (st, pr, int(raw.skill[i]), int(raw.correct[i]), order)
        if row in seen_rows:
            keep[i] = False
            continue
        seen_rows.add(row)
        if has_problems:
            if pr < 0 or (st, pr) in seen_pairs:
                keep[i] = False
                continue
            seen_pairs.add((st, pr))
        if (st, order) in seen_orders:
            keep[i] = False
            continue
        seen_orders.add((st, order))
    kept = raw._take(keep)
    return _compact(kept, meta={**raw.meta, "cleaned_away": int(n - keep.sum())})


def _compact(data: Dataset, meta: Mapping[str, int] | None = None) -> Dataset:
    skills_used = np.unique(data.skill)
    problems_used = np.unique(data.problem[data.problem >= 0])
    skill_ids = _index(data.skill_ids[i] for i in skills_used)
    problem_ids = _index(data.problem_ids[i] for i in problems_used)
    k_new = {s: i for i, s in enumerate(skill_ids)}
    p_new = {s: i for i, s in enumerate(problem_ids)}
    skill_map = np.full(max(data.n_skills, 1), -1, dtype=np.int64)
    for old in skills_used:
        skill_map[old] = k_new[data.skill_ids[old]]
    problem_map = np.full(max(data.n_problems, 1) + 1, -1, dtype=np.int64)
    for old in problems_used:
        problem_map[old] = p_new[data.problem_ids[old]]
    return Dataset(
        student_ids=data.student_ids,
        skill_ids=skill_ids,
        problem_ids=problem_ids,
        student=data.student.copy(),
        problem=problem_map[data.problem] if len(data.problem) else data.problem.copy(),
        skill=skill_map[data.skill] if len(data.skill) else data.skill.copy(),
        correct=data.correct.copy(),
        order=data.order.copy(),
        meta=dict(meta or data.meta),
    )


def split_folds(data: Dataset, k: int = 5, seed: int = 42) -> list[FoldSplit]:
    """Partition students into ``k`` disjoint test folds.

    Students are shuffled with a seeded generator and cut into ``k``
    contiguous parts whose sizes differ by at most one.
    """
    if k < 2:
        raise DatasetError("k must be at least 2")
    students = data.present_students()
    if len(students) < k:
        raise DatasetError(f"need at least {k} students for {k} folds, got {len(students)}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(students))
    everyone = frozenset(students)
    folds = []
    for fold_id, part in enumerate(np.array_split(perm, k)):
        test = frozenset(students[i] for i in part)
        folds.append(FoldSplit(fold_id, everyone - test, test))
    return folds
