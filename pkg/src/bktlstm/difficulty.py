"""Problem difficulty bins from first-attempt success rates."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataset import Dataset

DEFAULT_BIN = 5
N_BINS = 10
MIN_SUPPORT = 4


@dataclass(frozen=True)
class DifficultyTable:
    """``levels`` holds only problems with enough support; others resolve to 5.

    A bin is the success-rate decile, ``min(floor(10 * rate), 9)``, so a high
    bin marks an easy problem. The predictor treats it as a category.
    """

    levels: Mapping[int, int] = field(default_factory=dict)
    support: Mapping[int, int] = field(default_factory=dict)
    default_bin: int = DEFAULT_BIN


def compute_difficulty(data: Dataset, min_support: int = MIN_SUPPORT) -> DifficultyTable:
    """Bin every problem attempted by at least ``min_support`` students.

    Only each student's first attempt at a problem counts.
    """
    firsts: dict[tuple[int, int], int] = {}
    for st, pr, r in zip(data.student.tolist(), data.problem.tolist(), data.correct.tolist()):
        if pr >= 0 and (st, pr) not in firsts:
            firsts[(st, pr)] = r
    n: dict[int, int] = {}
    hits: dict[int, int] = {}
    for (_, pr), r in firsts.items():
        n[pr] = n.get(pr, 0) + 1
        hits[pr] = hits.get(pr, 0) + r
    levels = {
        pr: min((N_BINS * hits[pr]) // cnt, N_BINS - 1)  # integer floor of 10 * rate
        for pr, cnt in n.items()
        if cnt >= min_support
    }
    return DifficultyTable(levels=dict(sorted(levels.items())), support=dict(sorted(n.items())))


def lookup(table: DifficultyTable, problem: int | None) -> int:
    if problem is None or problem < 0:
        return table.default_bin
    return table.levels.get(problem, table.default_bin)


def lookup_many(table: DifficultyTable, problems: np.ndarray) -> np.ndarray:
    return np.fromiter((lookup(table, p) for p in problems.tolist()), dtype=np.int64, count=len(problems))


def save_table(table: DifficultyTable, problem_ids: Sequence[str], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["problem_id", "bin", "support"])
        for pr, cnt in table.support.items():
            w.writerow([problem_ids[pr], lookup(table, pr), cnt])


def load_table(path: str | Path, problem_ids: Sequence[str], min_support: int = MIN_SUPPORT) -> DifficultyTable:
    index = {p: i for i, p in enumerate(problem_ids)}
    levels, support = {}, {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            pr = index[row["problem_id"]]
            support[pr] = int(row["support"])
            if support[pr] >= min_support:
                levels[pr] = int(row["bin"])
    return DifficultyTable(levels=levels, support=support)
