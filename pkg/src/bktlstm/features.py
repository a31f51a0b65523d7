"""Per-step feature assembly and one-hot encoding for the predictor."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .dataset import Dataset
from .difficulty import N_BINS, DifficultyTable, lookup_many

N_ABILITY = 8  # 7 clusters + the initial label


@dataclass(frozen=True)
class FeatureStep:
    mastery: float
    ability: int
    difficulty_bin: int
    skill: int
    target: int


@dataclass(frozen=True)
class FeatureBlocks:
    """Which optional blocks enter the encoding (mastery is always present)."""

    ability: bool = True
    difficulty: bool = True
    skill: bool = True


# BKT-LSTM-1..4
ABLATIONS = {
    1: FeatureBlocks(ability=False, difficulty=False),
    2: FeatureBlocks(ability=True, difficulty=False),
    3: FeatureBlocks(ability=False, difficulty=True),
    4: FeatureBlocks(ability=True, difficulty=True),
}


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    student_id: str
    mastery: np.ndarray
    ability: np.ndarray
    difficulty: np.ndarray
    skill: np.ndarray
    target: np.ndarray

    def __len__(self) -> int:
        return len(self.target)

    @property
    def steps(self) -> list[FeatureStep]:
        return [
            FeatureStep(float(m), int(a), int(d), int(k), int(r))
            for m, a, d, k, r in zip(self.mastery, self.ability, self.difficulty, self.skill, self.target)
        ]


@dataclass(frozen=True, eq=False)
class EncodedSequence:
    """Predictor input: ``inputs[t]`` is read before predicting ``targets[t]``
    from output unit ``skills[t]``."""

    student_id: str
    inputs: np.ndarray
    skills: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.targets)


def encoding_size(n_skills: int, blocks: FeatureBlocks = FeatureBlocks(), n_ability: int = N_ABILITY) -> int:
    return 1 + n_ability * blocks.ability + N_BINS * blocks.difficulty + n_skills * blocks.skill


def _check_ranges(ability, difficulty, skill, n_skills, n_ability):
    ability, difficulty, skill = np.asarray(ability), np.asarray(difficulty), np.asarray(skill)
    if ability.size and (ability.min() < 1 or ability.max() > n_ability):
        raise ValueError(f"ability label outside 1..{n_ability}")
    if difficulty.size and (difficulty.min() < 0 or difficulty.max() >= N_BINS):
        raise ValueError(f"difficulty bin outside 0..{N_BINS - 1}")
    if skill.size and (skill.min() < 0 or skill.max() >= n_skills):
        raise ValueError(f"skill index outside 0..{n_skills - 1}")


def encode_arrays(
    mastery: np.ndarray,
    ability: np.ndarray,
    difficulty: np.ndarray,
    skill: np.ndarray,
    n_skills: int,
    blocks: FeatureBlocks = FeatureBlocks(),
    n_ability: int = N_ABILITY,
) -> np.ndarray:
    """Rows ``[mastery | ability one-hot | difficulty one-hot | skill one-hot]``."""
    _check_ranges(ability, difficulty, skill, n_skills, n_ability)
    T = len(mastery)
    out = np.zeros((T, encoding_size(n_skills, blocks, n_ability)))
    rows = np.arange(T)
    out[:, 0] = mastery
    col = 1
    if blocks.ability:
        out[rows, col + np.asarray(ability) - 1] = 1.0
        col += n_ability
    if blocks.difficulty:
        out[rows, col + np.asarray(difficulty)] = 1.0
        col += N_BINS
    if blocks.skill:
        out[rows, col + np.asarray(skill)] = 1.0
    return out


def encode_step(
    step: FeatureStep, n_skills: int, blocks: FeatureBlocks = FeatureBlocks(), n_ability: int = N_ABILITY
) -> np.ndarray:
    return encode_arrays(
        np.array([step.mastery]),
        np.array([step.ability]),
        np.array([step.difficulty_bin]),
        np.array([step.skill]),
        n_skills,
        blocks,
        n_ability,
    )[0]


def encode_sequence(
    seq: FeatureSequence, n_skills: int, blocks: FeatureBlocks = FeatureBlocks(), n_ability: int = N_ABILITY
) -> EncodedSequence:
    inputs = encode_arrays(seq.mastery, seq.ability, seq.difficulty, seq.skill, n_skills, blocks, n_ability)
    return EncodedSequence(seq.student_id, inputs, seq.skill.astype(np.int64), seq.target.astype(np.int64))


def build_sequences(
    data: Dataset,
    masteries: np.ndarray,
    profiles: np.ndarray,
    difficulties: DifficultyTable,
) -> list[FeatureSequence]:
    """One sequence per student; feature arrays are aligned with ``data``'s records."""
    masteries = np.asarray(masteries, dtype=np.float64)
    profiles = np.asarray(profiles)
    if len(masteries) != data.n_records or len(profiles) != data.n_records:
        raise ValueError("feature arrays must be aligned with the dataset records")
    bad = np.flatnonzero(~np.isfinite(masteries))
    if bad.size:
        rec = next(iter(data._take(np.isin(np.arange(data.n_records), bad[:1])).records()))
        raise ValueError(f"missing mastery feature for record {rec}")
    bins = lookup_many(difficulties, data.problem)
    out = []
    for sid, sl in data.student_slices():
        out.append(
            FeatureSequence(
                student_id=sid,
                mastery=masteries[sl].copy(),
                ability=profiles[sl].astype(np.int64),
                difficulty=bins[sl].copy(),
                skill=data.skill[sl].astype(np.int64),
                target=data.correct[sl].astype(np.int64),
            )
        )
    return out


def dump_encoded(sequences: Iterable[EncodedSequence], path: str | Path) -> None:
    """Debug dump: per row a uint32 length followed by float64 values."""
    with open(path, "wb") as fh:
        for seq in sequences:
            for row in seq.inputs:
                fh.write(struct.pack("<I", len(row)))
                fh.write(np.asarray(row, dtype="<f8").tobytes())


def read_dump(path: str | Path) -> Iterator[np.ndarray]:
    with open(path, "rb") as fh:
        while header := fh.read(4):
            (n,) = struct.unpack("<I", header)
            yield np.frombuffer(fh.read(8 * n), dtype="<f8")
