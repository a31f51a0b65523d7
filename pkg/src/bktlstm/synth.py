"""Synthetic interaction logs sampled from the BKT generative process.

Each student works through ``attempts`` problems; the skill of each attempt
is drawn uniformly and the problem is an unused one of that skill. The
hidden known/unknown state per skill follows BKT with the skill's
(l0, t, g, s). Two optional logit shifts act on the emission:

* ``difficulty_strength``: each problem carries an injected level 0..9
  (9 = easiest); the shift is ``strength * (level - 4.5) / 4.5``.
* ``ability_sd``: each student draws a proficiency ``a ~ N(0, ability_sd)``
  that shifts the logit on every skill.

Both shifts move guess and slip together, so ``P(correct | known)`` and
``P(correct | unknown)`` keep their order.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bkt import BktParams
from .dataset import Dataset, InteractionRecord


@dataclass(frozen=True)
class SynthConfig:
    n_students: int = 500
    attempts: int = 50
    n_skills: int = 1
    problems_per_skill: int = 60
    params: tuple[BktParams, ...] | None = None  # None: drawn per skill from the ranges below
    l0_range: tuple[float, float] = (0.1, 0.6)
    t_range: tuple[float, float] = (0.05, 0.3)
    g_range: tuple[float, float] = (0.1, 0.3)
    s_range: tuple[float, float] = (0.05, 0.2)
    difficulty_strength: float = 0.0
    ability_sd: float = 0.0
    seed: int = 42


@dataclass
class SynthTruth:
    params: dict[str, BktParams]
    problem_levels: dict[str, int] = field(default_factory=dict)
    abilities: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "params": {k: asdict(v) for k, v in self.params.items()},
                "problem_levels": self.problem_levels,
                "abilities": self.abilities,
            },
            indent=1,
            sort_keys=True,
        )


def _shift(p: float, delta: float) -> float:
    if delta == 0.0 or p <= 0.0 or p >= 1.0:
        return p
    z = np.log(p) - np.log1p(-p) + delta
    return float(1.0 / (1.0 + np.exp(-z)))


def generate(config: SynthConfig) -> tuple[Dataset, SynthTruth]:
    rng = np.random.default_rng(config.seed)
    K = config.n_skills
    if config.params is not None:
        if len(config.params) != K:
            raise ValueError("params must list one BktParams per skill")
        params = list(config.params)
    else:
        params = [
            BktParams(
                float(np.round(rng.uniform(*config.l0_range), 3)),
                float(np.round(rng.uniform(*config.t_range), 3)),
                float(np.round(rng.uniform(*config.g_range), 3)),
                float(np.round(rng.uniform(*config.s_range), 3)),
            )
            for _ in range(K)
        ]
    width = len(str(max(config.n_students, 1)))
    skill_ids = [f"k{k}" for k in range(K)]
    problem_ids = [[f"p{k}_{j}" for j in range(config.problems_per_skill)] for k in range(K)]
    levels = rng.integers(0, 10, size=(K, config.problems_per_skill))
    easiness = (levels - 4.5) / 4.5

    records = []
    abilities = {}
    for i in range(config.n_students):
        sid = f"s{i:0{width}d}"
        ability = float(rng.normal(0.0, config.ability_sd)) if config.ability_sd > 0 else 0.0
        abilities[sid] = ability
        known = [bool(rng.random() < p.l0) for p in params]
        unused = [list(rng.permutation(config.problems_per_skill)) for _ in range(K)]
        for step in range(config.attempts):
            k = int(rng.integers(K))
            p = params[k]
            j = unused[k].pop() if unused[k] else int(rng.integers(config.problems_per_skill))
            delta = ability + config.difficulty_strength * float(easiness[k, j])
            p_correct = _shift(1.0 - p.s, delta) if known[k] else _shift(p.g, delta)
            r = int(rng.random() < p_correct)
            if not known[k] and rng.random() < p.t:
                known[k] = True
            records.append(InteractionRecord(sid, problem_ids[k][j], skill_ids[k], r, float(step + 1)))
    truth = SynthTruth(
        params=dict(zip(skill_ids, params)),
        problem_levels={problem_ids[k][j]: int(levels[k, j]) for k in range(K) for j in range(config.problems_per_skill)},
        abilities=abilities,
    )
    return Dataset.from_records(records), truth


def write(config: SynthConfig, out_dir: str | Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data, truth = generate(config)
    data_path = out_dir / "synthetic.csv"
    truth_path = out_dir / "truth.json"
    data.to_csv(data_path)
    truth_path.write_text(truth.to_json() + "\n", encoding="utf-8")
    return data_path, truth_path
