import numpy as np
import pytest

from bktlstm.dataset import Dataset, InteractionRecord
from bktlstm.synth import SynthConfig, generate


def make_dataset(rows):
    """rows: (student, problem, skill, correct, order) tuples."""
    return Dataset.from_records(InteractionRecord(*r) for r in rows)


@pytest.fixture
def tiny_rows():
    return [
        ("a", "p1", "A", 1, 1),
        ("a", "p2", "B", 0, 2),
        ("a", "p3", "A", 1, 3),
        ("b", "p1", "A", 0, 1),
        ("b", "p4", "B", 1, 2),
    ]


@pytest.fixture(scope="session")
def small_synth():
    cfg = SynthConfig(
        n_students=60, attempts=45, n_skills=3, problems_per_skill=20, difficulty_strength=2.0, ability_sd=1.0, seed=5
    )
    return generate(cfg)[0]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
