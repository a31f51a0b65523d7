"""End-to-end acceptance criteria.

Each test prints one PASS/FAIL line; the lines are repeated in the terminal
summary. The ablation and baseline checks share one synthetic dataset whose
cross-validated runs are computed once per module.
"""

import itertools
import json
import os
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from bktlstm import evaluation
from bktlstm.baselines import fit_birt, fit_pfa
from bktlstm.bkt import BktParams, GridSpec, fit_skill, learn_step, posterior_update, predict_correct, skill_sequences
from bktlstm.cli import main
from bktlstm.dataset import clean, load_interactions, split_folds
from bktlstm.difficulty import DEFAULT_BIN, compute_difficulty, lookup, lookup_many
from bktlstm.features import EncodedSequence
from bktlstm.metrics import auc
from bktlstm.predictor import PARAM_NAMES, RnnConfig, backward, forward, init_model, loss
from bktlstm.profile import fit_kmeans, nearest_labels, training_vectors
from bktlstm.synth import SynthConfig, generate

from conftest import make_dataset

RESULTS: list[str] = []


def verdict(number, title, ok, detail=""):
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
    RESULTS.append(line)
    print(line)
    assert ok, line


# --- 1 ------------------------------------------------------------------------------


def test_c01_bkt_update_chain():
    p = BktParams(l0=0.5, t=0.1, g=0.2, s=0.1)
    post = posterior_update(p, 0.5, 1)
    nxt = learn_step(p, post)
    pred = predict_correct(p, 0.5)
    errs = [abs(post - 9 / 11), abs(nxt - 46 / 55), abs(pred - 0.55)]
    verdict(1, "BKT update chain 0.5 -> 0.81818 -> 0.83636, predicted 0.55", max(errs) <= 1e-12, f"max err {max(errs):.1e}")


# --- 2 ------------------------------------------------------------------------------


def test_c02_bkt_parameter_recovery():
    truth = BktParams(l0=0.3, t=0.2, g=0.15, s=0.1)
    hits = 0
    for trial in range(20):
        data, _ = generate(SynthConfig(n_students=500, attempts=50, params=(truth,), seed=1000 + trial))
        p = fit_skill(skill_sequences(data)[0], GridSpec()).params
        hits += all(abs(getattr(p, n) - getattr(truth, n)) <= 0.05 + 1e-9 for n in ("l0", "t", "g", "s"))
    verdict(2, "BKT grid fit recovers generating parameters within +-0.05", hits >= 19, f"{hits}/20 trials")


# --- 3 ------------------------------------------------------------------------------


def _max_rel_error(cell, seed):
    rng = np.random.default_rng(seed)
    D, S, H, T = 4, 3, 5, 7
    model = init_model(RnnConfig(hidden_size=H, cell=cell, seed=seed), D, S)
    for name in PARAM_NAMES:
        getattr(model, name)[...] *= 3.0
    seq = EncodedSequence("s", rng.standard_normal((T, D)), rng.integers(0, S, T), rng.integers(0, 2, T))
    grads = backward(model, seq)
    worst = 0.0
    eps = 1e-6
    for name in PARAM_NAMES:
        arr = getattr(model, name)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + eps
            lp = loss(forward(model, seq)[1], seq, "sum")
            arr[idx] = orig - eps
            lm = loss(forward(model, seq)[1], seq, "sum")
            arr[idx] = orig
            num = (lp - lm) / (2 * eps)
            a = grads[name][idx]
            worst = max(worst, abs(a - num) / max(abs(a) + abs(num), 1e-7))
    return worst


def test_c03_gradient_check():
    worst = {cell: max(_max_rel_error(cell, s) for s in (11, 12)) for cell in ("gated", "simple")}
    detail = ", ".join(f"{c} {v:.1e}" for c, v in worst.items())
    verdict(3, "BPTT gradients match central differences", max(worst.values()) <= 1e-4, detail)


# --- 4 ------------------------------------------------------------------------------


def _pairwise(p, y):
    pos = [a for a, t in zip(p, y) if t]
    neg = [a for a, t in zip(p, y) if not t]
    s = sum(Fraction(1) if a > b else Fraction(1, 2) if a == b else Fraction(0) for a in pos for b in neg)
    return float(s / (len(pos) * len(neg)))


def test_c04_auc_oracle():
    rng = np.random.default_rng(2024)
    bad_exact = bad_mono = ties = 0
    for i in range(200):
        while True:
            n_pos, n_neg = int(rng.integers(1, 11)), int(rng.integers(1, 11))
            if n_pos * n_neg <= 50:
                break
        y = rng.permutation(np.r_[np.ones(n_pos), np.zeros(n_neg)])
        p = rng.integers(0, 5, len(y)) / 4.0 if i % 2 else rng.random(len(y))
        ties += len(np.unique(p)) < len(p)
        a = auc(p, y)
        bad_exact += a != _pairwise(p, y)
        bad_mono += auc(np.exp(2 * p) - 7, y) != a or auc(np.sqrt(p), y) != a
    verdict(4, "rank AUC equals pairwise AUC, monotone invariant", bad_exact == 0 and bad_mono == 0,
            f"200 sets, {ties} with ties, {bad_exact} exact mismatches, {bad_mono} invariance mismatches")


# --- 5 ------------------------------------------------------------------------------


def test_c05_kmeans_contracts(small_synth):
    X = training_vectors(small_synth)
    ok_mono = ok_nearest = ok_det = True
    for seed, init in itertools.product(range(5), ("random", "farthest")):
        m = fit_kmeans(X, k=7, seed=seed, init=init)
        h = np.array(m.objective_history)
        ok_mono &= bool(np.all(np.diff(h) <= 1e-12 * h[0]))
        got = nearest_labels(m, X) - 2
        for x, lab in zip(X, got):
            d = [float(((x - c) ** 2).sum()) for c in m.centroids]
            ok_nearest &= d[lab] <= min(d)
        ok_det &= np.array_equal(m.centroids, fit_kmeans(X, k=7, seed=seed, init=init).centroids)
    verdict(5, "k-means objective non-increasing, nearest assignment, seeded determinism", ok_mono and ok_nearest and ok_det,
            f"monotone={ok_mono} nearest={ok_nearest} deterministic={ok_det}")


# --- 6 ------------------------------------------------------------------------------


def test_c06_difficulty_rules():
    few = make_dataset([(f"s{i}", "p", "k", 1, 1) for i in range(3)])
    seven = make_dataset([(f"s{i}", "p", "k", int(i < 7), 1) for i in range(10)])
    nop = make_dataset([(f"s{i}", None, "k", i % 2, 1) for i in range(12)])
    a = lookup(compute_difficulty(few), 0)
    b = lookup(compute_difficulty(seven), 0)
    c = set(lookup_many(compute_difficulty(nop), nop.problem).tolist())
    verdict(6, "difficulty bins: support < 4 -> 5, 7/10 -> 7, no problems -> 5", a == DEFAULT_BIN and b == 7 and c == {DEFAULT_BIN},
            f"got {a}, {b}, {sorted(c)}")


# --- 7 & 8: desk-scale runs -------------------------------------------------------------

DESK_RNN = RnnConfig(hidden_size=32, epochs=30, learning_rate=0.05, dropout_rate=0.2, seed=3)
DESK_SYNTH = [
    "--students", "500", "--attempts", "60", "--skills", "8", "--problems-per-skill", "40",
    "--difficulty-strength", "2.0", "--ability-sd", "2.5", "--seed", "7",
]


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    assert main(["synth", *DESK_SYNTH, "--out", str(out)]) == 0
    data = clean(load_interactions(out / "synthetic.csv"))
    spec = evaluation.ModelSpec(rnn=DESK_RNN)
    folds = split_folds(data, 5, 42)
    ablation = {r.model: r for r in evaluation.ablate(data, seed=42, spec=spec, k=5)}
    bkt_report = evaluation.cross_validate(data, evaluation.ModelSpec(name="bkt"), folds=folds)
    return data, ablation, bkt_report


@pytest.mark.slow
def test_c07_ablation_ordering(desk):
    _, ablation, _ = desk
    v = {i: ablation[f"BKT-LSTM-{i}"].mean("auc") for i in (1, 2, 3, 4)}
    ok = v[4] >= v[3] >= v[1] - 0.01 and v[4] - v[1] >= 0.02
    detail = ", ".join(f"v{i} {v[i]:.4f}" for i in (1, 2, 3, 4))
    verdict(7, "ablation AUC: v4 >= v3 >= v1 - 0.01 and v4 - v1 >= 0.02", ok, detail)


@pytest.mark.slow
def test_c08_baseline_sanity(desk):
    data, ablation, bkt_report = desk
    v4, b = ablation["BKT-LSTM-4"].mean("auc"), bkt_report.mean("auc")
    birt = fit_birt(data)
    pfa = fit_pfa(data)
    birt_up = bool(np.all(np.diff(birt.objective_history) >= -1e-9))
    pfa_up = bool(np.all(np.diff(pfa.objective_history) >= -1e-9))
    ok = v4 - b >= 0.05 and birt.converged and pfa.converged and birt_up and pfa_up
    detail = (f"BKT-LSTM-4 {v4:.4f} vs BKT {b:.4f}; BIRT converged={birt.converged} in {birt.n_sweeps} sweeps; "
              f"PFA converged={pfa.converged} in {pfa.n_iter} steps; ascent {birt_up}/{pfa_up}")
    verdict(8, "BKT-LSTM-4 beats plain BKT by >= 0.05; BIRT and PFA converge with ascent", ok, detail)


# --- 9 ------------------------------------------------------------------------------

ASSIST09 = os.environ.get("BKTLSTM_ASSIST09")


@pytest.mark.slow
@pytest.mark.skipif(not ASSIST09 or not Path(ASSIST09).is_file(), reason="set BKTLSTM_ASSIST09 to the skill-builder csv")
def test_c09_full_assist09_stretch():
    data = clean(load_interactions(ASSIST09, preset="assist2009"))
    lstm = evaluation.cross_validate(data, evaluation.ModelSpec())
    plain = evaluation.cross_validate(data, evaluation.ModelSpec(name="bkt"))
    a, r, b = lstm.mean("auc"), lstm.mean("rmse"), plain.mean("auc")
    within = abs(a - 0.80) <= 0.03 and abs(b - 0.65) <= 0.03 and abs(r - 0.41) <= 0.02
    # non-blocking: deviations are reported, not failed
    line = f"criterion  9 {'PASS' if within else 'DEVIATION'}  full ASS-09 run  (BKT-LSTM AUC {a:.3f} RMSE {r:.3f}, BKT AUC {b:.3f})"
    RESULTS.append(line)
    print(line)


def test_c09_note_when_skipped():
    if not ASSIST09 or not Path(ASSIST09).is_file():
        line = "criterion  9 SKIP  full ASS-09 stretch run (non-blocking; dataset not present, set BKTLSTM_ASSIST09)"
        RESULTS.append(line)
        print(line)


# --- 10 -----------------------------------------------------------------------------


def test_c10_determinism(tmp_path):
    src = tmp_path / "src"
    assert main(["synth", "--students", "40", "--attempts", "45", "--skills", "3", "--problems-per-skill", "15",
                 "--difficulty-strength", "2", "--seed", "5", "--out", str(src)]) == 0
    ds = ["--dataset", str(src / "synthetic.csv")]
    fast = ["--hidden", "8", "--epochs", "2", "--lr", "0.05", "--grid-step", "0.1", "--clusters", "3", "--folds", "3"]
    commands = {
        "synth": ["synth", "--students", "10", "--seed", "9"],
        "ingest": ["ingest", *ds],
        "fit": ["fit", *ds, "--grid-step", "0.1"],
        "cluster": ["cluster", *ds, "--clusters", "3"],
        "difficulty": ["difficulty", *ds],
        "train": ["train", *ds, *fast],
        "pipeline": ["pipeline", *ds, "--model", "all", *fast],
        "ablate": ["ablate", *ds, *fast],
    }
    mismatched = []
    for name, argv in commands.items():
        outs = [tmp_path / f"{name}{run}" for run in (1, 2)]
        for out in outs:
            assert main([*argv, "--out", str(out)]) == 0
        files = sorted(p.name for p in outs[0].iterdir() if p.name != "manifest.json")
        for f in files:
            if (outs[0] / f).read_bytes() != (outs[1] / f).read_bytes():
                mismatched.append(f"{name}/{f}")
        m1, m2 = (json.loads((o / "manifest.json").read_text()) for o in outs)
        if m1["artifacts"] != m2["artifacts"]:
            mismatched.append(f"{name}/manifest hashes")
    verdict(10, "every command re-run with the same seed gives byte-identical outputs", not mismatched,
            f"{len(commands)} commands, mismatches: {mismatched or 'none'}")

