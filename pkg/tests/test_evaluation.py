import io
import warnings
from dataclasses import replace

import numpy as np
import pytest

from bktlstm import evaluation
from bktlstm.bkt import GridSpec
from bktlstm.dataset import split_folds
from bktlstm.evaluation import (
    EvalReport,
    FoldResult,
    ModelSpec,
    PredictionSet,
    ablate,
    cross_validate,
    encode_dataset,
    fit_features,
    format_tables,
    per_skill_auc,
    report_rows,
    write_rows,
)
from bktlstm.features import encoding_size
from bktlstm.predictor import RnnConfig

FAST = ModelSpec(
    rnn=RnnConfig(hidden_size=8, epochs=2, learning_rate=0.05, dropout_rate=0.0, seed=1),
    grid=GridSpec(step=0.1, lo=0.1, hi=0.9),
    k_clusters=3,
)


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec(name="lstm")
    with pytest.raises(ValueError):
        ModelSpec(variant=5)
    assert ModelSpec(variant=2).label == "BKT-LSTM-2"
    assert ModelSpec(name="pfa").label == "PFA"


def test_features_fitted_on_training_students_only(small_synth):
    folds = split_folds(small_synth, 3, 0)
    train = small_synth.subset(folds[0].train_students)
    art = fit_features(train, FAST)
    test_problems = set(small_synth.subset(folds[0].test_students).problem.tolist())
    train_problems = set(train.problem.tolist())
    assert set(art.difficulty.support) <= train_problems
    # features of test students still encode (unseen problems default to bin 5)
    seqs = encode_dataset(small_synth.subset(folds[0].test_students), art, FAST)
    assert seqs[0].inputs.shape[1] == encoding_size(small_synth.n_skills, FAST.blocks, 4)
    assert test_problems


def test_ablation_widths(small_synth):
    art = fit_features(small_synth, FAST)
    widths = [encode_dataset(small_synth, art, replace(FAST, variant=v))[0].inputs.shape[1] for v in (1, 2, 3, 4)]
    K = small_synth.n_skills
    assert widths == [1 + K, 1 + 4 + K, 1 + 10 + K, 1 + 4 + 10 + K]


@pytest.mark.parametrize("name", ["bkt-lstm", "bkt", "birt", "pfa", "dkt"])
def test_cross_validate_each_model(small_synth, name):
    report = cross_validate(small_synth, replace(FAST, name=name), k=3, seed=0)
    assert len(report.folds) == 3 and not report.failures
    assert sum(f.n for f in report.folds) == small_synth.n_records
    agg = report.aggregate
    assert 0.0 <= agg["auc"] <= 1.0 and 0.0 <= agg["rmse"] <= 1.0
    if name == "bkt":
        assert "per_skill_auc" in agg


def test_failed_fold_is_reported(small_synth, monkeypatch):
    real = evaluation.run_fold
    calls = {"n": 0}

    def flaky(train, test, spec):
        calls["n"] += 1
        if calls["n"] == 2:
            raise FloatingPointError("boom")
        return real(train, test, spec)

    monkeypatch.setattr(evaluation, "run_fold", flaky)
    with pytest.warns(RuntimeWarning):
        report = cross_validate(small_synth, replace(FAST, name="bkt"), k=3, seed=0)
    assert len(report.folds) == 2
    assert list(report.failures) == [1]
    assert "fold 1 failed" in format_tables([report])


def test_ablate_shares_folds(small_synth):
    reports = ablate(small_synth, seed=0, spec=FAST, k=3, variants=(1, 4))
    assert [r.model for r in reports] == ["BKT-LSTM-1", "BKT-LSTM-4"]
    assert [f.n for f in reports[0].folds] == [f.n for f in reports[1].folds]


def test_per_skill_auc_skips_undefined():
    preds = PredictionSet(
        predicted=np.array([0.1, 0.9, 0.4, 0.6, 0.5]),
        actual=np.array([0, 1, 1, 0, 1.0]),
        skill=np.array([0, 0, 1, 1, 2]),
    )
    assert per_skill_auc(preds) == pytest.approx((1.0 + 0.0) / 2)


def test_report_formatting():
    rep = EvalReport("BKT", [FoldResult(0, 0.71234, 0.4, None, 10), FoldResult(1, 0.7, 0.45, 0.1, 12)])
    rows = report_rows([rep])
    assert ("BKT", "mean", "auc", "0.706") in rows
    assert ("BKT", "0", "r2", "NA") in rows
    buf = io.StringIO()
    write_rows([rep], buf)
    assert buf.getvalue().splitlines()[0] == "model\tfold\tmetric\tvalue"
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        text = format_tables([rep], "toy")
    assert "AUC (toy)" in text and "0.706" in text


def test_test_outcomes_do_not_leak_into_fitted_features(small_synth):
    fold = split_folds(small_synth, 3, 0)[0]
    test_idx = np.isin(small_synth.student, [small_synth.student_ids.index(s) for s in fold.test_students])
    flipped = replace(small_synth, correct=np.where(test_idx, 1 - small_synth.correct, small_synth.correct).astype(np.int8))
    a = fit_features(small_synth.subset(fold.train_students), FAST)
    b = fit_features(flipped.subset(fold.train_students), FAST)
    assert a.skill_models == b.skill_models
    np.testing.assert_array_equal(a.ability.centroids, b.ability.centroids)
    assert a.difficulty == b.difficulty
