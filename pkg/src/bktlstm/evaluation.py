"""Student-level cross-validation, ablations and report formatting."""

from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import baselines, bkt, difficulty, features, predictor, profile
from .dataset import Dataset, FoldSplit, split_folds
from .metrics import auc, r_squared, rmse

logger = logging.getLogger(__name__)

MODEL_NAMES = ("bkt-lstm", "bkt", "birt", "pfa", "dkt")


@dataclass(frozen=True)
class ModelSpec:
    """What to train in each fold. ``variant`` selects the BKT-LSTM feature set."""

    name: str = "bkt-lstm"
    variant: int = 4
    rnn: predictor.RnnConfig = predictor.RnnConfig()
    grid: bkt.GridSpec = bkt.GridSpec()
    window: int = 20
    k_clusters: int = 7
    kmeans_init: str = "random"
    include_skill: bool = True

    def __post_init__(self):
        if self.name not in MODEL_NAMES:
            raise ValueError(f"unknown model {self.name!r}; choose from {', '.join(MODEL_NAMES)}")
        if self.variant not in features.ABLATIONS:
            raise ValueError("variant must be 1..4")

    @property
    def label(self) -> str:
        if self.name == "bkt-lstm":
            return f"BKT-LSTM-{self.variant}"
        return self.name.upper()

    @property
    def blocks(self) -> features.FeatureBlocks:
        return replace(features.ABLATIONS[self.variant], skill=self.include_skill)


@dataclass
class PredictionSet:
    predicted: np.ndarray
    actual: np.ndarray
    student: np.ndarray | None = None
    skill: np.ndarray | None = None


@dataclass
class FoldResult:
    fold: int
    auc: float | None
    rmse: float
    r2: float | None
    n: int
    extra: dict[str, float | None] = field(default_factory=dict)


@dataclass
class EvalReport:
    model: str
    folds: list[FoldResult] = field(default_factory=list)
    failures: dict[int, str] = field(default_factory=dict)

    def mean(self, metric: str) -> float | None:
        vals = [getattr(f, metric) if hasattr(f, metric) else f.extra.get(metric) for f in self.folds]
        vals = [v for v in vals if v is not None and math.isfinite(v)]
        return float(np.mean(vals)) if vals else None

    @property
    def aggregate(self) -> dict[str, float | None]:
        out = {m: self.mean(m) for m in ("auc", "rmse", "r2")}
        extras = sorted({k for f in self.folds for k in f.extra})
        out.update({k: self.mean(k) for k in extras})
        return out


def score(preds: PredictionSet) -> tuple[float | None, float, float | None]:
    return auc(preds.predicted, preds.actual), rmse(preds.predicted, preds.actual), r_squared(preds.predicted, preds.actual)


def per_skill_auc(preds: PredictionSet) -> float | None:
    """Mean of the per-skill AUCs over skills where AUC is defined."""
    vals = []
    for k in np.unique(preds.skill):
        m = preds.skill == k
        a = auc(preds.predicted[m], preds.actual[m])
        if a is not None:
            vals.append(a)
    return float(np.mean(vals)) if vals else None


# --- per-fold pipelines -----------------------------------------------------------


@dataclass
class FoldArtifacts:
    """Everything fitted on a fold's training students."""

    skill_models: dict[int, bkt.SkillModel] | None = None
    ability: profile.AbilityModel | None = None
    difficulty: difficulty.DifficultyTable | None = None
    rnn: predictor.RnnModel | None = None
    train_report: predictor.TrainReport | None = None
    birt: baselines.BirtModel | None = None
    pfa: baselines.PfaModel | None = None


def fit_features(train: Dataset, spec: ModelSpec) -> FoldArtifacts:
    """BKT models, ability centroids and difficulty table from training data only."""
    models = bkt.complete_models(bkt.fit_skills(train, spec.grid), train.n_skills)
    art = FoldArtifacts(skill_models=models)
    if spec.blocks.ability:
        vecs = profile.training_vectors(train, spec.window)
        art.ability = profile.fit_kmeans(vecs, k=spec.k_clusters, seed=spec.rnn.seed, init=spec.kmeans_init)
    art.difficulty = difficulty.compute_difficulty(train) if spec.blocks.difficulty else difficulty.DifficultyTable()
    return art


def encode_dataset(data: Dataset, art: FoldArtifacts, spec: ModelSpec) -> list[features.EncodedSequence]:
    mastery = bkt.mastery_features(data, art.skill_models)
    if art.ability is not None:
        labels = profile.profile_sequence(data, art.ability, spec.window)
    else:
        labels = np.full(data.n_records, profile.INITIAL_LABEL)
    seqs = features.build_sequences(data, mastery, labels, art.difficulty or difficulty.DifficultyTable())
    n_ability = spec.k_clusters + 1
    return [features.encode_sequence(s, data.n_skills, spec.blocks, n_ability) for s in seqs]


def run_fold(train: Dataset, test: Dataset, spec: ModelSpec) -> tuple[PredictionSet, FoldArtifacts]:
    """Fit ``spec`` on ``train`` and predict every record of ``test``."""
    if spec.name == "bkt-lstm":
        art = fit_features(train, spec)
        model, report = predictor.train(spec.rnn, encode_dataset(train, art, spec), n_skills=train.n_skills)
        art.rnn, art.train_report = model, report
        predicted = np.concatenate(predictor.predict_many(model, encode_dataset(test, art, spec)) or [np.empty(0)])
    elif spec.name == "dkt":
        art = FoldArtifacts()
        model, report = predictor.train(spec.rnn, baselines.build_dkt_input(train), n_skills=train.n_skills)
        art.rnn, art.train_report = model, report
        predicted = np.concatenate(predictor.predict_many(model, baselines.build_dkt_input(test)) or [np.empty(0)])
    elif spec.name == "bkt":
        models = bkt.complete_models(bkt.fit_skills(train, spec.grid), train.n_skills)
        art = FoldArtifacts(skill_models=models)
        predicted = baselines.predict_bkt_baseline(models, test)
    elif spec.name == "birt":
        art = FoldArtifacts(birt=baselines.fit_birt(train))
        predicted = baselines.predict_birt_dataset(art.birt, test)
    else:
        art = FoldArtifacts(pfa=baselines.fit_pfa(train))
        predicted = baselines.predict_pfa_dataset(art.pfa, test)
    preds = PredictionSet(
        predicted=np.asarray(predicted, dtype=np.float64),
        actual=test.correct.astype(np.float64),
        student=test.student.copy(),
        skill=test.skill.copy(),
    )
    return preds, art


def cross_validate(
    data: Dataset,
    spec: ModelSpec,
    k: int = 5,
    seed: int = 42,
    folds: Sequence[FoldSplit] | None = None,
) -> EvalReport:
    """k-fold student-level evaluation; metrics pooled over each fold's test records."""
    folds = list(folds) if folds is not None else split_folds(data, k, seed)
    report = EvalReport(model=spec.label)
    for fold in folds:
        train, test = data.subset(fold.train_students), data.subset(fold.test_students)
        try:
            preds, _ = run_fold(train, test, spec)
        except Exception as exc:  # a failed fold is reported, the others still count
            logger.exception("fold %d failed for %s", fold.fold_id, spec.label)
            report.failures[fold.fold_id] = f"{type(exc).__name__}: {exc}"
            continue
        a, e, r2 = score(preds)
        extra = {"per_skill_auc": per_skill_auc(preds)} if spec.name == "bkt" else {}
        report.folds.append(FoldResult(fold.fold_id, a, e, r2, len(preds.actual), extra))
    if report.failures:
        warnings.warn(f"{spec.label}: {len(report.failures)} fold(s) failed; aggregating the rest", RuntimeWarning)
    return report


def ablate(
    data: Dataset,
    seed: int = 42,
    spec: ModelSpec | None = None,
    k: int = 5,
    variants: Iterable[int] = (1, 2, 3, 4),
) -> list[EvalReport]:
    """BKT-LSTM-1..4 on identical folds and hyperparameters."""
    spec = spec or ModelSpec()
    folds = split_folds(data, k, seed)
    return [cross_validate(data, replace(spec, name="bkt-lstm", variant=v), folds=folds) for v in variants]


# --- reports -------------------------------------------------------------------------


def _fmt(v: float | None) -> str:
    return "NA" if v is None else f"{v:.3f}"


def report_rows(reports: Iterable[EvalReport]) -> list[tuple[str, str, str, str]]:
    """Machine-readable ``(model, fold, metric, value)`` rows; fold ``mean`` aggregates."""
    rows = []
    for rep in reports:
        for f in rep.folds:
            metrics = {"auc": f.auc, "rmse": f.rmse, "r2": f.r2, **f.extra}
            for name, v in metrics.items():
                rows.append((rep.model, str(f.fold), name, _fmt(v)))
        for name, v in rep.aggregate.items():
            rows.append((rep.model, "mean", name, _fmt(v)))
    return rows


def write_rows(reports: Iterable[EvalReport], fh) -> None:
    w = csv.writer(fh, delimiter="\t", lineterminator="\n")
    w.writerow(["model", "fold", "metric", "value"])
    w.writerows(report_rows(reports))


def format_tables(reports: Sequence[EvalReport], dataset_name: str = "dataset") -> str:
    """One small table per metric; rows are models, columns are folds plus the mean."""
    buf = io.StringIO()
    fold_ids = sorted({f.fold for r in reports for f in r.folds})
    for metric, title in (("auc", "AUC"), ("rmse", "RMSE"), ("r2", "r^2")):
        buf.write(f"{title} ({dataset_name})\n")
        header = ["model"] + [f"fold{i}" for i in fold_ids] + ["mean"]
        buf.write("  ".join(f"{h:>12}" for h in header) + "\n")
        for rep in reports:
            by_fold = {f.fold: getattr(f, metric) for f in rep.folds}
            cells = [rep.model] + [_fmt(by_fold.get(i)) for i in fold_ids] + [_fmt(rep.mean(metric))]
            buf.write("  ".join(f"{c:>12}" for c in cells) + "\n")
        buf.write("\n")
    for rep in reports:
        if "per_skill_auc" in rep.aggregate:
            buf.write(f"{rep.model} per-skill averaged AUC: {_fmt(rep.aggregate['per_skill_auc'])}\n")
        for fold, msg in sorted(rep.failures.items()):
            buf.write(f"{rep.model} fold {fold} failed: {msg}\n")
    return buf.getvalue()
