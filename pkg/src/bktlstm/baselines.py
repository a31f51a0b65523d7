"""Comparison models: Bayesian IRT, PFA, plain BKT and DKT inputs."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .bkt import SkillModel, trace_dataset
from .dataset import Dataset
from .features import EncodedSequence

logger = logging.getLogger(__name__)


NO_ITEM = "<none>"


class FitError(RuntimeError):
    pass


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def _log_sigmoid(x):
    # log(sigmoid(x)) without overflow
    x = np.asarray(x, dtype=np.float64)
    return -np.logaddexp(0.0, -x)


def _item_keys(data: Dataset) -> tuple[np.ndarray, Sequence[str], str]:
    """Problem ids when the dataset has them, skill ids otherwise."""
    if data.has_problems:
        codes = np.where(data.problem >= 0, data.problem, data.n_problems)
        return codes, (*data.problem_ids, NO_ITEM), "problem"
    return data.skill, data.skill_ids, "skill"


# --- Bayesian IRT ----------------------------------------------------------------


@dataclass
class BirtModel:
    theta: dict[str, float]
    beta: dict[str, float]
    item_kind: str = "problem"
    objective_history: list[float] = field(default_factory=list)
    n_sweeps: int = 0
    converged: bool = False


def birt_objective(theta: np.ndarray, beta: np.ndarray, students: np.ndarray, items: np.ndarray, r: np.ndarray) -> float:
    """Log posterior up to a constant, standard normal priors on both blocks."""
    x = theta[students] - beta[items]
    ll = r * _log_sigmoid(x) + (1.0 - r) * _log_sigmoid(-x)
    return float(ll.sum() - 0.5 * (theta @ theta) - 0.5 * (beta @ beta))


def _newton_block(values, owners, other, sign, r, n, max_halvings=20):
    """One Newton step for every coordinate of a block, each with its own halving.

    ``sign`` is +1 for student proficiencies (x = theta - beta) and -1 for
    item difficulties. Coordinates are independent given the other block, so
    each can be accepted or halved separately.
    """

    def local(vals):
        x = sign * (vals[owners] - other)
        ll = r * _log_sigmoid(x) + (1.0 - r) * _log_sigmoid(-x)
        return np.bincount(owners, weights=ll, minlength=n) - 0.5 * vals * vals

    x = sign * (values[owners] - other)
    p = _sigmoid(x)
    grad = sign * np.bincount(owners, weights=r - p, minlength=n) - values
    hess = -np.bincount(owners, weights=p * (1.0 - p), minlength=n) - 1.0
    step = -grad / hess
    before = local(values)
    new = values + step
    pending = np.ones(n, dtype=bool)
    for _ in range(max_halvings + 1):
        after = local(new)
        ok = np.isfinite(new) & np.isfinite(after) & (after >= before)
        pending &= ~ok
        if not pending.any():
            return new
        step = np.where(pending, step * 0.5, step)
        new = np.where(pending, values + step, new)
    # coordinates that never improved stay where they were
    if not np.all(np.isfinite(new[~pending])):
        raise FitError("non-finite BIRT update")
    return np.where(pending, values, new)


def fit_birt(data: Dataset, tol: float = 1e-6, max_sweeps: int = 100) -> BirtModel:
    """MAP fit by alternating per-coordinate Newton sweeps over theta and beta.

    Every attempt enters the likelihood as its own Bernoulli term. Items are
    problems, or skills when the dataset carries no problem identifiers.
    """
    if data.n_records == 0:
        raise FitError("no records")
    item_codes, item_ids, kind = _item_keys(data)
    stu_uniq, students = np.unique(data.student, return_inverse=True)
    it_uniq, items = np.unique(item_codes, return_inverse=True)
    r = data.correct.astype(np.float64)
    theta = np.zeros(len(stu_uniq))
    beta = np.zeros(len(it_uniq))
    history = [birt_objective(theta, beta, students, items, r)]
    converged = False
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        new_theta = _newton_block(theta, students, beta[items], +1.0, r, len(theta))
        new_beta = _newton_block(beta, items, new_theta[students], -1.0, r, len(beta))
        change = max(np.abs(new_theta - theta).max(), np.abs(new_beta - beta).max())
        theta, beta = new_theta, new_beta
        history.append(birt_objective(theta, beta, students, items, r))
        if change < tol:
            converged = True
            break
    return BirtModel(
        theta={data.student_ids[s]: float(v) for s, v in zip(stu_uniq, theta)},
        beta={item_ids[i]: float(v) for i, v in zip(it_uniq, beta)},
        item_kind=kind,
        objective_history=history,
        n_sweeps=sweeps,
        converged=converged,
    )


def predict_birt(model: BirtModel, student: str, item: str | None) -> float:
    """sigmoid(theta - beta); unknown students or items sit at the prior mean 0."""
    th = model.theta.get(student, 0.0)
    be = model.beta.get(item, 0.0) if item is not None else 0.0
    return float(_sigmoid(th - be))


def predict_birt_dataset(model: BirtModel, data: Dataset) -> np.ndarray:
    item_codes, item_ids, _ = _item_keys(data)
    th = np.array([model.theta.get(s, 0.0) for s in data.student_ids])
    be = np.array([model.beta.get(i, 0.0) for i in item_ids])
    return _sigmoid(th[data.student] - be[item_codes])


# --- PFA ---------------------------------------------------------------------------


@dataclass
class PfaModel:
    """``beta`` is per item (or per skill without items); gamma/rho per skill."""

    beta: dict[str, float]
    gamma: dict[str, float]
    rho: dict[str, float]
    item_kind: str = "problem"
    objective_history: list[float] = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False
    grad_norm: float = float("nan")


def prior_counts(data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Successes and failures on the record's skill strictly before each record."""
    succ = np.zeros(data.n_records)
    fail = np.zeros(data.n_records)
    skills, correct = data.skill.tolist(), data.correct.tolist()
    for _, sl in data.student_slices():
        s_cnt: dict[int, int] = {}
        f_cnt: dict[int, int] = {}
        for i in range(sl.start, sl.stop):
            k = skills[i]
            succ[i] = s_cnt.get(k, 0)
            fail[i] = f_cnt.get(k, 0)
            if correct[i]:
                s_cnt[k] = s_cnt.get(k, 0) + 1
            else:
                f_cnt[k] = f_cnt.get(k, 0) + 1
    return succ, fail


@dataclass
class _PfaDesign:
    items: np.ndarray  # dense item index per record
    skills: np.ndarray  # dense skill index per record
    succ: np.ndarray
    fail: np.ndarray
    r: np.ndarray
    n_items: int
    n_skills: int


def pfa_objective(beta, gamma, rho, d: _PfaDesign, l2: float) -> float:
    x = beta[d.items] + gamma[d.skills] * d.succ + rho[d.skills] * d.fail
    ll = d.r * _log_sigmoid(x) + (1.0 - d.r) * _log_sigmoid(-x)
    return float(ll.sum() - 0.5 * l2 * (beta @ beta + gamma @ gamma + rho @ rho))


def _pfa_gradient(beta, gamma, rho, d: _PfaDesign, l2: float):
    x = beta[d.items] + gamma[d.skills] * d.succ + rho[d.skills] * d.fail
    e = d.r - _sigmoid(x)
    gb = np.bincount(d.items, weights=e, minlength=d.n_items) - l2 * beta
    gg = np.bincount(d.skills, weights=e * d.succ, minlength=d.n_skills) - l2 * gamma
    gr = np.bincount(d.skills, weights=e * d.fail, minlength=d.n_skills) - l2 * rho
    return gb, gg, gr, x


def fit_pfa(
    data: Dataset,
    l2: float = 0.01,
    tol: float = 1e-5,
    max_iter: int = 500,
) -> PfaModel:
    """Penalised logistic PFA fit by damped Newton ascent.

    The objective is concave, so each full Newton step is halved until the
    objective does not drop. The item block of the Hessian is diagonal and
    is eliminated first, leaving a (2 * skills)-square system. Stops when the
    gradient norm falls below ``tol`` or after ``max_iter`` steps.
    """
    item_codes, item_ids, kind = _item_keys(data)
    it_uniq, items = np.unique(item_codes, return_inverse=True)
    sk_uniq, skills = np.unique(data.skill, return_inverse=True)
    succ, fail = prior_counts(data)
    d = _PfaDesign(items, skills, succ, fail, data.correct.astype(np.float64), len(it_uniq), len(sk_uniq))
    beta = np.zeros(d.n_items)
    gamma = np.zeros(d.n_skills)
    rho = np.zeros(d.n_skills)
    obj = pfa_objective(beta, gamma, rho, d, l2)
    history = [obj]
    converged = False
    gnorm = float("nan")
    it = 0
    for it in range(max_iter + 1):
        gb, gg, gr, x = _pfa_gradient(beta, gamma, rho, d, l2)
        gnorm = math.sqrt(float(gb @ gb + gg @ gg + gr @ gr))
        if gnorm < tol:
            converged = True
            break
        if it == max_iter:
            break
        db, dg, dr = _pfa_newton_direction(d, x, gb, gg, gr, l2)
        t = 1.0
        for _ in range(40):
            cand = (beta + t * db, gamma + t * dg, rho + t * dr)
            new_obj = pfa_objective(*cand, d, l2)
            if math.isfinite(new_obj) and new_obj >= obj:
                break
            t *= 0.5
        else:
            logger.warning("PFA line search stalled at gradient norm %.3g", gnorm)
            break
        beta, gamma, rho = cand
        obj = new_obj
        history.append(obj)
    return PfaModel(
        beta={item_ids[i]: float(v) for i, v in zip(it_uniq, beta)},
        gamma={data.skill_ids[k]: float(v) for k, v in zip(sk_uniq, gamma)},
        rho={data.skill_ids[k]: float(v) for k, v in zip(sk_uniq, rho)},
        item_kind=kind,
        objective_history=history,
        n_iter=it,
        converged=converged,
        grad_norm=gnorm,
    )


def _pfa_newton_direction(d: _PfaDesign, x, gb, gg, gr, l2):
    """Solve (J'WJ + l2 I) delta = grad by eliminating the diagonal item block."""
    p = _sigmoid(x)
    w = p * (1.0 - p)
    K = d.n_skills
    D = np.bincount(d.items, weights=w, minlength=d.n_items) + l2
    # item-skill coupling, one row per distinct (item, skill) pair
    pairs, inv = np.unique(d.items * K + d.skills, return_inverse=True)
    pi, ps = pairs // K, pairs % K
    cg = np.bincount(inv, weights=w * d.succ, minlength=len(pairs))
    cr = np.bincount(inv, weights=w * d.fail, minlength=len(pairs))

    M = np.zeros((2 * K, 2 * K))
    ks = np.arange(K)
    M[2 * ks, 2 * ks] = np.bincount(d.skills, weights=w * d.succ * d.succ, minlength=K) + l2
    M[2 * ks + 1, 2 * ks + 1] = np.bincount(d.skills, weights=w * d.fail * d.fail, minlength=K) + l2
    off = np.bincount(d.skills, weights=w * d.succ * d.fail, minlength=K)
    M[2 * ks, 2 * ks + 1] = off
    M[2 * ks + 1, 2 * ks] = off

    per_item = np.bincount(pi, minlength=d.n_items)
    single = per_item[pi] == 1
    sd = D[pi[single]]
    sg, sr, sk = cg[single], cr[single], ps[single]
    np.add.at(M, (2 * sk, 2 * sk), -sg * sg / sd)
    np.add.at(M, (2 * sk + 1, 2 * sk + 1), -sr * sr / sd)
    np.add.at(M, (2 * sk, 2 * sk + 1), -sg * sr / sd)
    np.add.at(M, (2 * sk + 1, 2 * sk), -sg * sr / sd)
    for i in np.flatnonzero(per_item > 1):
        rows = np.flatnonzero(pi == i)
        cols = np.concatenate([2 * ps[rows], 2 * ps[rows] + 1])
        v = np.concatenate([cg[rows], cr[rows]])
        M[np.ix_(cols, cols)] -= np.outer(v, v) / D[i]

    scaled = gb[pi] / D[pi]
    rhs = np.empty(2 * K)
    rhs[0::2] = gg - np.bincount(ps, weights=cg * scaled, minlength=K)
    rhs[1::2] = gr - np.bincount(ps, weights=cr * scaled, minlength=K)
    ds = np.linalg.solve(M, rhs)
    dg, dr = ds[0::2], ds[1::2]
    coupled = np.bincount(pi, weights=cg * dg[ps] + cr * dr[ps], minlength=d.n_items)
    return (gb - coupled) / D, dg, dr


def predict_pfa(model: PfaModel, item: str | None, skill: str, successes: float, failures: float) -> float:
    b = model.beta.get(item, 0.0) if item is not None else 0.0
    x = b + model.gamma.get(skill, 0.0) * successes + model.rho.get(skill, 0.0) * failures
    return float(_sigmoid(x))


def predict_pfa_dataset(model: PfaModel, data: Dataset) -> np.ndarray:
    item_codes, item_ids, _ = _item_keys(data)
    be = np.array([model.beta.get(i, 0.0) for i in item_ids])
    ga = np.array([model.gamma.get(k, 0.0) for k in data.skill_ids] + [0.0])
    rh = np.array([model.rho.get(k, 0.0) for k in data.skill_ids] + [0.0])
    succ, fail = prior_counts(data)
    return _sigmoid(be[item_codes] + ga[data.skill] * succ + rh[data.skill] * fail)


# --- BKT and DKT -----------------------------------------------------------------


def predict_bkt_baseline(models: Mapping[int, SkillModel], data: Dataset) -> np.ndarray:
    """Per-record correctness predictions from each record's own skill model."""
    return trace_dataset(data, models)[1]


def build_dkt_input(data: Dataset) -> list[EncodedSequence]:
    """One-hot of the previous (skill, response): incorrect block first, then correct.

    The first step of each student gets an all-zero input.
    """
    M = data.n_skills
    out = []
    for sid, sl in data.student_slices():
        skills = data.skill[sl].astype(np.int64)
        targets = data.correct[sl].astype(np.int64)
        X = np.zeros((len(skills), 2 * M))
        if len(skills) > 1:
            X[np.arange(1, len(skills)), skills[:-1] + M * targets[:-1]] = 1.0
        out.append(EncodedSequence(sid, X, skills, targets))
    return out


# --- serialisation -----------------------------------------------------------------


def save_birt(model: BirtModel, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["table", "id", "value"])
        for name, table in (("theta", model.theta), ("beta", model.beta)):
            for key, v in table.items():
                w.writerow([name, key, f"{v:.17g}"])


def save_pfa(model: PfaModel, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["table", "id", "value"])
        for name, table in (("beta", model.beta), ("gamma", model.gamma), ("rho", model.rho)):
            for key, v in table.items():
                w.writerow([name, key, f"{v:.17g}"])


def load_labeled_table(path: str | Path) -> dict[str, dict[str, float]]:
    tables: dict[str, dict[str, float]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            tables.setdefault(row["table"], {})[row["id"]] = float(row["value"])
    return tables
