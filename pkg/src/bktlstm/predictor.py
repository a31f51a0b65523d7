"""Recurrent correctness predictor with exact backpropagation through time.

Two cells share one interface:

* ``simple``: ``h_t = tanh(W_hx f_t + W_hh h_{t-1} + b_h)``
* ``gated``:  an LSTM cell; the gate blocks are stacked in the weight
  matrices in the order input, forget, output, candidate.

Both emit ``y_t = sigmoid(W_yh drop(h_t) + b_y)`` with one output per skill.
Dropout touches only the copy of ``h_t`` that feeds the output layer.
Everything runs in float64 on the CPU.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .features import EncodedSequence
from .metrics import auc

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-9
PARAM_NAMES = ("input_weights", "recurrent_weights", "hidden_bias", "output_weights", "output_bias")


@dataclass(frozen=True)
class RnnConfig:
    hidden_size: int = 200
    learning_rate: float = 0.01
    batch_size: int = 32
    epochs: int = 100
    dropout_rate: float = 0.5
    cell: str = "gated"
    seed: int = 42
    max_grad_norm: float = 5.0
    max_seq_len: int = 500

    def __post_init__(self):
        if self.hidden_size < 1 or self.batch_size < 1 or self.max_seq_len < 1:
            raise ValueError("hidden_size, batch_size and max_seq_len must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.cell not in ("gated", "simple"):
            raise ValueError(f"unknown cell {self.cell!r}")


@dataclass(eq=False)
class RnnModel:
    config: RnnConfig
    input_weights: np.ndarray  # (G*H, D), G = 4 for gated, 1 for simple
    recurrent_weights: np.ndarray  # (G*H, H)
    hidden_bias: np.ndarray  # (G*H,)
    output_weights: np.ndarray  # (S, H)
    output_bias: np.ndarray  # (S,)

    @property
    def input_size(self) -> int:
        return self.input_weights.shape[1]

    @property
    def hidden_size(self) -> int:
        return self.recurrent_weights.shape[1]

    @property
    def n_skills(self) -> int:
        return self.output_weights.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> RnnModel:
        return RnnModel(self.config, **{k: v.copy() for k, v in self.params().items()})


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    validation_auc: list[float | None] = field(default_factory=list)
    best_epoch: int | None = None
    wall_time: float = 0.0
    diverged: bool = False


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, report: TrainReport):
        super().__init__(message)
        self.report = report


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def init_model(config: RnnConfig, input_size: int, n_skills: int, rng: np.random.Generator | None = None) -> RnnModel:
    """Uniform initialisation in +-1/sqrt(fan_in)."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    H = config.hidden_size
    G = 4 if config.cell == "gated" else 1
    a = 1.0 / math.sqrt(input_size + H)
    b = 1.0 / math.sqrt(H)
    return RnnModel(
        config=config,
        input_weights=rng.uniform(-a, a, (G * H, input_size)),
        recurrent_weights=rng.uniform(-a, a, (G * H, H)),
        hidden_bias=rng.uniform(-a, a, G * H),
        output_weights=rng.uniform(-b, b, (n_skills, H)),
        output_bias=rng.uniform(-b, b, n_skills),
    )


# --- batched core ------------------------------------------------------------


@dataclass
class _Batch:
    inputs: np.ndarray  # (T, B, D)
    skills: np.ndarray  # (T, B)
    targets: np.ndarray  # (T, B)
    mask: np.ndarray  # (T, B)


def _make_batch(seqs: Sequence[EncodedSequence], input_size: int) -> _Batch:
    T = max(len(s) for s in seqs)
    B = len(seqs)
    X = np.zeros((T, B, input_size))
    skills = np.zeros((T, B), dtype=np.int64)
    targets = np.zeros((T, B))
    mask = np.zeros((T, B))
    for b, s in enumerate(seqs):
        n = len(s)
        if s.inputs.shape[1] != input_size:
            raise ValueError(f"encoded width {s.inputs.shape[1]} != model input size {input_size}")
        X[:n, b] = s.inputs
        skills[:n, b] = s.skills
        targets[:n, b] = s.targets
        mask[:n, b] = 1.0
    return _Batch(X, skills, targets, mask)


def _recur(model: RnnModel, X: np.ndarray):
    """Run the cell over ``X`` (T, B, D); returns hidden states and a cache."""
    T, B, _ = X.shape
    H = model.hidden_size
    pre = X @ model.input_weights.T + model.hidden_bias
    Wh_T = model.recurrent_weights.T
    hs = np.empty((T, B, H))
    h = np.zeros((B, H))
    if model.config.cell == "simple":
        for t in range(T):
            h = np.tanh(pre[t] + h @ Wh_T)
            hs[t] = h
        return hs, None
    gates = np.empty((T, B, 4 * H))
    cs = np.empty((T, B, H))
    tcs = np.empty((T, B, H))
    c = np.zeros((B, H))
    for t in range(T):
        z = pre[t] + h @ Wh_T
        gt = gates[t]
        gt[:, : 3 * H] = _sigmoid(z[:, : 3 * H])
        gt[:, 3 * H :] = np.tanh(z[:, 3 * H :])
        c = gt[:, H : 2 * H] * c + gt[:, :H] * gt[:, 3 * H :]
        cs[t] = c
        tcs[t] = np.tanh(c)
        h = gt[:, 2 * H : 3 * H] * tcs[t]
        hs[t] = h
    return hs, (gates, cs, tcs)


def _batch_outputs(model: RnnModel, hs: np.ndarray, skills: np.ndarray, drop: np.ndarray | None):
    hd = hs if drop is None else hs * drop
    w = model.output_weights[skills]  # (T, B, H)
    logits = np.einsum("tbh,tbh->tb", hd, w) + model.output_bias[skills]
    return _sigmoid(logits), hd, w


def _nll(p: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> float:
    pc = np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    ll = targets * np.log(pc) + (1.0 - targets) * np.log(1.0 - pc)
    return float(-(ll * mask).sum())


def _backward(model: RnnModel, batch: _Batch, hs, cache, p, hd, w, drop, scale: float) -> dict[str, np.ndarray]:
    T, B, D = batch.inputs.shape
    H = model.hidden_size
    S = model.n_skills
    dlogit = (p - batch.targets) * batch.mask * scale  # (T, B)

    flat_sk = batch.skills.ravel()
    d_by = np.bincount(flat_sk, weights=dlogit.ravel(), minlength=S)
    d_Wy = np.zeros((S, H))
    np.add.at(d_Wy, flat_sk, (dlogit[..., None] * hd).reshape(-1, H))
    dh_out = dlogit[..., None] * w
    if drop is not None:
        dh_out = dh_out * drop

    Wh = model.recurrent_weights
    GH = Wh.shape[0]
    dz_all = np.empty((T, B, GH))
    dh_next = np.zeros((B, H))
    if cache is None:
        for t in range(T - 1, -1, -1):
            dh = dh_out[t] + dh_next
            dz = dh * (1.0 - hs[t] ** 2)
            dz_all[t] = dz
            dh_next = dz @ Wh
    else:
        gates, cs, tcs = cache
        dc_next = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            g = gates[t]
            i, f, o, cand = g[:, :H], g[:, H : 2 * H], g[:, 2 * H : 3 * H], g[:, 3 * H :]
            dh = dh_out[t] + dh_next
            dc = dh * o * (1.0 - tcs[t] ** 2) + dc_next
            c_prev = cs[t - 1] if t > 0 else np.zeros((B, H))
            dz = dz_all[t]
            dz[:, :H] = dc * cand * i * (1.0 - i)
            dz[:, H : 2 * H] = dc * c_prev * f * (1.0 - f)
            dz[:, 2 * H : 3 * H] = dh * tcs[t] * o * (1.0 - o)
            dz[:, 3 * H :] = dc * i * (1.0 - cand**2)
            dc_next = dc * f
            dh_next = dz @ Wh

    h_prev = np.concatenate([np.zeros((1, B, H)), hs[:-1]], axis=0)
    dz_flat = dz_all.reshape(-1, GH)
    return {
        "input_weights": dz_flat.T @ batch.inputs.reshape(-1, D),
        "recurrent_weights": dz_flat.T @ h_prev.reshape(-1, H),
        "hidden_bias": dz_flat.sum(axis=0),
        "output_weights": d_Wy,
        "output_bias": d_by,
    }


def _dropout_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray | None:
    if rate <= 0.0:
        return None
    return (rng.random(shape) >= rate) / (1.0 - rate)


# --- public single-sequence operations ------------------------------------------


def _as_inputs(sequence) -> np.ndarray:
    return sequence.inputs if isinstance(sequence, EncodedSequence) else np.asarray(sequence, dtype=np.float64)


def forward(model: RnnModel, sequence, train_mode: bool = False, seed: int | None = None):
    """Hidden states (T, H) and full output vectors y_t (T, S) for one sequence."""
    X = _as_inputs(sequence)
    if X.ndim != 2 or X.shape[1] != model.input_size:
        raise ValueError(f"expected inputs of shape (T, {model.input_size}), got {X.shape}")
    hs, _ = _recur(model, X[:, None, :])
    hs = hs[:, 0, :]
    hd = hs
    if train_mode:
        mask = _dropout_mask(np.random.default_rng(seed), hs.shape, model.config.dropout_rate)
        if mask is not None:
            hd = hs * mask
    return hs, _sigmoid(hd @ model.output_weights.T + model.output_bias)


def loss(outputs: np.ndarray, sequence: EncodedSequence, reduction: str = "mean") -> float:
    """Cross-entropy of ``outputs[t, skill_t]`` against the targets.

    ``reduction="sum"`` gives the negated log-likelihood total; ``"mean"``
    divides it by the number of steps.
    """
    p = outputs[np.arange(len(sequence)), sequence.skills]
    total = _nll(p, sequence.targets.astype(np.float64), np.ones(len(sequence)))
    if reduction == "sum":
        return total
    return total / max(len(sequence), 1)


def backward(model: RnnModel, sequence: EncodedSequence, dropout_mask: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Exact gradient of the summed loss for one sequence.

    ``dropout_mask`` (T, H), when given, is applied exactly as in training.
    """
    batch = _make_batch([sequence], model.input_size)
    hs, cache = _recur(model, batch.inputs)
    drop = None if dropout_mask is None else dropout_mask[:, None, :]
    p, hd, w = _batch_outputs(model, hs, batch.skills, drop)
    return _backward(model, batch, hs, cache, p, hd, w, drop, 1.0)


def predict(model: RnnModel, sequence: EncodedSequence) -> np.ndarray:
    """Probability of a correct answer at each step, dropout off."""
    _, y = forward(model, sequence)
    return y[np.arange(len(sequence)), sequence.skills]


def predict_many(model: RnnModel, sequences: Sequence[EncodedSequence], batch_size: int = 256) -> list[np.ndarray]:
    out = []
    for a in range(0, len(sequences), batch_size):
        chunk = sequences[a : a + batch_size]
        batch = _make_batch(chunk, model.input_size)
        hs, _ = _recur(model, batch.inputs)
        p, _, _ = _batch_outputs(model, hs, batch.skills, None)
        out.extend(p[: len(s), b].copy() for b, s in enumerate(chunk))
    return out


# --- training ------------------------------------------------------------------


def _chunks(seqs: Sequence[EncodedSequence], max_len: int) -> list[EncodedSequence]:
    out = []
    for s in seqs:
        if len(s) == 0:
            continue
        for a in range(0, len(s), max_len):
            out.append(EncodedSequence(s.student_id, s.inputs[a : a + max_len], s.skills[a : a + max_len], s.targets[a : a + max_len]))
    return out


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


def train(
    config: RnnConfig,
    train_sequences: Sequence[EncodedSequence],
    validation_sequences: Sequence[EncodedSequence] | None = None,
    n_skills: int | None = None,
) -> tuple[RnnModel, TrainReport]:
    """Mini-batch SGD on the summed cross-entropy per batch, divided by the
    number of sequences in the batch.

    Initialisation, batch order and dropout masks all come from one
    generator seeded with ``config.seed``.
    """
    seqs = _chunks(train_sequences, config.max_seq_len)
    if not seqs:
        raise ValueError("training set is empty")
    input_size = seqs[0].inputs.shape[1]
    if n_skills is None:
        n_skills = 1 + max(int(s.skills.max()) for s in seqs)
        if validation_sequences:
            n_skills = max(n_skills, 1 + max(int(s.skills.max()) for s in validation_sequences if len(s)))
    rng = np.random.default_rng(config.seed)
    model = init_model(config, input_size, n_skills, rng)
    report = TrainReport()
    started = time.perf_counter()
    n_steps = sum(len(s) for s in seqs)
    best = -1.0
    for epoch in range(config.epochs):
        order = rng.permutation(len(seqs))
        total = 0.0
        for a in range(0, len(seqs), config.batch_size):
            batch = _make_batch([seqs[i] for i in order[a : a + config.batch_size]], input_size)
            T, B, _ = batch.inputs.shape
            hs, cache = _recur(model, batch.inputs)
            drop = _dropout_mask(rng, hs.shape, config.dropout_rate)
            p, hd, w = _batch_outputs(model, hs, batch.skills, drop)
            batch_loss = _nll(p, batch.targets, batch.mask)
            if not math.isfinite(batch_loss):
                report.diverged = True
                report.wall_time = time.perf_counter() - started
                raise TrainingDiverged(f"non-finite loss in epoch {epoch + 1}", report)
            total += batch_loss
            grads = _backward(model, batch, hs, cache, p, hd, w, drop, 1.0 / B)
            clip_gradients(grads, config.max_grad_norm)
            if config.learning_rate:
                for name, g in grads.items():
                    getattr(model, name).__isub__(config.learning_rate * g)
        report.epoch_losses.append(total / n_steps)
        if validation_sequences:
            preds = predict_many(model, validation_sequences)
            score = auc(np.concatenate(preds), np.concatenate([s.targets for s in validation_sequences]))
            report.validation_auc.append(score)
            if score is not None and score > best:
                best, report.best_epoch = score, epoch + 1
        logger.debug("epoch %d loss %.5f", epoch + 1, report.epoch_losses[-1])
    report.wall_time = time.perf_counter() - started
    return model, report


# --- checkpoints ---------------------------------------------------------------


def save_checkpoint(model: RnnModel, path: str | Path) -> None:
    meta = {"config": asdict(model.config), "input_size": model.input_size, "n_skills": model.n_skills}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **model.params())


def load_checkpoint(path: str | Path) -> RnnModel:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        arrays = {name: z[name].copy() for name in PARAM_NAMES}
    return RnnModel(RnnConfig(**meta["config"]), **arrays)


def with_config(model: RnnModel, **changes) -> RnnModel:
    return RnnModel(replace(model.config, **changes), **model.params())
