"""Loss, Adam, the training loop and UA/WA evaluation."""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .seqmodel import Batch, Model
from .tensor import NumericError


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 20
    epochs: int = 200
    l2_coeff: float = 1e-5
    dropout_p: float = 0.2
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 20

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.l2_coeff < 0:
            raise ValueError(f"l2_coeff must be >= 0, got {self.l2_coeff}")


# --- loss ------------------------------------------------------------------


@dataclass
class LossResult:
    loss: float
    logit_grad: np.ndarray
    clamped: int


def cross_entropy_loss(probs: np.ndarray, labels: Sequence[int]) -> LossResult:
    """Mean ``-log probs[t, y_t]`` and its gradient w.r.t. the pre-softmax logits."""
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.intp)
    n, c = probs.shape
    if y.shape != (n,):
        raise T.ShapeError(f"{n} probability rows but {y.shape} labels")
    if n and (y.min() < 0 or y.max() >= c):
        raise ValueError(f"labels outside [0, {c})")
    picked = probs[np.arange(n), y]
    clamped = int((picked < 1e-12).sum())
    loss = float(-np.log(np.maximum(picked, 1e-12)).mean())
    grad = probs.copy()
    grad[np.arange(n), y] -= 1.0
    return LossResult(loss, grad / n, clamped)


# --- Adam ------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> AdamState:
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads, cfg: TrainConfig) -> None:
    """In-place Adam update with L2 folded into the gradient."""
    table = grads.grads if isinstance(grads, T.GradStore) else grads
    for name, g in table.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise T.ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {theta.shape}")
        if cfg.l2_coeff:
            g = g + cfg.l2_coeff * theta
        m = state.m.setdefault(name, np.zeros_like(theta))
        v = state.v.setdefault(name, np.zeros_like(theta))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        theta -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


# --- metrics ---------------------------------------------------------------


@dataclass
class Metrics:
    confusion: np.ndarray  # rows: true class, cols: predicted
    per_class_recall: np.ndarray  # nan where a class has no true samples
    unweighted_accuracy: float
    weighted_accuracy: float

    def to_json(self, class_names: Sequence[str] | None = None) -> dict:
        out = {
            "confusion": self.confusion.tolist(),
            "per_class_recall": [None if math.isnan(r) else float(r) for r in self.per_class_recall],
            "unweighted_accuracy": self.unweighted_accuracy,
            "weighted_accuracy": self.weighted_accuracy,
        }
        if class_names is not None:
            out["classes"] = list(class_names)
        return out


def confusion_matrix(truth: Sequence[int], pred: Sequence[int], n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(truth, dtype=np.intp), np.asarray(pred, dtype=np.intp)), 1)
    return cm


def metrics_from_confusion(cm: np.ndarray) -> Metrics:
    cm = np.asarray(cm, dtype=np.int64)
    support = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        recall = np.where(support > 0, np.diag(cm) / np.maximum(support, 1), np.nan)
    present = support > 0
    ua = float(recall[present].mean()) if present.any() else float("nan")
    total = cm.sum()
    wa = float(np.trace(cm) / total) if total else float("nan")
    return Metrics(cm, recall, ua, wa)


def metrics_from_predictions(truth, pred, n_classes: int) -> Metrics:
    return metrics_from_confusion(confusion_matrix(truth, pred, n_classes))


def predict(model: Model, dialogs, threads: int = 1, chunk: int = 64) -> list[np.ndarray]:
    """Per-dialog probability matrices, dropout off, input order preserved."""
    dialogs = list(dialogs)
    chunks = [dialogs[i:i + chunk] for i in range(0, len(dialogs), chunk)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda c: model.predict_batch(c)[0], chunks))
    else:
        results = [model.predict_batch(c)[0] for c in chunks]
    return [p for r in results for p in r]


def evaluate(model: Model, dialogs, threads: int = 1) -> Metrics:
    """Argmax per utterance (ties go to the lowest class index), then UA/WA."""
    dialogs = list(dialogs)
    if not dialogs:
        raise ValueError("nothing to evaluate")
    probs = predict(model, dialogs, threads)
    pred = np.concatenate([p.argmax(axis=1) for p in probs])
    truth = np.concatenate([d.labels for d in dialogs])
    return metrics_from_predictions(truth, pred, model.config.n_classes)


# --- training --------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    train_ua: float
    val_ua: float
    seconds: float


@dataclass
class TrainResult:
    model: Model
    log: list[EpochLog]
    best_epoch: int
    stopped_early: bool = False


def batch_loss_and_grads(
    model: Model, batch: Batch, dropout_p: float, rng: np.random.Generator | None
) -> tuple[float, T.GradStore]:
    tape = T.Tape()
    pv = tape.watch_all(model.params)
    logits, _ = model.logits(pv, batch, train_mode=rng is not None, rng=rng, dropout_p=dropout_p)
    loss = T.softmax_cross_entropy(logits, batch.labels)
    return float(loss.value[0, 0]), tape.backward(loss)


def train(
    model: Model,
    dialogs,
    cfg: TrainConfig,
    val_dialogs=None,
    track_train_ua: bool = True,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> TrainResult:
    """Mini-batch Adam over whole dialogs; ``model`` is updated in place.

    With ``val_dialogs`` the parameters of the best held-out UA epoch are kept
    and training stops after ``cfg.patience`` epochs without improvement.
    """
    dialogs = list(dialogs)
    if not dialogs:
        raise ValueError("training set is empty")
    order_rng = np.random.default_rng([cfg.seed, 0])
    drop_rng = np.random.default_rng([cfg.seed, 1])
    state = AdamState.for_params(model.params)
    log: list[EpochLog] = []
    best_ua, best_epoch, best_params = -1.0, 0, None
    stale = 0
    stopped = False
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = order_rng.permutation(len(dialogs))
        total_loss, total_utts = 0.0, 0
        for bi, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = Batch.of(dialogs[i] for i in order[start:start + cfg.batch_size])
            loss, grads = batch_loss_and_grads(model, batch, cfg.dropout_p, drop_rng if cfg.dropout_p else None)
            if not math.isfinite(loss):
                raise NumericError(f"loss diverged at epoch {epoch}, batch {bi}")
            adam_step(state, model.params, grads, cfg)
            n = int(sum(batch.lengths))
            total_loss += loss * n
            total_utts += n
        train_ua = evaluate(model, dialogs).unweighted_accuracy if track_train_ua else float("nan")
        val_ua = evaluate(model, val_dialogs).unweighted_accuracy if val_dialogs else float("nan")
        entry = EpochLog(epoch, total_loss / total_utts, train_ua, val_ua, time.perf_counter() - t0)
        log.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        if val_dialogs:
            if val_ua > best_ua:
                best_ua, best_epoch, stale = val_ua, epoch, 0
                best_params = {k: v.copy() for k, v in model.params.items()}
            else:
                stale += 1
                if cfg.patience and stale >= cfg.patience:
                    stopped = True
                    break
    if best_params is not None:
        for k, v in best_params.items():
            model.params[k][...] = v
    else:
        best_epoch = len(log)
    return TrainResult(model, log, best_epoch, stopped)
