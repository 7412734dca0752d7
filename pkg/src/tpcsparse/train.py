"""Supervised pretraining: loss, optimizer, schedule, sampling, metrics, epoch loop."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import model as M
from .errors import ConfigError, LabelError, NumericsError
from .sparse import batch

log = logging.getLogger(__name__)


@dataclass
class OptimConfig:
    lr0: float = 5e-4
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    t_max: int = 13
    eta_min: float = 0.0
    clip_max_norm: float = 1.0
    batch_size: int = 64
    epochs: int = 15
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.lr0 <= 0 or self.weight_decay < 0 or self.adam_eps <= 0:
            raise ConfigError("lr0 and adam_eps must be positive, weight_decay non-negative")
        if self.t_max < 1:
            raise ConfigError("t_max must be >= 1")
        if self.batch_size < 1 or self.epochs < 0 or self.clip_max_norm <= 0:
            raise ConfigError("batch_size >= 1, epochs >= 0 and clip_max_norm > 0 required")
        if not all(0 <= b < 1 for b in self.betas):
            raise ConfigError("betas must lie in [0, 1)")


# --- loss ------------------------------------------------------------------------

def cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean negative log-softmax of the target class and its gradient wrt logits."""
    logits = np.asarray(logits)
    targets = np.asarray(targets, dtype=np.int64)
    n, k = logits.shape
    if len(targets) != n:
        raise LabelError(f"{len(targets)} targets for {n} rows")
    if n and (targets.min() < 0 or targets.max() >= k):
        raise LabelError(f"targets must lie in [0, {k})")
    z = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()
    grad = np.exp(logp)
    grad[rows, targets] -= 1.0
    grad /= n
    return float(loss), grad.astype(logits.dtype)


# --- optimizer -------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, weight_decay: float = 0.0,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """Bias-corrected Adam with L2 weight decay added to the gradient; updates in place.

    Every gradient is checked first, so a non-finite one leaves params and
    state untouched.
    """
    for name in params:
        if name not in grads:
            raise KeyError(f"missing gradient for {name}")
        if grads[name].shape != params[name].shape:
            raise ValueError(f"gradient shape {grads[name].shape} != param shape {params[name].shape} for {name}")
        if not np.all(np.isfinite(grads[name])):
            raise NumericsError(f"non-finite gradient for {name}")
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if weight_decay:
            g = g + weight_decay * p
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


def cosine_lr(t: float, lr0: float = 5e-4, t_max: int = 13, eta_min: float = 0.0) -> float:
    """Cosine annealing stepped per epoch, clamped at ``eta_min`` after ``t_max``."""
    if t < 0:
        raise ValueError("epoch must be non-negative")
    return eta_min + (lr0 - eta_min) * (1.0 + math.cos(math.pi * min(t, t_max) / t_max)) / 2.0


def global_norm(grads) -> float:
    values = grads.values() if isinstance(grads, dict) else grads
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in values))


def clip_grad_norm(grads: dict, max_norm: float = 1.0) -> float:
    """Scale all gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = (grads[k] * scale).astype(grads[k].dtype, copy=False)
    return norm


def weighted_sampler(labels, seed: int, chunk: int = 1024):
    """Endless stream of indices drawn with replacement, P(i) proportional to 1/count(class(i))."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ConfigError("cannot sample from an empty label set")
    counts = np.bincount(labels)
    if np.any(counts == 0):
        raise ConfigError(f"classes {np.flatnonzero(counts == 0).tolist()} have no examples")
    w = 1.0 / counts[labels]
    p = w / w.sum()
    rng = np.random.default_rng([seed, 0x5A3])
    while True:
        yield from rng.choice(len(labels), size=chunk, p=p).tolist()


def stratified_split(labels, val_fraction: float = 0.2, seed: int = 0):
    """Per-class shuffled split; returns sorted ``(train_idx, val_idx)``."""
    labels = np.asarray(labels)
    rng = np.random.default_rng([seed, 0x5917])
    train, val = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_val = int(round(val_fraction * len(idx)))
        val.append(idx[:n_val])
        train.append(idx[n_val:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


# --- metrics -----------------------------------------------------------------------

@dataclass
class MetricsReport:
    accuracy: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    support: list[int]
    macro_f1: float
    weighted_f1: float
    confusion: list[list[int]]

    @property
    def macro_precision(self) -> float:
        return float(np.mean(self.precision))

    @property
    def macro_recall(self) -> float:
        return float(np.mean(self.recall))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["macro_precision"] = self.macro_precision
        d["macro_recall"] = self.macro_recall
        return d


def compute_metrics(preds, targets, k: int) -> MetricsReport:
    preds = np.asarray(preds, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    if preds.shape != targets.shape:
        raise ValueError("preds and targets differ in length")
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (targets, preds), 1)
    tp = np.diag(conf).astype(np.float64)
    pred_tot = conf.sum(axis=0)
    support = conf.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pred_tot > 0, tp / pred_tot, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    n = len(targets)
    return MetricsReport(
        accuracy=float(tp.sum() / n) if n else 0.0,
        precision=precision.tolist(),
        recall=recall.tolist(),
        f1=f1.tolist(),
        support=support.tolist(),
        macro_f1=float(f1.mean()),
        weighted_f1=float((f1 * support).sum() / n) if n else 0.0,
        confusion=conf.tolist(),
    )


# --- loop -------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    accuracy: float
    macro_f1: float
    weighted_f1: float


HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "val_loss", "accuracy", "macro_f1")


def evaluate(state: M.ModelState, events, labels, batch_size: int = 64):
    """Eval-mode mean cross-entropy, predictions and metrics."""
    labels = np.asarray(labels, dtype=np.int64)
    total, preds = 0.0, []
    for i in range(0, len(events), batch_size):
        x = batch(events[i:i + batch_size], state.dtype)
        logits, _ = M.forward(state, x, "eval")
        loss, _ = cross_entropy(logits, labels[i:i + batch_size])
        total += loss * len(logits)
        preds.append(np.argmax(logits, axis=1))
    preds = np.concatenate(preds)
    return total / len(events), preds, compute_metrics(preds, labels, state.config.head_classes)


def train_step(state: M.ModelState, adam: AdamState, x, y, lr: float, cfg: OptimConfig, step: int) -> float:
    logits, _, tape = M.forward(state, x, "train", step=step, return_tape=True)
    loss, g = cross_entropy(logits, y)
    if not math.isfinite(loss):
        raise NumericsError(f"non-finite loss at step {step}")
    grads = M.backward(state, tape, g)
    grads.pop("input")
    clip_grad_norm(grads, cfg.clip_max_norm)
    adam_step(state.params, grads, adam, lr, cfg.weight_decay, cfg.betas, cfg.adam_eps)
    state.buffers.update(tape.bn_updates)
    return loss


def train_loop(state: M.ModelState, train_set, val_set, cfg: OptimConfig, on_epoch=None):
    """Train ``state`` in place; return ``(best_state, history)``.

    ``train_set``/``val_set`` are ``(events, labels)`` with events as
    ``(coords, feats)`` pairs.  The returned state is a copy taken at the
    epoch with the lowest validation loss (earliest on ties).
    """
    train_events, train_labels = train_set
    val_events, val_labels = val_set
    train_labels = np.asarray(train_labels, dtype=np.int64)
    sampler = weighted_sampler(train_labels, cfg.seed)
    adam = AdamState()
    steps_per_epoch = math.ceil(len(train_events) / cfg.batch_size)
    history: list[EpochRecord] = []
    best = state.copy()
    best_loss = math.inf
    step = 0
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.lr0, cfg.t_max, cfg.eta_min)
        losses = []
        remaining = len(train_events)
        for _ in range(steps_per_epoch):
            n = min(cfg.batch_size, remaining)
            remaining -= n
            idx = [next(sampler) for _ in range(n)]
            x = batch([train_events[i] for i in idx], state.dtype)
            try:
                losses.append(train_step(state, adam, x, train_labels[idx], lr, cfg, step))
            except NumericsError as e:
                raise NumericsError(f"epoch {epoch + 1}, step {step}: {e}") from e
            step += 1
        val_loss, _, metrics = evaluate(state, val_events, val_labels, cfg.batch_size)
        rec = EpochRecord(epoch + 1, lr, float(np.mean(losses)), val_loss,
                          metrics.accuracy, metrics.macro_f1, metrics.weighted_f1)
        history.append(rec)
        log.info("epoch %d lr %.3g train %.4f val %.4f acc %.4f f1 %.4f",
                 rec.epoch, lr, rec.train_loss, val_loss, metrics.accuracy, metrics.macro_f1)
        if val_loss < best_loss:
            best_loss = val_loss
            best = state.copy()
            best.meta.update({"best_epoch": rec.epoch, "val_loss": val_loss,
                              "val_accuracy": metrics.accuracy, "val_macro_f1": metrics.macro_f1})
        if on_epoch is not None:
            on_epoch(rec)
    return best, history


def history_csv(history: list[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for r in history:
        w.writerow([r.epoch] + [repr(float(getattr(r, c))) for c in HISTORY_COLUMNS[1:]])
    return buf.getvalue()


def history_json(history: list[EpochRecord], best_state: M.ModelState | None = None) -> str:
    summary = {"epochs": [asdict(r) for r in history]}
    if history:
        best = min(history, key=lambda r: (r.val_loss, r.epoch))
        summary["best"] = asdict(best)
    if best_state is not None:
        summary["checkpoint_meta"] = best_state.meta
    return json.dumps(summary, indent=2, sort_keys=True)
