"""Latent-space analysis: linear SVM probes, PCA, naive baseline, comparison reports."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .errors import DegenerateData, ShapeError, TaskError
from .events import FeatureConfig, labels_of, prepare
from .train import MetricsReport, compute_metrics, stratified_split

log = logging.getLogger(__name__)

TASKS = ("gadget-3class", "attpc-tracks")
TASK_DETECTOR = {"gadget-3class": "gadget", "attpc-tracks": "attpc"}
PREDICTORS = ("train", "rand", "naive")


@dataclass
class EmbeddingSet:
    X: np.ndarray
    labels: np.ndarray
    task: str = ""
    source: str = ""
    event_ids: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.X.ndim != 2 or len(self.X) != len(self.labels):
            raise ShapeError(f"embedding matrix {self.X.shape} vs {len(self.labels)} labels")
        if not np.isfinite(self.X).all():
            raise ValueError("embeddings contain non-finite values")

    def subset(self, idx) -> "EmbeddingSet":
        ids = None if self.event_ids is None else self.event_ids[idx]
        return EmbeddingSet(self.X[idx], self.labels[idx], self.task, self.source, ids)


# --- linear probe ---------------------------------------------------------------------

@dataclass
class LinearProbe:
    classes: np.ndarray
    weights: np.ndarray  # (D, K) in standardized units
    bias: np.ndarray  # (K,)
    mean: np.ndarray
    scale: np.ndarray
    C: float
    iterations: int
    trace: list[float] = field(default_factory=list)

    def scores(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != len(self.mean):
            raise ShapeError(f"probe expects {len(self.mean)} features, got {X.shape}")
        return ((X - self.mean) / self.scale) @ self.weights + self.bias

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.scores(X), axis=1)]


def fit_probe(train: EmbeddingSet, C: float = 1.0, seed: int = 0, tol: float = 1e-6,
              max_iter: int = 20_000) -> LinearProbe:
    """One-vs-rest linear SVM by full-batch subgradient descent.

    Each class minimizes ``||w||^2 / (2C) + mean(max(0, 1 - t (w.x + b)))``
    on z-scored features with step ``C / t``; the iterate with the lowest
    objective is kept.  Stops when every class's subgradient norm drops
    below ``tol`` or after ``max_iter`` steps.  Deterministic: ``seed``
    is accepted for interface symmetry but the solver draws no randomness.
    """
    del seed
    classes = np.unique(train.labels)
    if len(classes) < 2:
        raise TaskError(f"probe needs at least two classes, got {classes.tolist()}")
    X = np.asarray(train.X, dtype=np.float64)
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    Xs = (X - mean) / scale
    n, d = Xs.shape
    k = len(classes)
    T = np.where(train.labels[:, None] == classes[None, :], 1.0, -1.0)
    lam = 1.0 / C
    W = np.zeros((d, k))
    b = np.zeros(k)
    best_W, best_b = W.copy(), b.copy()
    best_obj = np.full(k, np.inf)
    trace = []
    it = 0
    for it in range(1, max_iter + 1):
        margin = T * (Xs @ W + b)
        hinge = np.maximum(0.0, 1.0 - margin)
        obj = 0.5 * lam * np.einsum("dk,dk->k", W, W) + hinge.mean(axis=0)
        better = obj < best_obj
        if better.any():
            best_obj = np.where(better, obj, best_obj)
            best_W[:, better] = W[:, better]
            best_b[better] = b[better]
        if it == 1 or it % 1000 == 0:
            trace.append(float(obj.sum()))
        active = (margin < 1.0) * T
        gW = lam * W - (Xs.T @ active) / n
        gb = -active.mean(axis=0)
        gnorm = np.sqrt(np.einsum("dk,dk->k", gW, gW) + gb * gb)
        if np.all(gnorm < tol):
            break
        eta = 1.0 / (lam * it)
        W -= eta * gW
        b -= eta * gb
    trace.append(float(best_obj.sum()))
    return LinearProbe(classes, best_W, best_b, mean, scale, C, it, trace)


def eval_probe(probe: LinearProbe, test: EmbeddingSet, k: int | None = None) -> MetricsReport:
    k = k or int(max(probe.classes.max(), test.labels.max())) + 1
    return compute_metrics(probe.predict(test.X), test.labels, k)


def naive_baseline(labels_train, labels_test, k: int | None = None) -> MetricsReport:
    """Always predict the training mode (lowest class on ties)."""
    labels_train = np.asarray(labels_train, dtype=np.int64)
    labels_test = np.asarray(labels_test, dtype=np.int64)
    if len(labels_train) == 0 or len(labels_test) == 0:
        raise TaskError("naive baseline needs non-empty label sets")
    mode = int(np.argmax(np.bincount(labels_train)))
    k = k or int(max(labels_train.max(), labels_test.max(), mode)) + 1
    return compute_metrics(np.full(len(labels_test), mode), labels_test, k)


# --- PCA ------------------------------------------------------------------------------

@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (n_components, D), orthonormal rows
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray


def fit_pca(X, n_components: int = 2) -> PcaModel:
    """Covariance eigendecomposition; each component's largest-|.| entry is made positive."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) < 2:
        raise DegenerateData("PCA needs at least two rows")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (len(X) - 1)
    total = float(np.trace(cov))
    if total <= 0:
        raise DegenerateData("all rows are identical")
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:n_components]
    vals = np.clip(vals[order], 0.0, None)
    comps = vecs[:, order].T.copy()
    for c in comps:
        if c[np.argmax(np.abs(c))] < 0:
            c *= -1
    if len(comps) < n_components:
        pad = np.zeros((n_components - len(comps), X.shape[1]))
        comps = np.vstack([comps, pad])
        vals = np.r_[vals, np.zeros(len(pad))]
    return PcaModel(mean, comps, vals, vals / total)


def project(pca: PcaModel, X) -> np.ndarray:
    return (np.asarray(X, dtype=np.float64) - pca.mean) @ pca.components.T


def reconstruct(pca: PcaModel, Z) -> np.ndarray:
    return np.asarray(Z) @ pca.components + pca.mean


# --- suite -------------------------------------------------------------------------------

def task_labels(task: str, events) -> tuple[list, np.ndarray]:
    """Events that take part in ``task`` and their class labels."""
    if task == "gadget-3class":
        keep = [e for e in events if e.class3 >= 0]
        return keep, labels_of(keep, "class3")
    if task == "attpc-tracks":
        return list(events), labels_of(events, "group")
    raise TaskError(f"unknown task {task!r}; expected one of {TASKS}")


@dataclass
class ProbeCell:
    model: str
    task: str
    metrics: MetricsReport
    pca: np.ndarray  # (N, 3): pca1, pca2, label
    explained_variance_ratio: list[float]


@dataclass
class SuiteReport:
    cells: dict[tuple[str, str], ProbeCell]
    naive: dict[str, MetricsReport]
    n_train: dict[str, int]
    n_test: dict[str, int]

    def table(self) -> list[dict]:
        rows = []
        for task in [t for t in TASKS if t in self.naive]:
            # train, rand, any other tags alphabetically, naive last
            tags = {m for m, t in self.cells if t == task}
            order = [p for p in PREDICTORS[:2] if p in tags] + sorted(tags - set(PREDICTORS)) + ["naive"]
            for pred in order:
                m = self.naive[task] if pred == "naive" else self.cells[(pred, task)].metrics
                rows.append({"task": task, "predictor": pred, "accuracy": m.accuracy,
                             "f1_macro": m.macro_f1, "f1_weighted": m.weighted_f1})
        return rows

    def to_json(self) -> str:
        out = {
            "table": self.table(),
            "details": {
                f"{m}/{t}": {"metrics": c.metrics.to_dict(), "pca_explained_variance_ratio": c.explained_variance_ratio}
                for (m, t), c in sorted(self.cells.items())
            },
            "naive": {t: m.to_dict() for t, m in sorted(self.naive.items())},
            "split": {t: {"train": self.n_train[t], "test": self.n_test[t]} for t in sorted(self.n_train)},
        }
        return json.dumps(out, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "predictor", "accuracy", "f1_macro", "f1_weighted"])
        for r in self.table():
            w.writerow([r["task"], r["predictor"], f"{r['accuracy']:.6f}", f"{r['f1_macro']:.6f}",
                        f"{r['f1_weighted']:.6f}"])
        return buf.getvalue()


def pca_csv(cell: ProbeCell) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pca1", "pca2", "label"])
    for p1, p2, lab in cell.pca:
        w.writerow([repr(float(p1)), repr(float(p2)), int(lab)])
    return buf.getvalue()


def probe_cell(emb: EmbeddingSet, model_tag: str, task: str, C: float = 1.0, seed: int = 0,
               max_iter: int = 20_000, test_fraction: float = 0.2):
    train_idx, test_idx = stratified_split(emb.labels, test_fraction, seed)
    k = int(emb.labels.max()) + 1
    probe = fit_probe(emb.subset(train_idx), C=C, seed=seed, max_iter=max_iter)
    metrics = eval_probe(probe, emb.subset(test_idx), k)
    pca = fit_pca(emb.X)
    Z = project(pca, emb.X)
    cell = ProbeCell(model_tag, task, metrics, np.column_stack([Z, emb.labels]),
                     pca.explained_variance_ratio.tolist())
    naive = naive_baseline(emb.labels[train_idx], emb.labels[test_idx], k)
    return cell, naive, len(train_idx), len(test_idx)


def run_probe_suite(models: dict[str, M.ModelState], datasets: dict[str, list], tasks=TASKS,
                    fcfg: FeatureConfig | None = None, C: float = 1.0, seed: int = 0,
                    max_iter: int = 20_000, threads: int = 1, embeddings: dict | None = None,
                    test_fraction: float = 0.2) -> SuiteReport:
    """Embed, split train/test (stratified, 80/20 by default), probe and project every (model, task) cell.

    ``datasets`` maps detector name (``gadget``/``attpc``) to events.
    ``embeddings`` may supply precomputed ``EmbeddingSet`` keyed by
    ``(model_tag, task)``; those cells skip the encoder.
    """
    embeddings = dict(embeddings or {})
    cells, naive, n_train, n_test = {}, {}, {}, {}
    for task in tasks:
        if task not in TASK_DETECTOR:
            raise TaskError(f"unknown task {task!r}; expected one of {TASKS}")
        tags = sorted({m for m, t in embeddings if t == task} | set(models))
        for tag in tags:
            try:
                emb = embeddings.get((tag, task))
                if emb is None:
                    det = TASK_DETECTOR[task]
                    if det not in datasets:
                        raise TaskError(f"task {task} needs {det} events")
                    events, labels = task_labels(task, datasets[det])
                    state = models[tag]
                    f = fcfg or FeatureConfig.from_dict(state.meta.get("features"))
                    X = M.embed(state, prepare(events, f, threads), threads=threads)
                    emb = EmbeddingSet(X, labels, task, tag, np.array([e.event_id for e in events]))
                cell, nv, ntr, nte = probe_cell(emb, tag, task, C, seed, max_iter, test_fraction)
            except TaskError as e:
                raise TaskError(f"[{tag} / {task}] {e}") from e
            cells[(tag, task)] = cell
            naive[task], n_train[task], n_test[task] = nv, ntr, nte
            log.info("%s / %s: accuracy %.3f macro-F1 %.3f", tag, task, cell.metrics.accuracy, cell.metrics.macro_f1)
    return SuiteReport(cells, naive, n_train, n_test)


_PALETTE = ("#8c564b", "#9ecae1", "#08519c", "#31a354", "#e6550d", "#756bb1")


def pca_svg(cell: ProbeCell, names=None, size: int = 480) -> str:
    """Minimal scatter plot of the two components, coloured by label."""
    Z = cell.pca
    pad = 40
    lo = Z[:, :2].min(axis=0)
    hi = Z[:, :2].max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    xy = pad + (Z[:, :2] - lo) / span * (size - 2 * pad)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
             '<rect width="100%" height="100%" fill="white"/>',
             f'<text x="{size / 2}" y="20" text-anchor="middle" font-size="14">{cell.model} / {cell.task}</text>',
             f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="12">PCA1</text>',
             f'<text x="12" y="{size / 2}" font-size="12" transform="rotate(-90 12 {size / 2})">PCA2</text>']
    for (x, y), lab in zip(xy, Z[:, 2].astype(int)):
        parts.append(f'<circle cx="{x:.2f}" cy="{size - y:.2f}" r="2" fill="{_PALETTE[lab % len(_PALETTE)]}" '
                     f'fill-opacity="0.7"/>')
    for i, lab in enumerate(np.unique(Z[:, 2].astype(int))):
        label = names[lab] if names and lab < len(names) else str(lab)
        parts.append(f'<rect x="{size - 130}" y="{30 + 16 * i}" width="10" height="10" '
                     f'fill="{_PALETTE[lab % len(_PALETTE)]}"/>')
        parts.append(f'<text x="{size - 115}" y="{39 + 16 * i}" font-size="11">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts)
