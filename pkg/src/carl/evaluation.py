"""Linear probes, embedding geometry and PCA export for frozen embeddings."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError, DataError, DegenerateTargetError, UndefinedCorrelationError

log = logging.getLogger(__name__)

MAX_POSITIVE_PAIRS = 10_000


@dataclass
class ProbeReport:
    task: str
    mae: float | None = None
    pearson_r: float | None = None
    spearman_rho: float | None = None
    accuracy: float | None = None
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class GeometryReport:
    alignment: float
    uniformity: float

    def to_dict(self) -> dict:
        return asdict(self)


MIN_TEST = 3


def split_indices(n: int, seed: int, train_frac: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    """Seeded train/test index split; the test side keeps at least 3 items
    whenever ``n >= 6`` so correlations stay defined on small sets."""
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(train_frac * n))
    if n >= 2 * MIN_TEST:
        n_train = min(n_train, n - MIN_TEST)
    return np.sort(order[:n_train]), np.sort(order[n_train:])


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    return float(np.clip((xc * yc).sum() / denom, -1.0, 1.0))


def correlation_stats(pred, truth) -> tuple[float, float, float]:
    """(MAE, Pearson r, Spearman rho with average ranks for ties)."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ContractError(f"length mismatch: {pred.size} vs {truth.size}")
    if pred.size < 3:
        raise ContractError("correlation needs at least 3 points")
    mae = float(np.abs(pred - truth).mean())
    if np.ptp(pred) == 0 or np.ptp(truth) == 0:
        raise UndefinedCorrelationError("correlation undefined for a constant vector", mae)
    r = _pearson(pred, truth)
    rho = _pearson(rankdata(pred, method="average"), rankdata(truth, method="average"))
    return mae, r, rho


def _ridge_fit(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float]:
    mu = X.mean(axis=0)
    Xc = X - mu
    gram = Xc.T @ Xc
    d = X.shape[1]
    reg = 1e-3 * np.trace(gram) / d if d else 0.0
    reg = reg if reg > 0 else 1e-12
    w = np.linalg.solve(gram + reg * np.eye(d), Xc.T @ (y - y.mean()))
    return w, float(y.mean() - mu @ w)


def regression_probe(embeddings, targets, split_seed: int = 0, task: str = "regression") -> ProbeReport:
    """Ridge probe on a seeded 80/20 split; metrics on the 20%."""
    X = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64).ravel()
    if X.shape[0] != y.size:
        raise ContractError("embeddings and targets disagree on n")
    if y.size < 10:
        raise DataError(f"regression probe needs at least 10 samples, got {y.size}")
    if np.ptp(y) == 0:
        raise DegenerateTargetError("targets have zero variance")
    tr, te = split_indices(y.size, split_seed)
    w, b = _ridge_fit(X[tr], y[tr])
    pred = X[te] @ w + b
    try:
        mae, r, rho = correlation_stats(pred, y[te])
    except UndefinedCorrelationError as exc:
        mae, r, rho = exc.mae, 0.0, 0.0
    return ProbeReport(task, mae=mae, pearson_r=r, spearman_rho=rho)


def confusion_matrix(truth: np.ndarray, pred: np.ndarray, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (truth, pred), 1)
    return cm


def classification_metrics(truth, pred, n_classes: int) -> tuple[float, float, float, float]:
    """Accuracy and macro precision/recall/F1; empty denominators count as 0."""
    cm = confusion_matrix(np.asarray(truth), np.asarray(pred), n_classes)
    tp = np.diag(cm).astype(np.float64)
    pred_pos = cm.sum(axis=0)
    real_pos = cm.sum(axis=1)
    precision = np.divide(tp, pred_pos, out=np.zeros_like(tp), where=pred_pos > 0)
    recall = np.divide(tp, real_pos, out=np.zeros_like(tp), where=real_pos > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    acc = float(tp.sum() / cm.sum())
    return acc, float(precision.mean()), float(recall.mean()), float(f1.mean())


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def classification_probe(embeddings, labels: Sequence, split_seed: int = 0,
                         iterations: int = 500, step: float = 0.1,
                         task: str = "classification") -> ProbeReport:
    """Multinomial logistic regression, full-batch gradient descent, no penalty.

    Features are standardised with train-split statistics first.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    labels = list(labels)
    if X.shape[0] != len(labels):
        raise ContractError("embeddings and labels disagree on n")
    classes, y = np.unique(np.asarray(labels, dtype=object).astype(str), return_inverse=True)
    if classes.size < 2:
        raise DataError("classification probe needs at least 2 classes")
    counts = np.bincount(y, minlength=classes.size)
    if counts.min() < 5:
        small = classes[counts < 5].tolist()
        raise DataError(f"classes with fewer than 5 samples: {small}")
    tr, te = split_indices(y.size, split_seed)
    mu = X[tr].mean(axis=0)
    sd = X[tr].std(axis=0)
    sd[sd == 0] = 1.0
    Xtr = (X[tr] - mu) / sd
    Xte = (X[te] - mu) / sd
    n, d = Xtr.shape
    C = classes.size
    onehot = np.eye(C)[y[tr]]
    W = np.zeros((d, C))
    b = np.zeros(C)
    for _ in range(iterations):
        P = _softmax(Xtr @ W + b)
        G = (P - onehot) / n
        W -= step * (Xtr.T @ G)
        b -= step * G.sum(axis=0)
    pred = np.argmax(Xte @ W + b, axis=1)
    acc, prec, rec, f1 = classification_metrics(y[te], pred, C)
    return ProbeReport(task, accuracy=acc, precision=prec, recall=rec, f1=f1)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    return x / np.maximum(norms, 1e-12)


def alignment(embeddings, positive_pairs) -> float:
    """Mean squared distance between L2-normalised positive pairs."""
    pairs = np.asarray(positive_pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.shape[0] == 0:
        raise ContractError("alignment needs at least one positive pair")
    x = _unit_rows(embeddings)
    diff = x[pairs[:, 0]] - x[pairs[:, 1]]
    return float((diff * diff).sum(axis=1).mean())


def uniformity(embeddings) -> float:
    """log of the mean Gaussian kernel exp(-2 d^2) over distinct pairs."""
    x = _unit_rows(embeddings)
    n = x.shape[0]
    if n < 2:
        raise ContractError("uniformity needs at least 2 embeddings")
    i, j = np.triu_indices(n, k=1)
    diff = x[i] - x[j]
    sq = (diff * diff).sum(axis=1)
    return float(np.log(np.exp(-2.0 * sq).mean()))


def positive_pairs_from_tags(tags: Sequence, max_pairs: int = MAX_POSITIVE_PAIRS, seed: int = 0) -> np.ndarray:
    """All same-tag index pairs (i < j), subsampled without replacement to ``max_pairs``."""
    tags = np.asarray([str(t) for t in tags], dtype=object)
    pairs = []
    for tag in sorted(set(tags.tolist())):
        idx = np.flatnonzero(tags == tag)
        if idx.size < 2:
            continue
        a, b = np.triu_indices(idx.size, k=1)
        pairs.append(np.stack([idx[a], idx[b]], axis=1))
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    allp = np.concatenate(pairs)
    if allp.shape[0] > max_pairs:
        keep = np.sort(np.random.default_rng(seed).choice(allp.shape[0], max_pairs, replace=False))
        allp = allp[keep]
    return allp


def geometry(embeddings, tags: Sequence, seed: int = 0) -> GeometryReport:
    pairs = positive_pairs_from_tags(tags, seed=seed)
    return GeometryReport(alignment(embeddings, pairs), uniformity(embeddings))


def pca_project(embeddings, dims: int = 2, seed: int = 0, tol: float = 1e-9,
                max_iter: int = 1000) -> tuple[np.ndarray, np.ndarray]:
    """Top principal components by power iteration with deflation.

    Returns ``(coords [n, k], explained_fraction [k])`` with k <= dims; each
    component is signed so its first non-negligible loading is positive.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    n, d = X.shape
    if n <= dims:
        raise ContractError(f"pca needs more samples ({n}) than components ({dims})")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / n
    total = float(np.trace(cov))
    rng = np.random.default_rng(seed)
    comps, fracs = [], []
    work = cov.copy()
    scale = max(total, 1e-300)
    for c in range(min(dims, d)):
        v = rng.normal(size=d)
        for prev in comps:
            v -= (v @ prev) * prev
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            w = work @ v
            for prev in comps:
                w -= (w @ prev) * prev
            norm = np.linalg.norm(w)
            if norm <= 1e-12 * scale:
                break
            w /= norm
            converged = min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < tol
            v = w
            if converged:
                break
        lam = float(v @ cov @ v)
        if lam <= 1e-12 * scale:
            break
        nz = np.flatnonzero(np.abs(v) > 1e-12)
        if nz.size and v[nz[0]] < 0:
            v = -v
        comps.append(v)
        fracs.append(lam / total)
        work = work - lam * np.outer(v, v)
    if len(comps) < dims:
        warnings.warn(f"data rank below {dims}; returning {len(comps)} components", stacklevel=2)
    if not comps:
        return np.zeros((n, 0)), np.zeros(0)
    W = np.stack(comps, axis=1)
    return Xc @ W, np.asarray(fracs)


def auc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties averaged)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC needs both positive and negative examples")
    ranks = rankdata(scores, method="average")
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def write_pca_csv(path: str | Path, coords: np.ndarray, tags: Sequence | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "pc1", "pc2", "emotion"])
        for i, row in enumerate(coords):
            pc1 = repr(float(row[0])) if row.size > 0 else ""
            pc2 = repr(float(row[1])) if row.size > 1 else ""
            tag = "" if tags is None or tags[i] is None else str(tags[i])
            w.writerow([i, pc1, pc2, tag])
