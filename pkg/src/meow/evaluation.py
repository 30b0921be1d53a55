"""Downstream evaluation: linear probe (Macro/Micro-F1, AUC) and clustering
quality (NMI, ARI)."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import comb, log_softmax, softmax
from scipy.stats import rankdata

from .clustering import kmeans
from .graph import LabelSplit

log = logging.getLogger(__name__)


@dataclass
class ProbeResult:
    macro_f1: float
    micro_f1: float
    auc: float
    precision: np.ndarray = field(default_factory=lambda: np.zeros(0))
    recall: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass
class ClusterEvalResult:
    nmi: float
    ari: float


# ---------------------------------------------------------------------------
# classification metrics


def precision_recall_f1(y_true, y_pred, n_classes: int | None = None):
    """Per-class precision, recall and F1 over the classes present in either input
    (or ``range(n_classes)``). Zero denominators give 0."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    classes = np.arange(n_classes) if n_classes is not None else np.union1d(y_true, y_pred)
    tp = np.array([np.sum((y_pred == c) & (y_true == c)) for c in classes], dtype=np.float64)
    pp = np.array([np.sum(y_pred == c) for c in classes], dtype=np.float64)
    ap = np.array([np.sum(y_true == c) for c in classes], dtype=np.float64)
    prec = np.divide(tp, pp, out=np.zeros_like(tp), where=pp > 0)
    rec = np.divide(tp, ap, out=np.zeros_like(tp), where=ap > 0)
    den = prec + rec
    f1 = np.divide(2 * prec * rec, den, out=np.zeros_like(tp), where=den > 0)
    return prec, rec, f1


def macro_f1(y_true, y_pred, n_classes: int | None = None) -> float:
    return float(precision_recall_f1(y_true, y_pred, n_classes)[2].mean())


def micro_f1(y_true, y_pred) -> float:
    """Equals accuracy for single-label multi-class predictions."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if len(y_true) == 0:
        raise ValueError("empty label set")
    return float(np.mean(y_true == y_pred))


def binary_auc(scores, positive) -> float:
    """Rank-based AUC (Mann-Whitney U); ties count 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos, n_neg = positive.sum(), (~positive).sum()
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positives and negatives")
    ranks = rankdata(scores)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_ovr(scores, labels) -> float:
    """Macro one-vs-rest AUC; classes without positives or negatives are skipped."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[1] < 2:
        raise ValueError("scores must be an n x c matrix with c >= 2")
    vals = []
    for c in range(scores.shape[1]):
        pos = labels == c
        if pos.all() or not pos.any():
            log.warning("class %d has no positives or no negatives; skipped in AUC", c)
            continue
        vals.append(binary_auc(scores[:, c], pos))
    if not vals:
        raise ValueError("no class has both positives and negatives")
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# partition agreement


def contingency(a, b) -> np.ndarray:
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    return table


def _entropy(counts) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(labels_true, labels_pred) -> float:
    """Mutual information normalized by the arithmetic mean of the entropies."""
    t = contingency(labels_true, labels_pred).astype(np.float64)
    n = t.sum()
    h_true, h_pred = _entropy(t.sum(axis=1)), _entropy(t.sum(axis=0))
    if h_true == 0 and h_pred == 0:
        return 1.0
    pij = t / n
    outer = np.outer(t.sum(axis=1), t.sum(axis=0)) / n ** 2
    nz = pij > 0
    mi = float((pij[nz] * np.log(pij[nz] / outer[nz])).sum())
    return float(np.clip(mi / ((h_true + h_pred) / 2.0), 0.0, 1.0))


def ari(labels_true, labels_pred) -> float:
    t = contingency(labels_true, labels_pred)
    n = t.sum()
    sum_ij = comb(t, 2).sum()
    sum_a = comb(t.sum(axis=1), 2).sum()
    sum_b = comb(t.sum(axis=0), 2).sum()
    expected = sum_a * sum_b / comb(n, 2) if n > 1 else 0.0
    max_index = (sum_a + sum_b) / 2.0
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


# ---------------------------------------------------------------------------
# protocols


def linear_probe(embeddings, labels, split: LabelSplit, seed: int = 0, epochs: int = 500,
                 lr: float = 0.1, l2: float = 1e-4) -> ProbeResult:
    """Multinomial logistic regression on frozen, train-standardized embeddings.

    Full-batch gradient descent from zero weights with a fixed step, so the
    result does not depend on ``seed`` (kept for interface symmetry).
    """
    X = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    n_classes = int(y.max()) + 1
    tr, te = split.train, split.test
    missing = set(range(n_classes)) - set(np.unique(y[tr]).tolist())
    if missing:
        raise ValueError(f"classes {sorted(missing)} absent from the training split")
    mu, sd = X[tr].mean(axis=0), X[tr].std(axis=0)
    sd[sd == 0] = 1.0
    Xs = (X - mu) / sd
    W = np.zeros((X.shape[1], n_classes))
    b = np.zeros(n_classes)
    Y = np.eye(n_classes)[y[tr]]
    m = len(tr)
    for _ in range(epochs):
        P = softmax(Xs[tr] @ W + b, axis=1)
        G = (P - Y) / m
        W -= lr * (Xs[tr].T @ G + l2 * W)
        b -= lr * G.sum(axis=0)
    logits = Xs[te] @ W + b
    scores = np.exp(log_softmax(logits, axis=1))
    pred = np.argmax(logits, axis=1)
    prec, rec, f1 = precision_recall_f1(y[te], pred, n_classes)
    return ProbeResult(float(f1.mean()), micro_f1(y[te], pred), auc_ovr(scores, y[te]), prec, rec)


def clustering_eval(embeddings, labels, k: int | None = None, seed: int = 0) -> ClusterEvalResult:
    labels = np.asarray(labels)
    k = int(len(np.unique(labels))) if k is None else k
    res = kmeans(np.asarray(embeddings, dtype=np.float64), k, seed)
    return ClusterEvalResult(nmi(labels, res.assignments), ari(labels, res.assignments))


def write_results_csv(rows, path):
    """Rows of (dataset, split, seed, metric, value)."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["dataset", "split", "seed", "metric", "value"])
        for r in rows:
            out.writerow(list(r[:4]) + [repr(float(r[4]))])
