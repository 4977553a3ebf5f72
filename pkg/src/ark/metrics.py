"""Classification metrics: rank AUC, accuracy, false-negative rate."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import DimensionError, UndefinedMetricError
from .tensor import stable_sigmoid


def _pair(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise DimensionError(f"scores {s.shape} and labels {y.shape} differ")
    return s, y.astype(bool)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with midranks for tied scores."""
    s, y = _pair(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative labels")
    ranks = rankdata(s, method="average")
    r_pos = ranks[y].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def per_class_auc(scores: np.ndarray, indicators: np.ndarray, class_names) -> dict:
    """AUC per column; classes lacking positives or negatives map to None."""
    out = {}
    for j, name in enumerate(class_names):
        try:
            out[name] = auc(scores[:, j], indicators[:, j])
        except UndefinedMetricError:
            out[name] = None
    return out


def accuracy(pred_classes, true_classes) -> float:
    p = np.asarray(pred_classes).reshape(-1)
    t = np.asarray(true_classes).reshape(-1)
    if p.shape != t.shape:
        raise DimensionError(f"predictions {p.shape} and targets {t.shape} differ")
    if p.size == 0:
        raise UndefinedMetricError("accuracy of an empty prediction set")
    return float(np.mean(p == t))


def fnr(scores, labels, threshold: float = 0.5, logits: bool = True) -> float:
    """FN / (FN + TP); a sample is called positive iff sigmoid(score) >= threshold.

    Pass ``logits=False`` when ``scores`` are already probabilities.
    """
    s, y = _pair(scores, labels)
    if not y.any():
        raise UndefinedMetricError("FNR needs at least one positive label")
    prob = stable_sigmoid(s) if logits else s
    called = prob >= threshold
    tp = int(np.sum(called & y))
    fn = int(np.sum(~called & y))
    return fn / (fn + tp)


def threshold_at_specificity(scores, labels, specificity: float = 0.9, logits: bool = True) -> float:
    """Probability threshold whose specificity on (scores, labels) is at least ``specificity``."""
    s, y = _pair(scores, labels)
    if y.all():
        raise UndefinedMetricError("specificity needs negative labels")
    prob = np.sort((stable_sigmoid(s) if logits else s)[~y])
    k = int(np.ceil(specificity * len(prob)))
    if k >= len(prob):
        return float(np.nextafter(prob[-1], np.inf))
    return float(np.nextafter(prob[k - 1], np.inf)) if k > 0 else float(prob[0])
