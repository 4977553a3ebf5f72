"""Task losses, the teacher/student consistency loss and their sum."""

from __future__ import annotations

from enum import Enum

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DataError, DimensionError
from .tensor import Tensor, make_result, stable_sigmoid


class LossKind(str, Enum):
    BCE_MULTILABEL = "bce_multilabel"
    CE_MULTICLASS = "ce_multiclass"
    MSE_CONSISTENCY = "mse_consistency"


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy over every logit, in the overflow-free form."""
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    z = logits.data
    if y.shape != z.shape:
        raise DimensionError(f"logits {z.shape} and targets {y.shape} differ")
    if y.size and (np.any(y < 0) or np.any(y > 1) or np.any(np.isnan(y))):
        raise DataError("BCE targets must lie in [0, 1]")
    n = z.size
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return make_result(np.array(per.mean()), (logits,), lambda g: (g * (stable_sigmoid(z) - y) / n,))


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def ce_multiclass(logits: Tensor, class_index) -> Tensor:
    """Mean of -log softmax(logits)[class]; ``logits`` is k or n x k."""
    z = logits.data
    single = z.ndim == 1
    z2 = z[None] if single else z
    idx = np.atleast_1d(np.asarray(class_index))
    if idx.dtype.kind not in "iu":
        if not np.all(np.equal(np.mod(idx, 1), 0)):
            raise DataError(f"class indices must be integers, got {idx}")
        idx = idx.astype(np.int64)
    if z2.ndim != 2 or idx.shape != (z2.shape[0],):
        raise DimensionError(f"logits {z.shape} incompatible with class indices {np.shape(class_index)}")
    k = z2.shape[1]
    if np.any(idx < 0) or np.any(idx >= k):
        raise DataError(f"class index out of range [0, {k})")
    ls = log_softmax(z2)
    rows = np.arange(len(idx))
    n = len(idx)
    value = -ls[rows, idx].mean()

    def backward(g):
        d = np.exp(ls)
        d[rows, idx] -= 1.0
        d *= g / n
        return (d[0] if single else d,)

    return make_result(np.array(value), (logits,), backward)


def mse_consistency(emb_t: Tensor, emb_s: Tensor) -> Tensor:
    """Mean squared distance; the teacher side is treated as a constant."""
    if emb_t.shape != emb_s.shape:
        raise DimensionError(f"embedding shapes differ: {emb_t.shape} vs {emb_s.shape}")
    diff = emb_s - Tensor(emb_t.data)
    return T.reduce("mean", diff * diff)


def total_loss(task_loss: Tensor, consistency: Tensor, weight: float = 1.0) -> Tensor:
    if weight < 0:
        raise ConfigurationError(f"consistency weight must be >= 0, got {weight}")
    if weight == 0:
        return task_loss + 0.0
    return task_loss + consistency * weight


def task_loss(kind, logits: Tensor, targets) -> Tensor:
    kind = LossKind(kind)
    if kind is LossKind.BCE_MULTILABEL:
        return bce_with_logits(logits, targets)
    if kind is LossKind.CE_MULTICLASS:
        return ce_multiclass(logits, targets)
    raise ConfigurationError(f"{kind.value} is not a task loss")
