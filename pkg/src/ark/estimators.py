"""scikit-learn compatible wrappers around pretraining and linear probing."""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import tensor as T
from .data import DatasetManifest
from .errors import ConfigurationError, DataError
from .losses import bce_with_logits, ce_multiclass
from .metrics import accuracy, per_class_auc
from .nn import EncoderConfig, build_model, embed_images
from .pretrain import PretrainConfig, run
from .tensor import Tensor, stable_sigmoid


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Single affine layer trained by minibatch SGD with cosine decay.

    ``label_mode`` selects the loss: ``"multiclass"`` uses softmax
    cross-entropy on integer targets; ``"multilabel"`` and ``"binary"`` use
    sigmoid BCE on an n x k indicator matrix.
    """

    def __init__(self, label_mode="multilabel", n_classes=None, epochs=100, lr=0.1, batch_size=64, random_state=0, standardize=True):
        self.label_mode = label_mode
        self.n_classes = n_classes
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.random_state = random_state
        self.standardize = standardize

    def _targets(self, y):
        if self.label_mode == "multiclass":
            y = np.asarray(y).reshape(-1)
            if y.dtype.kind not in "iu":
                if not np.all(np.mod(y, 1) == 0):
                    raise DataError("multiclass targets must be integer class indices")
                y = y.astype(np.int64)
            k = self.n_classes or int(y.max()) + 1
            if y.min() < 0 or y.max() >= k:
                raise DataError(f"class index out of range [0, {k})")
            return y, k
        if self.label_mode not in ("multilabel", "binary"):
            raise ConfigurationError(f"unknown label_mode {self.label_mode!r}")
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
        return y, y.shape[1]

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        targets, k = self._targets(y)
        if len(targets) != len(X):
            raise DataError(f"{len(X)} embeddings but {len(targets)} targets")
        if self.epochs < 1 or self.lr <= 0 or self.batch_size < 1:
            raise ConfigurationError("probe needs epochs >= 1, lr > 0, batch_size >= 1")
        if self.standardize:
            self.mean_ = X.mean(axis=0)
            scale = X.std(axis=0)
            self.scale_ = np.where(scale > 1e-12, scale, 1.0)
        else:
            self.mean_ = np.zeros(X.shape[1])
            self.scale_ = np.ones(X.shape[1])
        Z = (X - self.mean_) / self.scale_
        rng = np.random.default_rng(self.random_state)
        W = Tensor(rng.normal(0.0, 0.01, (X.shape[1], k)), requires_grad=True)
        b = Tensor(np.zeros(k), requires_grad=True)
        n = len(Z)
        per_epoch = -(-n // self.batch_size)
        total = self.epochs * per_epoch
        step = 0
        for _ in range(self.epochs):
            order = rng.permutation(n)
            for start in range(0, n, self.batch_size):
                idx = order[start : start + self.batch_size]
                logits = T.matmul(Tensor(Z[idx]), W) + b
                if self.label_mode == "multiclass":
                    loss = ce_multiclass(logits, targets[idx])
                else:
                    loss = bce_with_logits(logits, targets[idx])
                W.grad = b.grad = None
                loss.backward()
                lr = self.lr * 0.5 * (1.0 + math.cos(math.pi * step / total))
                W.data = W.data - lr * W.grad
                b.data = b.data - lr * b.grad
                step += 1
        self.coef_ = W.data
        self.intercept_ = b.data
        self.n_classes_ = k
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        return ((X - self.mean_) / self.scale_) @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        z = self.decision_function(X)
        if self.label_mode == "multiclass":
            e = np.exp(z - z.max(axis=1, keepdims=True))
            return e / e.sum(axis=1, keepdims=True)
        return stable_sigmoid(z)

    def predict(self, X):
        z = self.decision_function(X)
        if self.label_mode == "multiclass":
            return z.argmax(axis=1)
        return (z >= 0).astype(np.int64)

    def score(self, X, y, sample_weight=None):
        """Accuracy for multiclass, unweighted mean per-class AUC otherwise."""
        targets, _ = self._targets(y)
        if self.label_mode == "multiclass":
            return accuracy(self.predict(X), targets)
        aucs = per_class_auc(self.decision_function(X), targets, range(targets.shape[1]))
        vals = [v for v in aucs.values() if v is not None]
        return float(np.mean(vals)) if vals else float("nan")


class ArkPretrainer(TransformerMixin, BaseEstimator):
    """Pretrain a student/teacher pair on a list of manifests; ``transform`` embeds images."""

    def __init__(
        self,
        encoder="mlp",
        widths=(256,),
        feature_dim=128,
        embed_dim=64,
        mode="cyclic",
        rounds=20,
        lr0=0.3,
        momentum=0.9,
        batch_size=32,
        consistency_weight=1.0,
        use_projector=True,
        use_consistency=True,
        source="teacher",
        stage="projector",
        random_state=0,
    ):
        self.encoder = encoder
        self.widths = widths
        self.feature_dim = feature_dim
        self.embed_dim = embed_dim
        self.mode = mode
        self.rounds = rounds
        self.lr0 = lr0
        self.momentum = momentum
        self.batch_size = batch_size
        self.consistency_weight = consistency_weight
        self.use_projector = use_projector
        self.use_consistency = use_consistency
        self.source = source
        self.stage = stage
        self.random_state = random_state

    def fit(self, X, y=None):
        manifests = list(X)
        if not manifests or not all(isinstance(m, DatasetManifest) for m in manifests):
            raise DataError("ArkPretrainer.fit expects a non-empty list of DatasetManifest")
        enc = EncoderConfig(self.encoder, tuple(self.widths), manifests[0].image_shape, self.feature_dim)
        pair = build_model(
            enc, self.embed_dim, [m.task for m in manifests], self.random_state, self.momentum, self.use_projector
        )
        cfg = PretrainConfig(
            mode=self.mode,
            rounds=self.rounds,
            lr0=self.lr0,
            momentum=self.momentum,
            batch_size=self.batch_size,
            consistency_weight=self.consistency_weight,
            use_projector=self.use_projector,
            use_consistency=self.use_consistency,
            seed=self.random_state,
        )
        self.pair_, self.log_ = run(pair, manifests, cfg)
        self.n_features_in_ = int(np.prod(enc.input_shape))
        return self

    def transform(self, X):
        check_is_fitted(self, "pair_")
        X = check_array(X, dtype=np.float64, allow_nd=True)
        return embed_images(self.pair_, X, self.source, self.stage)
