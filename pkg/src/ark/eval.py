"""Embedding export, linear probing, fine-tuning and trial reports."""

from __future__ import annotations

import csv
import json
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from . import tensor as T
from .errors import ConfigurationError, DataError, DimensionError, DivergenceError, UndefinedMetricError
from .estimators import LinearProbe
from .losses import task_loss
from .metrics import accuracy, per_class_auc
from .nn import EncoderConfig, ModelPair, Network, TaskHead, build_model, embed_images, load_checkpoint
from .stats import mean_std
from .tensor import Tensor


@dataclass
class EmbeddingRecord:
    id: str
    embedding: np.ndarray
    labels: object
    split: str
    subgroup: str | None = None


def export_embeddings(pair: ModelPair, manifest: D.DatasetManifest, source="teacher", stage="projector", splits=None) -> list:
    """One record per sample (unaugmented), in manifest order."""
    recs = [r for r in manifest.records if splits is None or r.split in splits]
    if not recs:
        return []
    images = np.stack([r.image for r in recs])
    if images.shape[1:] != pair.encoder_config.input_shape:
        raise DimensionError(f"checkpoint expects {pair.encoder_config.input_shape} images, manifest has {images.shape[1:]}")
    vectors = embed_images(pair, images, source, stage)
    if not np.all(np.isfinite(vectors)):
        raise DataError("non-finite embedding values")
    return [EmbeddingRecord(r.id, v, r.labels, r.split, r.subgroup) for r, v in zip(recs, vectors)]


def save_embeddings(records, path) -> None:
    lines = []
    for r in records:
        labels = int(r.labels) if np.isscalar(r.labels) else [int(v) for v in r.labels]
        obj = {"id": r.id, "embedding": [float(v) for v in r.embedding], "labels": labels, "split": r.split}
        if r.subgroup is not None:
            obj["subgroup"] = r.subgroup
        lines.append(json.dumps(obj, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_embeddings(path) -> list:
    out = []
    dim = None
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        obj = json.loads(line)
        vec = np.asarray(obj["embedding"], dtype=np.float64)
        if dim is None:
            dim = len(vec)
        elif len(vec) != dim:
            raise DataError(f"{path}:{lineno}: embedding length {len(vec)} != {dim}")
        if not np.all(np.isfinite(vec)):
            raise DataError(f"{path}:{lineno}: non-finite embedding")
        out.append(EmbeddingRecord(str(obj["id"]), vec, obj["labels"], obj["split"], obj.get("subgroup")))
    return out


# -- reports --------------------------------------------------------------


@dataclass
class MetricReport:
    """Metric over one or more trials; ``std`` uses the n-1 denominator (NaN for one trial)."""

    metric: str
    trials: list
    per_class: dict = field(default_factory=dict)
    undefined_classes: list = field(default_factory=list)
    label: str = ""

    @property
    def n_trials(self) -> int:
        return len(self.trials)

    @property
    def mean(self) -> float:
        return float(np.mean(self.trials))

    @property
    def std(self) -> float:
        return mean_std(self.trials)[1] if len(self.trials) >= 2 else float("nan")

    @property
    def aggregate(self) -> float:
        return self.mean

    @classmethod
    def merge(cls, reports, label: str = "") -> "MetricReport":
        if not reports:
            raise ConfigurationError("nothing to merge")
        metrics = {r.metric for r in reports}
        if len(metrics) != 1:
            raise ConfigurationError(f"cannot merge different metrics {sorted(metrics)}")
        per_class = {}
        for r in reports:
            for name, vals in r.per_class.items():
                per_class.setdefault(name, []).extend(vals)
        undefined = sorted({c for r in reports for c in r.undefined_classes})
        return cls(reports[0].metric, [v for r in reports for v in r.trials], per_class, undefined, label)

    def to_json(self) -> dict:
        std = self.std
        return {
            "label": self.label,
            "metric": self.metric,
            "n_trials": self.n_trials,
            "mean": self.mean,
            "std": None if math.isnan(std) else std,
            "trials": list(self.trials),
            "per_class": {k: [None if v is None else float(v) for v in vals] for k, vals in self.per_class.items()},
            "undefined_classes": list(self.undefined_classes),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MetricReport":
        return cls(obj["metric"], list(obj["trials"]), dict(obj.get("per_class", {})), list(obj.get("undefined_classes", [])), obj.get("label", ""))

    def write(self, stem) -> None:
        """Write ``<stem>.json`` and ``<stem>.csv``."""
        stem = Path(stem)
        stem.with_suffix(".json").write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        with open(stem.with_suffix(".csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["label", "metric", "trial", "value"])
            for i, v in enumerate(self.trials):
                w.writerow([self.label, self.metric, i, format(v, ".17g")])
            std = self.std
            w.writerow([self.label, self.metric, "mean", format(self.mean, ".17g")])
            w.writerow([self.label, self.metric, "std", "" if math.isnan(std) else format(std, ".17g")])
            w.writerow([self.label, self.metric, "n_trials", self.n_trials])


# -- probing --------------------------------------------------------------


@dataclass
class ProbeConfig:
    epochs: int = 100
    lr: float = 0.1
    batch_size: int = 64
    seed: int = 0
    train_fraction: float | None = 1.0
    k_shot: int | None = None
    standardize: bool = True

    def __post_init__(self):
        frac_set = self.train_fraction is not None and self.k_shot is None
        shot_set = self.k_shot is not None
        if shot_set:
            self.train_fraction = None
            if self.k_shot < 1:
                raise ConfigurationError("k_shot must be >= 1")
        elif not frac_set or not 0.0 < self.train_fraction <= 1.0:
            raise ConfigurationError("train_fraction must lie in (0, 1] when k_shot is unset")


def _stack(records, task: D.TaskSpec):
    X = np.stack([np.asarray(r.embedding, dtype=np.float64) for r in records])
    Y = D.label_array(task, [r.labels for r in records])
    return X, Y


def _seeded_rng(cfg_seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([cfg_seed, stream, 61])


def subsample_train(records, cfg: ProbeConfig, task: D.TaskSpec) -> list:
    """Stratified fraction or k-shot subset of ``records`` (seeded, order-preserving).

    Fractions stratify on the full label (class index or label vector) with
    largest-remainder rounding. ``k_shot`` takes exactly k records per class,
    preferring records positive for that class only; for multilabel/binary
    tasks k label-free records are added as negatives when available.
    """
    records = list(records)
    rng = _seeded_rng(cfg.seed)
    n = len(records)
    if cfg.k_shot is None:
        if cfg.train_fraction == 1.0:
            return records
        target = max(1, int(round(cfg.train_fraction * n)))
        groups = {}
        for i, r in enumerate(records):
            key = int(r.labels) if task.label_mode == "multiclass" else tuple(int(v) for v in r.labels)
            groups.setdefault(key, []).append(i)
        keys = sorted(groups)
        quotas = {k: cfg.train_fraction * len(groups[k]) for k in keys}
        counts = {k: int(math.floor(q)) for k, q in quotas.items()}
        spare = target - sum(counts.values())
        for k in sorted(keys, key=lambda k: (counts[k] - quotas[k], k))[: max(spare, 0)]:
            counts[k] += 1
        chosen = []
        for k in keys:
            idx = groups[k]
            chosen.extend(rng.choice(idx, size=counts[k], replace=False).tolist() if counts[k] else [])
        return [records[i] for i in sorted(chosen)]

    k = cfg.k_shot
    ind = D.label_matrix(task, D.label_array(task, [r.labels for r in records]))
    chosen = set()
    for c, name in enumerate(task.class_names):
        pos = np.flatnonzero(ind[:, c] == 1)
        if len(pos) < k:
            raise DataError(f"class {name!r} has {len(pos)} positives, fewer than k={k}")
        only = [i for i in pos if ind[i].sum() == 1 and i not in chosen]
        rest = [i for i in pos if ind[i].sum() > 1 and i not in chosen]
        pool = list(rng.permutation(only)) + list(rng.permutation(rest))
        if len(pool) < k:
            raise DataError(f"class {name!r} has too few unused positives for k={k}")
        chosen.update(int(i) for i in pool[:k])
    if task.label_mode != "multiclass":
        empty = np.flatnonzero(ind.sum(axis=1) == 0)
        if len(empty):
            chosen.update(int(i) for i in rng.permutation(empty)[:k])
    return [records[i] for i in sorted(chosen)]


def evaluate_scores(task: D.TaskSpec, scores: np.ndarray, targets: np.ndarray):
    """Return (aggregate, per-class dict, undefined classes) for one trial."""
    if task.label_mode == "multiclass":
        acc = accuracy(scores.argmax(axis=1), targets)
        return acc, {"accuracy": acc}, []
    aucs = per_class_auc(scores, targets, task.class_names)
    undefined = [c for c, v in aucs.items() if v is None]
    defined = [v for v in aucs.values() if v is not None]
    if not defined:
        raise UndefinedMetricError("no class has both positives and negatives in the test split")
    return float(np.mean(defined)), aucs, undefined


def linear_probe(train, test, task: D.TaskSpec, cfg: ProbeConfig) -> MetricReport:
    """Fit one probe on frozen embeddings and score it on ``test`` (a single trial)."""
    train_ids = {r.id for r in train}
    overlap = train_ids & {r.id for r in test}
    if overlap:
        raise DataError(f"train and test embeddings share ids: {sorted(overlap)[:5]}")
    subset = subsample_train(train, cfg, task)
    X, Y = _stack(subset, task)
    Xt, Yt = _stack(test, task)
    if task.label_mode != "multiclass":
        absent = [c for j, c in enumerate(task.class_names) if not Y[:, j].any()]
        if absent:
            warnings.warn(f"classes absent from the probe's train split: {absent}", stacklevel=2)
    probe = LinearProbe(task.label_mode, task.n_classes, cfg.epochs, cfg.lr, cfg.batch_size, cfg.seed, cfg.standardize)
    probe.fit(X, Y)
    value, per_class, undefined = evaluate_scores(task, probe.decision_function(Xt), Yt)
    metric = "accuracy" if task.label_mode == "multiclass" else "mean_auc"
    return MetricReport(metric, [value], {k: [v] for k, v in per_class.items()}, undefined)


def worker_count() -> int:
    """Threads allowed by ARK_THREADS (0 or unset: single-threaded)."""
    try:
        return max(0, int(os.environ.get("ARK_THREADS", "0")))
    except ValueError:
        raise ConfigurationError("ARK_THREADS must be an integer") from None


def map_trials(fn, seeds) -> list:
    """Run ``fn(seed)`` per seed; results are ordered by trial index regardless of threads."""
    workers = worker_count()
    if workers <= 1:
        return [fn(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, seeds))


def probe_trials(train, test, task: D.TaskSpec, cfg: ProbeConfig, n_trials: int = 10, label: str = "") -> MetricReport:
    def one(i):
        trial_cfg = ProbeConfig(cfg.epochs, cfg.lr, cfg.batch_size, cfg.seed + i, cfg.train_fraction, cfg.k_shot, cfg.standardize)
        return linear_probe(train, test, task, trial_cfg)

    return MetricReport.merge(map_trials(one, range(n_trials)), label)


# -- fine-tuning ----------------------------------------------------------


@dataclass
class FinetuneConfig:
    encoder: EncoderConfig = None
    epochs: int = 20
    lr: float = 0.05
    batch_size: int = 32
    seed: int = 0
    train_fraction: float = 1.0
    embed_dim: int = 64

    def __post_init__(self):
        if self.epochs < 1 or self.lr <= 0 or self.batch_size < 1:
            raise ConfigurationError("finetune needs epochs >= 1, lr > 0, batch_size >= 1")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ConfigurationError("train_fraction must lie in (0, 1]")


def init_finetune_model(init, task: D.TaskSpec, cfg: FinetuneConfig) -> Network:
    """Encoder, projector and a freshly initialised head for ``task``.

    ``init`` is None/"random" (the network of ``build_model(..., seed)``), a
    :class:`ModelPair` or a checkpoint path; pretrained inits copy the
    teacher's encoder and projector weights. The head sits on the projector
    output, as during pretraining.
    """
    source = None
    if isinstance(init, (str, os.PathLike)) and str(init) != "random":
        source, _ = load_checkpoint(init, heads=False)
    elif isinstance(init, ModelPair):
        source = init
    if source is not None:
        fresh = build_model(
            source.encoder_config, source.embed_dim, [task], cfg.seed,
            use_projector=source.use_projector, projector_hidden=source.projector_hidden,
        )
    elif cfg.encoder is None:
        raise ConfigurationError("random-init fine-tuning needs an encoder config")
    else:
        fresh = build_model(cfg.encoder, cfg.embed_dim, [task], cfg.seed)
    net = fresh.student
    head = TaskHead(task.task_id, fresh.embedding_dim, task.n_classes, np.random.default_rng([cfg.seed, 977]))
    net.heads = {task.task_id: head}
    if source is not None:
        src = dict(source.teacher.named_parameters("n", heads=False))
        for name, p in net.named_parameters("n", heads=False):
            if src[name].shape != p.shape:
                raise DimensionError(f"checkpoint tensor {name} has shape {src[name].shape}, expected {p.shape}")
            p.data = src[name].data.copy()
    return net


def finetune(init, target: D.DatasetManifest, cfg: FinetuneConfig) -> MetricReport:
    """Train the whole network and a new head on the target train split; score on test."""
    task = target.task
    net = init_finetune_model(init, task, cfg)
    head = net.heads[task.task_id]
    ids, images, targets = target.arrays("train")
    if len(ids) == 0:
        raise DataError(f"task {task.name!r} has an empty train split")
    if cfg.train_fraction < 1.0:
        recs = [EmbeddingRecord(i, np.zeros(1), t if task.label_mode == "multiclass" else list(t), "train") for i, t in zip(ids, targets)]
        keep = {r.id for r in subsample_train(recs, ProbeConfig(train_fraction=cfg.train_fraction, seed=cfg.seed), task)}
        mask = np.array([i in keep for i in ids])
        images, targets = images[mask], targets[mask]
    params = net.parameters()
    rng = np.random.default_rng([cfg.seed, 4243])
    n = len(images)
    total = cfg.epochs * (-(-n // cfg.batch_size))
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            logits = head(net.embed(Tensor(images[idx])))
            loss = task_loss(task.loss_kind, logits, targets[idx])
            if not math.isfinite(loss.item()):
                raise DivergenceError(f"fine-tuning diverged at step {step}", task_id=task.task_id)
            net.zero_grad()
            loss.backward()
            lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / total))
            for p in params:
                if p.grad is not None:
                    p.data = p.data - lr * p.grad
            step += 1
    _, test_images, test_targets = target.arrays("test")
    with T.no_grad():
        scores = np.concatenate(
            [head(net.embed(Tensor(test_images[s : s + 256]))).data for s in range(0, len(test_images), 256)]
        )
    value, per_class, undefined = evaluate_scores(task, scores, test_targets)
    metric = "accuracy" if task.label_mode == "multiclass" else "mean_auc"
    return MetricReport(metric, [value], {k: [v] for k, v in per_class.items()}, undefined)


def finetune_trials(init, target: D.DatasetManifest, cfg: FinetuneConfig, n_trials: int = 10, label: str = "") -> MetricReport:
    def one(i):
        return finetune(init, target, FinetuneConfig(**{**asdict_shallow(cfg), "seed": cfg.seed + i}))

    return MetricReport.merge(map_trials(one, range(n_trials)), label)


def asdict_shallow(cfg) -> dict:
    return {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}
