"""Cyclic and concurrent multi-task pretraining with an epoch-wise EMA teacher."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from .errors import ConfigurationError, DivergenceError, RegistryError
from .losses import mse_consistency, task_loss, total_loss
from .nn import ModelPair, ema_update, forward_student, forward_teacher, save_checkpoint


@dataclass
class PretrainConfig:
    mode: str = "cyclic"
    rounds: int = 20
    lr0: float = 0.3
    momentum: float = 0.9
    batch_size: int = 32
    consistency_weight: float = 1.0
    use_projector: bool = True
    use_consistency: bool = True
    seed: int = 0
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    augmentation: D.AugmentationConfig | None = None
    cosine_restarts: bool = False
    shuffle_task_order: bool = False
    momentum_schedule: str = "constant"

    def __post_init__(self):
        if self.mode not in ("cyclic", "concurrent"):
            raise ConfigurationError(f"mode must be 'cyclic' or 'concurrent', got {self.mode!r}")
        if self.rounds < 1:
            raise ConfigurationError("rounds must be >= 1")
        if self.lr0 <= 0:
            raise ConfigurationError("lr0 must be positive")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigurationError("momentum must lie in [0, 1]")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.consistency_weight < 0:
            raise ConfigurationError("consistency_weight must be >= 0")
        if self.momentum_schedule not in ("constant", "cosine"):
            raise ConfigurationError("momentum_schedule must be 'constant' or 'cosine'")


@dataclass
class OptimizerState:
    step: int = 0
    total_steps: int = 1
    lr: float = 0.0
    restart_period: int = 0

    def as_arrays(self) -> dict:
        return {
            "step": np.array([float(self.step)]),
            "total_steps": np.array([float(self.total_steps)]),
            "lr": np.array([self.lr]),
            "restart_period": np.array([float(self.restart_period)]),
        }


def cosine_lr(lr0: float, t: int, total_steps: int) -> float:
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / total_steps))


def sgd_step(state: OptimizerState, params, grads, lr0: float, total_steps: int | None = None) -> float:
    """Plain SGD at the cosine-scheduled rate for the current step; returns that rate."""
    total = state.total_steps if total_steps is None else total_steps
    if total <= 0:
        raise ConfigurationError("total_steps must be positive")
    state.total_steps = total
    t = state.step
    if state.restart_period:
        t, total = t % state.restart_period, state.restart_period
    lr = cosine_lr(lr0, t, total)
    for p, g in zip(params, grads):
        if g is not None:
            p.data = p.data - lr * g
    state.lr = lr
    state.step += 1
    return lr


@dataclass
class RoundEntry:
    round: int
    task_id: int
    task_loss: float
    consistency_loss: float
    lr: float
    steps: int
    wall_clock: float = 0.0


@dataclass
class RoundLog:
    mode: str = "cyclic"
    entries: list = field(default_factory=list)
    ema_updates: int = 0

    def append(self, entry: RoundEntry) -> None:
        self.entries.append(entry)

    def rows(self):
        for e in self.entries:
            yield [e.round, e.task_id, _fmt(e.task_loss), _fmt(e.consistency_loss), _fmt(e.lr), e.steps]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["round", "task_id", "task_loss", "consistency_loss", "lr", "steps"])
            writer.writerows(self.rows())

    def curve(self, task_id: int | None = None) -> list:
        """Per-round mean task loss (optionally for one task)."""
        rounds = sorted({e.round for e in self.entries})
        out = []
        for r in rounds:
            vals = [e.task_loss for e in self.entries if e.round == r and (task_id is None or e.task_id == task_id)]
            out.append(float(np.mean(vals)))
        return out


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


# -- training -------------------------------------------------------------


def _check_setup(pair: ModelPair, manifests, cfg: PretrainConfig) -> None:
    if not manifests:
        raise ConfigurationError("pretraining needs at least one manifest")
    for m in manifests:
        if m.task.task_id not in pair.student.heads:
            raise RegistryError(f"task {m.task.name!r} (id {m.task.task_id}) has no head")
    if cfg.use_projector != pair.use_projector:
        raise ConfigurationError("cfg.use_projector disagrees with the model (rebuild with use_projector)")
    D.check_suite_leaks(manifests)


def _aug(cfg: PretrainConfig, manifests) -> D.AugmentationConfig:
    if cfg.augmentation is not None:
        return cfg.augmentation
    return D.AugmentationConfig.for_image_size(manifests[0].image_shape[-1])


def _batch_losses(pair: ModelPair, batch: D.Batch, task, cfg: PretrainConfig, aug, epoch: int):
    x1, x2 = D.augment_pair(batch.images, batch.indices, aug, cfg.seed, epoch, task.task_id)
    emb_s, pred = forward_student(pair, x2, task.task_id)
    lt = task_loss(task.loss_kind, pred, batch.targets)
    if cfg.use_consistency and cfg.consistency_weight > 0:
        emb_t = forward_teacher(pair, x1)
        lc = mse_consistency(emb_t, emb_s)
    else:
        lc = None
    return lt, lc


def _trainable(pair: ModelPair, task_ids):
    params = [p for _, p in pair.student.named_parameters("s", heads=False)]
    for tid in task_ids:
        head = pair.student.heads[tid]
        params += [head.weight, head.bias]
    return params


def _step(pair, params, loss, state, cfg, where):
    value = loss.item()
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite loss {value} at {where[0]}", round_index=where[1], task_id=where[2])
    for p in pair.student.parameters():
        p.grad = None
    loss.backward()
    lr = sgd_step(state, params, [p.grad for p in params], cfg.lr0)
    for p in pair.student.parameters():
        p.grad = None
    return lr


def _momentum(cfg: PretrainConfig, k: int, total: int) -> float:
    if cfg.momentum_schedule == "constant" or total <= 1:
        return cfg.momentum
    return 1.0 - (1.0 - cfg.momentum) * (math.cos(math.pi * k / (total - 1)) + 1.0) / 2.0


def _task_order(manifests, cfg: PretrainConfig, r: int) -> list:
    order = list(range(len(manifests)))
    if cfg.shuffle_task_order:
        order = list(np.random.default_rng([cfg.seed, r, 17]).permutation(order))
    return order


def _new_state(cfg: PretrainConfig, total: int, per_round: int) -> OptimizerState:
    return OptimizerState(0, total, cfg.lr0, per_round if cfg.cosine_restarts else 0)


def _maybe_checkpoint(pair, state, cfg, r):
    if cfg.checkpoint_every and cfg.checkpoint_dir and (r + 1) % cfg.checkpoint_every == 0:
        Path(cfg.checkpoint_dir).mkdir(parents=True, exist_ok=True)
        save_checkpoint(pair, state, Path(cfg.checkpoint_dir) / f"round_{r + 1:04d}.ark")


def _train_epoch(pair, manifest, cfg, aug, state, epoch, label, split="pretrain"):
    task = manifest.task
    params = _trainable(pair, [task.task_id])
    lt_sum = lc_sum = 0.0
    steps = 0
    lr = state.lr
    for batch in D.batch_iterator(manifest, split, cfg.batch_size, cfg.seed, epoch):
        lt, lc = _batch_losses(pair, batch, task, cfg, aug, epoch)
        loss = total_loss(lt, lc, cfg.consistency_weight) if lc is not None else lt
        lr = _step(pair, params, loss, state, cfg, (label, epoch, task.task_id))
        lt_sum += lt.item()
        lc_sum += lc.item() if lc is not None else 0.0
        steps += 1
    return lt_sum / steps, lc_sum / steps, lr, steps


def run_cyclic(pair: ModelPair, manifests, cfg: PretrainConfig, on_task_end=None):
    """Round-robin over datasets, one epoch each, with an EMA update after every epoch.

    ``on_task_end(round, position, pair)`` is called after each EMA update.
    Returns the same (mutated) pair and the :class:`RoundLog`.
    """
    _check_setup(pair, manifests, cfg)
    aug = _aug(cfg, manifests)
    per_round = sum(D.n_batches(len(m.arrays("pretrain")[0]), cfg.batch_size) for m in manifests)
    state = _new_state(cfg, cfg.rounds * per_round, per_round)
    log = RoundLog("cyclic")
    total_ema = cfg.rounds * len(manifests)
    for r in range(cfg.rounds):
        for pos in _task_order(manifests, cfg, r):
            m = manifests[pos]
            t0 = time.perf_counter()
            lt, lc, lr, steps = _train_epoch(pair, m, cfg, aug, state, r, f"round {r}, task {m.task.name}")
            ema_update(pair, _momentum(cfg, log.ema_updates, total_ema))
            log.ema_updates += 1
            log.append(RoundEntry(r, m.task.task_id, lt, lc, lr, steps, time.perf_counter() - t0))
            if on_task_end is not None:
                on_task_end(r, pos, pair)
        _maybe_checkpoint(pair, state, cfg, r)
    pair.optimizer_state = state
    return pair, log


def run_concurrent(pair: ModelPair, manifests, cfg: PretrainConfig, on_task_end=None):
    """Every step mixes an equal share of each dataset; per-task mean losses are summed.

    The teacher is updated once per pass over the largest dataset.
    """
    _check_setup(pair, manifests, cfg)
    aug = _aug(cfg, manifests)
    k = len(manifests)
    if cfg.batch_size % k:
        raise ConfigurationError(f"batch_size {cfg.batch_size} is not divisible by {k} tasks")
    largest = max(len(m.arrays("pretrain")[0]) for m in manifests)
    per_round = D.n_batches(largest, cfg.batch_size // k)
    state = _new_state(cfg, cfg.rounds * per_round, per_round)
    params = _trainable(pair, [m.task.task_id for m in manifests])
    by_id = {m.task.task_id: m for m in manifests}
    log = RoundLog("concurrent")
    for r in range(cfg.rounds):
        t0 = time.perf_counter()
        sums = {m.task.task_id: [0.0, 0.0] for m in manifests}
        steps = 0
        lr = state.lr
        for segments in D.interleave_equal(manifests, cfg.batch_size, cfg.seed, r):
            loss = None
            for seg in segments:
                task = by_id[seg.task_id].task
                lt, lc = _batch_losses(pair, seg, task, cfg, aug, r)
                part = total_loss(lt, lc, cfg.consistency_weight) if lc is not None else lt
                loss = part if loss is None else loss + part
                sums[seg.task_id][0] += lt.item()
                sums[seg.task_id][1] += lc.item() if lc is not None else 0.0
            lr = _step(pair, params, loss, state, cfg, (f"round {r} (concurrent)", r, None))
            steps += 1
        ema_update(pair, _momentum(cfg, log.ema_updates, cfg.rounds))
        log.ema_updates += 1
        elapsed = time.perf_counter() - t0
        for m in manifests:
            tid = m.task.task_id
            log.append(RoundEntry(r, tid, sums[tid][0] / steps, sums[tid][1] / steps, lr, steps, elapsed))
        if on_task_end is not None:
            on_task_end(r, len(manifests) - 1, pair)
        _maybe_checkpoint(pair, state, cfg, r)
    pair.optimizer_state = state
    return pair, log


def sequential_baseline(pair: ModelPair, manifests, epochs_per_task: int, cfg: PretrainConfig, on_task_end=None, log=None):
    """Train each task for ``epochs_per_task`` epochs in order, never returning to it.

    Every task is its own training stage with a fresh cosine schedule from
    ``cfg.lr0``. EMA updates follow every epoch, as in cyclic mode. ``on_task_end(epoch,
    position, pair)`` fires after every epoch; pass a :class:`RoundLog` as
    ``log`` to collect per-epoch losses.
    """
    if epochs_per_task < 1:
        raise ConfigurationError("epochs_per_task must be >= 1")
    _check_setup(pair, manifests, cfg)
    aug = _aug(cfg, manifests)
    log = log if log is not None else RoundLog("sequential")
    log.mode = "sequential"
    total_ema = epochs_per_task * len(manifests)
    for pos, m in enumerate(manifests):
        per_epoch = D.n_batches(len(m.arrays("pretrain")[0]), cfg.batch_size)
        state = _new_state(cfg, epochs_per_task * per_epoch, per_epoch)
        for e in range(epochs_per_task):
            t0 = time.perf_counter()
            lt, lc, lr, steps = _train_epoch(pair, m, cfg, aug, state, e, f"epoch {e}, task {m.task.name}")
            ema_update(pair, _momentum(cfg, log.ema_updates, total_ema))
            log.ema_updates += 1
            log.append(RoundEntry(e, m.task.task_id, lt, lc, lr, steps, time.perf_counter() - t0))
            if on_task_end is not None:
                on_task_end(e, pos, pair)
    pair.optimizer_state = state
    return pair


def run(pair: ModelPair, manifests, cfg: PretrainConfig, on_task_end=None):
    if cfg.mode == "cyclic":
        return run_cyclic(pair, manifests, cfg, on_task_end)
    return run_concurrent(pair, manifests, cfg, on_task_end)
