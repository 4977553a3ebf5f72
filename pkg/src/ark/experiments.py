"""Experiment harnesses: forgetting, convergence curves and the projector/consistency ablation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

from . import data as D
from . import tensor as T
from .errors import ConfigurationError, RegistryError
from .eval import FinetuneConfig, ProbeConfig, evaluate_scores, export_embeddings, finetune_trials, linear_probe, probe_trials
from .nn import EncoderConfig, ModelPair, build_model, embed_images
from .pretrain import PretrainConfig, _fmt, run, run_concurrent, run_cyclic, sequential_baseline
from .stats import compare_conditions, format_p


def probe_score(pair: ModelPair, manifest: D.DatasetManifest, cfg: ProbeConfig, source: str = "teacher") -> float:
    """Single-trial probe metric of ``pair``'s embeddings on ``manifest`` (train -> test)."""
    stage = "projector" if pair.use_projector else "encoder"
    train = export_embeddings(pair, manifest, source, stage, splits=("train",))
    test = export_embeddings(pair, manifest, source, stage, splits=("test",))
    return linear_probe(train, test, manifest.task, cfg).mean


# -- forgetting -----------------------------------------------------------


def head_score(pair: ModelPair, manifest: D.DatasetManifest, split: str = "test") -> float:
    """Metric of the student's own head for ``manifest``'s task on ``split``."""
    head = pair.student.heads.get(manifest.task.task_id)
    if head is None:
        raise RegistryError(f"no head registered for task_id {manifest.task.task_id}")
    _, images, targets = manifest.arrays(split)
    with T.no_grad():
        scores = head(T.Tensor(embed_images(pair, images, "student", "projector" if pair.use_projector else "encoder"))).data
    return evaluate_scores(manifest.task, scores, targets)[0]


@dataclass
class ForgettingResult:
    """Per-task score right after the task's last training epoch and after all training.

    ``delta[t] = final[t] - after_stage[t]``; negative values mean forgetting.
    """

    mode: str
    after_stage: dict
    final: dict

    @property
    def delta(self) -> dict:
        return {t: self.final[t] - self.after_stage[t] for t in self.final}

    def rows(self):
        for t in sorted(self.final):
            yield [self.mode, t, _fmt(self.after_stage[t]), _fmt(self.final[t]), _fmt(self.delta[t])]


def forgetting_experiment(
    manifests,
    enc: EncoderConfig,
    cfg: PretrainConfig,
    embed_dim: int = 64,
    probe_cfg: ProbeConfig | None = None,
    source: str = "teacher",
    evaluator: str = "probe",
) -> dict:
    """Cyclic pretraining against the sequential baseline at an equal epoch budget.

    Both start from the same initialisation (``cfg.seed``). ``evaluator`` is
    ``"probe"`` (a fresh linear probe on frozen ``source`` embeddings) or
    ``"head"`` (the student's own pretraining head). Scores use each task's
    ``test`` split. Returns ``{"cyclic": ForgettingResult, "sequential": ForgettingResult}``.
    """
    if evaluator not in ("probe", "head"):
        raise ConfigurationError(f"evaluator must be 'probe' or 'head', got {evaluator!r}")
    probe_cfg = probe_cfg or ProbeConfig(seed=cfg.seed)

    def score(pair, m):
        return head_score(pair, m) if evaluator == "head" else probe_score(pair, m, probe_cfg, source)

    tasks = [m.task for m in manifests]
    results = {}
    for mode in ("cyclic", "sequential"):
        after = {}

        def hook(r, pos, pair):
            if r == cfg.rounds - 1:
                after[manifests[pos].task.task_id] = score(pair, manifests[pos])

        pair = build_model(enc, embed_dim, tasks, cfg.seed, cfg.momentum, cfg.use_projector)
        if mode == "cyclic":
            run_cyclic(pair, manifests, replace(cfg, mode="cyclic"), hook)
        else:
            sequential_baseline(pair, manifests, cfg.rounds, replace(cfg, mode="cyclic"), hook)
        last = manifests[-1].task.task_id
        final = {m.task.task_id: after[last] if m.task.task_id == last else score(pair, m) for m in manifests}
        results[mode] = ForgettingResult(mode, after, final)
    return results


def forgetting_csv(results: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "task_id", "after_stage", "final", "delta"])
    for mode in sorted(results):
        w.writerows(results[mode].rows())
    return buf.getvalue()


# -- convergence ----------------------------------------------------------


def compare_convergence(manifests, enc: EncoderConfig, cfg: PretrainConfig, embed_dim: int = 64) -> dict:
    """Run cyclic and concurrent pretraining from the same initialisation; returns mode -> RoundLog."""
    tasks = [m.task for m in manifests]
    logs = {}
    for mode, loop in (("cyclic", run_cyclic), ("concurrent", run_concurrent)):
        pair = build_model(enc, embed_dim, tasks, cfg.seed, cfg.momentum, cfg.use_projector)
        _, logs[mode] = loop(pair, manifests, replace(cfg, mode=mode))
    return logs


def curves_csv(logs: dict) -> str:
    """Long-format per-round mean task loss for each mode (one row per mode and round)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "round", "mean_task_loss", "mean_consistency_loss"])
    for mode in sorted(logs):
        log = logs[mode]
        for r in sorted({e.round for e in log.entries}):
            entries = [e for e in log.entries if e.round == r]
            w.writerow([mode, r, _fmt(np.mean([e.task_loss for e in entries])), _fmt(np.mean([e.consistency_loss for e in entries]))])
    return buf.getvalue()


# -- ablation -------------------------------------------------------------


@dataclass(frozen=True)
class AblationCondition:
    source: str
    use_projector: bool
    use_consistency: bool

    @property
    def label(self) -> str:
        proj = "+proj" if self.use_projector else "-proj"
        cons = "+consist" if self.use_consistency else "-consist"
        return f"{self.source},{proj},{cons}"


ABLATION_PLAN = (
    AblationCondition("teacher", False, False),
    AblationCondition("teacher", False, True),
    AblationCondition("student", True, True),
    AblationCondition("teacher", True, True),
)


@dataclass
class AblationTable:
    """Best-vs-others comparison per target task, rows in :data:`ABLATION_PLAN` order."""

    rows: list = field(default_factory=list)
    reports: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["target_task", "source", "projector", "consistency", "metric", "n_trials", "mean", "std", "status", "t", "p"])
        for r in self.rows:
            w.writerow(r)
        return buf.getvalue()


def run_ablation(pretrain_manifests, targets, enc: EncoderConfig, cfg: PretrainConfig, embed_dim: int = 64, probe_cfg: ProbeConfig | None = None, n_trials: int = 10) -> AblationTable:
    """Pretrain once per (projector, consistency) setting and probe each plan row on every target.

    Trials are probe seeds on frozen embeddings of a single pretraining run.
    """
    probe_cfg = probe_cfg or ProbeConfig(seed=cfg.seed)
    tasks = [m.task for m in pretrain_manifests]
    pairs = {}
    for cond in ABLATION_PLAN:
        key = (cond.use_projector, cond.use_consistency)
        if key not in pairs:
            pair = build_model(enc, embed_dim, tasks, cfg.seed, cfg.momentum, key[0])
            pairs[key], _ = run(pair, pretrain_manifests, replace(cfg, use_projector=key[0], use_consistency=key[1]))
    table = AblationTable()
    for target in targets:
        reports = []
        for cond in ABLATION_PLAN:
            pair = pairs[(cond.use_projector, cond.use_consistency)]
            stage = "projector" if cond.use_projector else "encoder"
            train = export_embeddings(pair, target, cond.source, stage, splits=("train",))
            test = export_embeddings(pair, target, cond.source, stage, splits=("test",))
            reports.append(probe_trials(train, test, target.task, probe_cfg, n_trials, cond.label))
        table.reports[target.task.task_id] = reports
        for cond, rep, row in zip(ABLATION_PLAN, reports, compare_conditions(reports)):
            table.rows.append(
                [
                    target.task.task_id, cond.source, int(cond.use_projector), int(cond.use_consistency), rep.metric,
                    rep.n_trials, _fmt(rep.mean), _fmt(rep.std), row.status, _fmt(row.t), format_p(row.p),
                ]
            )
    return table


# -- transfer -------------------------------------------------------------


def transfer_experiment(pretrain_manifests, target, enc: EncoderConfig, cfg: PretrainConfig, embed_dim: int = 64, probe_cfg: ProbeConfig | None = None, finetune_cfg: FinetuneConfig | None = None, n_trials: int = 10, pair: ModelPair | None = None) -> dict:
    """Probe and fine-tune on ``target`` from the pretrained teacher and from random init.

    Both inits share ``cfg.seed``. Pass ``pair`` to reuse an already
    pretrained model. Returns label -> MetricReport for ``probe_pretrained``,
    ``probe_random``, ``finetune_pretrained`` and ``finetune_random``.
    """
    probe_cfg = probe_cfg or ProbeConfig(seed=cfg.seed)
    finetune_cfg = finetune_cfg or FinetuneConfig(encoder=enc, embed_dim=embed_dim, seed=cfg.seed)
    tasks = [m.task for m in pretrain_manifests]
    if pair is None:
        pair = build_model(enc, embed_dim, tasks, cfg.seed, cfg.momentum, cfg.use_projector)
        pair, _ = run(pair, pretrain_manifests, cfg)
    random_pair = build_model(enc, embed_dim, tasks, cfg.seed, cfg.momentum, cfg.use_projector)
    stage = "projector" if pair.use_projector else "encoder"
    out = {}
    for name, p in (("pretrained", pair), ("random", random_pair)):
        train = export_embeddings(p, target, "teacher", stage, splits=("train",))
        test = export_embeddings(p, target, "teacher", stage, splits=("test",))
        out[f"probe_{name}"] = probe_trials(train, test, target.task, probe_cfg, n_trials, f"probe_{name}")
    out["finetune_pretrained"] = finetune_trials(pair, target, finetune_cfg, n_trials, "finetune_pretrained")
    out["finetune_random"] = finetune_trials(None, target, replace(finetune_cfg, encoder=enc, embed_dim=embed_dim), n_trials, "finetune_random")
    return out
