"""Subgroup-exclusive probe folds and the train/test subgroup bias protocol."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import TaskSpec
from .errors import ConfigurationError, DataError, UndefinedMetricError
from .estimators import LinearProbe
from .eval import ProbeConfig
from .metrics import auc, fnr
from .stats import ALPHA, format_p, mean_std, t_test_independent


@dataclass
class SubgroupFoldPlan:
    subgroup: str
    fold_index: int
    train_ids: tuple
    test_ids: dict
    classes: tuple

    def to_json(self) -> dict:
        return {
            "subgroup": self.subgroup,
            "fold_index": self.fold_index,
            "train_ids": list(self.train_ids),
            "test_ids": {k: list(v) for k, v in sorted(self.test_ids.items())},
            "classes": list(self.classes),
        }


def _content_seed(seed: int, ids) -> int:
    """Seed derived from a set of ids, independent of subgroup names."""
    digest = hashlib.sha256("\n".join(sorted(ids)).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") ^ (int(seed) & 0xFFFFFFFF)


def _kept_indicators(task: TaskSpec, labels, excluded: tuple) -> tuple:
    """(kept class names, n x k indicator matrix) with excluded classes dropped."""
    unknown = sorted(set(excluded) - set(task.class_names))
    if unknown:
        raise ConfigurationError(f"excluded classes not in task {task.name!r}: {unknown}")
    keep = [j for j, c in enumerate(task.class_names) if c not in excluded]
    if not keep:
        raise ConfigurationError("every class is excluded")
    ind = np.asarray(labels, dtype=np.float64).reshape(len(labels), task.n_classes)
    return tuple(task.class_names[j] for j in keep), ind[:, keep]


def _check_task(task: TaskSpec) -> None:
    if task.label_mode == "multiclass":
        raise ConfigurationError("the bias protocol needs multilabel or binary labels (per-class positives and negatives)")


def build_exclusive_folds(
    records,
    task: TaskSpec,
    n_folds_per_subgroup: int = 20,
    excluded_classes=(),
    seed: int = 0,
    cases_per_class: int | None = None,
    subgroup_field: str = "subgroup",
) -> list:
    """Disjoint single-subgroup training folds, balanced per class.

    Candidates come from the ``train`` split. Each fold holds
    ``cases_per_class`` records positive for exactly one kept class, for every
    class, plus the same number of records with no kept positive. The default
    count is the scarcest bucket (over classes, negatives and subgroups)
    divided by the fold count, so all folds of both subgroups have equal size.
    Test ids are the ``test`` split of each subgroup.
    """
    _check_task(task)
    if n_folds_per_subgroup < 2:
        raise ConfigurationError("need at least 2 folds per subgroup for a t-test")
    records = list(records)
    groups = [getattr(r, subgroup_field) for r in records]
    if any(g is None for g in groups):
        missing = [r.id for r, g in zip(records, groups) if g is None][:5]
        raise DataError(f"records without a {subgroup_field!r} value: {missing}")
    subgroups = sorted(set(groups))
    if len(subgroups) != 2:
        raise ConfigurationError(f"the protocol compares exactly two subgroups, found {subgroups}")
    classes, ind = _kept_indicators(task, [r.labels for r in records], tuple(excluded_classes))

    buckets = {}
    for s in subgroups:
        idx = [i for i, r in enumerate(records) if r.split == "train" and groups[i] == s]
        per = {}
        for j, c in enumerate(classes):
            per[c] = sorted(records[i].id for i in idx if ind[i, j] == 1 and ind[i].sum() == 1)
        per[None] = sorted(records[i].id for i in idx if ind[i].sum() == 0)
        buckets[s] = per
    counts = {s: {("<none>" if c is None else c): len(v) for c, v in per.items()} for s, per in buckets.items()}
    scarcest = min(n for per in counts.values() for n in per.values())
    cases = scarcest // n_folds_per_subgroup if cases_per_class is None else int(cases_per_class)
    if cases < 1 or cases * n_folds_per_subgroup > scarcest:
        raise DataError(
            f"not enough single-positive cases for {n_folds_per_subgroup} disjoint folds "
            f"with {max(cases, 1)} per class; counts per subgroup: {counts}"
        )

    test_ids = {s: tuple(sorted(r.id for r, g in zip(records, groups) if r.split == "test" and g == s)) for s in subgroups}
    plans = []
    for s in subgroups:
        per = buckets[s]
        pool = [i for ids in per.values() for i in ids]
        rng = np.random.default_rng(_content_seed(seed, pool))
        shuffled = {c: [ids[k] for k in rng.permutation(len(ids))] for c, ids in per.items()}
        for f in range(n_folds_per_subgroup):
            chosen = []
            for c in list(classes) + [None]:
                chosen.extend(shuffled[c][f * cases : (f + 1) * cases])
            plans.append(SubgroupFoldPlan(s, f, tuple(sorted(chosen)), dict(test_ids), classes))
    return plans


@dataclass
class BiasRow:
    class_name: str
    train_subgroup: str
    test_subgroup: str
    mean_auc: float
    std_auc: float
    t: float
    p: float
    n_folds: int

    @property
    def significant(self) -> bool:
        return self.p < ALPHA


CSV_COLUMNS = ("class", "train_subgroup", "test_subgroup", "mean_auc", "std_auc", "t", "p", "significant")


@dataclass
class BiasReport:
    """Per class, four (train subgroup, test subgroup) conditions.

    Each row's t compares the folds trained on its own subgroup against the
    folds trained on the other subgroup, both scored on the row's test
    subgroup. ``fnr`` maps class -> subgroup -> FNR of a probe trained on all
    train records.
    """

    rows: list
    fnr: dict = field(default_factory=dict)
    subgroups: tuple = ()
    classes: tuple = ()

    @property
    def significant_classes(self) -> list:
        return sorted({r.class_name for r in self.rows if r.significant})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r.class_name, r.train_subgroup, r.test_subgroup, f"{r.mean_auc:.10g}", f"{r.std_auc:.10g}", f"{r.t:.10g}", format_p(r.p), int(r.significant)])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "subgroups": list(self.subgroups),
            "classes": list(self.classes),
            "alpha": ALPHA,
            "significant_classes": self.significant_classes,
            "rows": [
                {
                    "class": r.class_name,
                    "train_subgroup": r.train_subgroup,
                    "test_subgroup": r.test_subgroup,
                    "mean_auc": r.mean_auc,
                    "std_auc": r.std_auc,
                    "t": None if math.isinf(r.t) else r.t,
                    "p": r.p,
                    "significant": r.significant,
                    "n_folds": r.n_folds,
                }
                for r in self.rows
            ],
            "fnr": self.fnr,
        }

    def write(self, stem) -> None:
        stem = Path(stem)
        stem.with_suffix(".csv").write_text(self.to_csv(), encoding="utf-8")
        stem.with_suffix(".json").write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _fit_probe(by_id: dict, ids, task: TaskSpec, classes: tuple, cfg: ProbeConfig, excluded: tuple) -> LinearProbe:
    X = np.stack([by_id[i].embedding for i in ids])
    _, Y = _kept_indicators(task, [by_id[i].labels for i in ids], excluded)
    probe = LinearProbe("multilabel", len(classes), cfg.epochs, cfg.lr, cfg.batch_size, _content_seed(cfg.seed, ids), cfg.standardize)
    return probe.fit(X, Y)


def run_bias_experiment(embeddings, plans, task: TaskSpec, cfg: ProbeConfig | None = None, equal_var: bool = True, fnr_threshold: float = 0.5) -> BiasReport:
    """One probe per fold, per-class AUC on each subgroup's test set, then t-tests across folds."""
    _check_task(task)
    cfg = cfg or ProbeConfig()
    if not plans:
        raise ConfigurationError("no fold plans")
    by_id = {r.id: r for r in embeddings}
    needed = {i for p in plans for i in p.train_ids} | {i for p in plans for ids in p.test_ids.values() for i in ids}
    missing = sorted(needed - set(by_id))
    if missing:
        raise DataError(f"{len(missing)} plan ids have no embedding, e.g. {missing[:5]}")
    classes = plans[0].classes
    excluded = tuple(c for c in task.class_names if c not in classes)
    subgroups = tuple(sorted({p.subgroup for p in plans}))
    if len(subgroups) != 2:
        raise ConfigurationError(f"plans must cover exactly two subgroups, found {subgroups}")
    test_sets = {}
    for s in subgroups:
        ids = plans[0].test_ids[s]
        X = np.stack([by_id[i].embedding for i in ids])
        _, Y = _kept_indicators(task, [by_id[i].labels for i in ids], excluded)
        test_sets[s] = (X, Y)

    # aucs[class][train subgroup][test subgroup] -> per-fold values
    aucs = {c: {a: {b: [] for b in subgroups} for a in subgroups} for c in classes}
    for plan in plans:
        probe = _fit_probe(by_id, plan.train_ids, task, classes, cfg, excluded)
        for s, (X, Y) in test_sets.items():
            scores = probe.decision_function(X)
            for j, c in enumerate(classes):
                try:
                    aucs[c][plan.subgroup][s].append(auc(scores[:, j], Y[:, j]))
                except UndefinedMetricError:
                    raise DataError(f"class {c!r} lacks positives or negatives in the {s!r} test split") from None

    rows = []
    for c in classes:
        for a in subgroups:
            other = subgroups[1] if a == subgroups[0] else subgroups[0]
            for b in subgroups:
                vals = aucs[c][a][b]
                m, sd = mean_std(vals)
                res = t_test_independent(vals, aucs[c][other][b], equal_var)
                rows.append(BiasRow(c, a, b, m, sd, res.t, res.p, len(vals)))

    all_train = sorted({r.id for r in embeddings if r.split == "train" and r.subgroup in subgroups})
    full = _fit_probe(by_id, all_train, task, classes, cfg, excluded)
    rates = {}
    for s, (X, Y) in test_sets.items():
        scores = full.decision_function(X)
        for j, c in enumerate(classes):
            try:
                value = fnr(scores[:, j], Y[:, j], threshold=fnr_threshold)
            except UndefinedMetricError:
                value = None
            rates.setdefault(c, {})[s] = value
    return BiasReport(rows, rates, subgroups, classes)
