"""Command-line entry point: ``ark <command> --config run.json [--seed N] [--output-dir D]``.

Exit codes: 0 success, 1 other ark error, 2 configuration error,
3 numerical divergence, 4 missing prerequisite artifact.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .bias import build_exclusive_folds, run_bias_experiment
from .errors import ArkError, ConfigurationError, ContractError, DivergenceError, MissingArtifactError
from .eval import FinetuneConfig, MetricReport, ProbeConfig, finetune_trials, load_embeddings, probe_trials, save_embeddings, export_embeddings
from .experiments import run_ablation
from .nn import EncoderConfig, build_model, load_checkpoint, save_checkpoint
from .pretrain import PretrainConfig, run
from .stats import compare_conditions, format_p

log = logging.getLogger("ark")

COMMANDS = ("gen-data", "pretrain", "export", "probe", "finetune", "bias", "ablate", "report")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_MISSING = 0, 1, 2, 3, 4

# section -> key -> (allowed types, default)
_NUM = (int, float)
SCHEMA = {
    "data": {
        "n_tasks": (int, 4),
        "sizes": ((int, list), 600),
        "image_size": (int, 32),
        "vocab_overlap": (_NUM, 0.5),
        "subgroup_skew": (_NUM, 0.0),
        "n_classes": (int, 4),
        "label_modes": ((list, type(None)), None),
        "prevalence": (_NUM, 0.3),
        "distractors": (int, 0),
        "split_fractions": ((dict, type(None)), None),
        "radius_range": (list, [0.1, 0.16]),
    },
    "model": {
        "encoder": (str, "conv"),
        "widths": (list, [16, 32, 32]),
        "feature_dim": (int, 128),
        "embed_dim": (int, 64),
        "kernel_size": (int, 3),
        "stride": (int, 2),
        "pool": (str, "max"),
        "input_mean": (_NUM, 0.2),
        "input_std": (_NUM, 0.25),
        "projector_hidden": (int, 0),
        "use_projector": (bool, True),
    },
    "pretrain": {
        "mode": (str, "cyclic"),
        "rounds": (int, 20),
        "lr0": (_NUM, 0.3),
        "momentum": (_NUM, 0.9),
        "batch_size": (int, 32),
        "consistency_weight": (_NUM, 1.0),
        "use_consistency": (bool, True),
        "checkpoint_every": (int, 0),
        "cosine_restarts": (bool, False),
        "shuffle_task_order": (bool, False),
        "momentum_schedule": (str, "constant"),
        "tasks": ((list, type(None)), None),
    },
    "eval": {
        "target_tasks": ((list, type(None)), None),
        "source": (str, "teacher"),
        "stage": (str, "projector"),
        "n_trials": (int, 10),
        "probe_epochs": (int, 100),
        "probe_lr": (_NUM, 0.1),
        "probe_batch_size": (int, 64),
        "standardize": (bool, True),
        "train_fractions": (list, [1.0]),
        "k_shot": ((int, type(None)), None),
        "finetune_epochs": (int, 20),
        "finetune_lr": (_NUM, 0.05),
        "finetune_batch_size": (int, 32),
        "finetune_init": (str, "both"),
        "report_inputs": (list, []),
        "curve_logs": (list, []),
    },
    "bias": {
        "task": (int, 0),
        "n_folds_per_subgroup": (int, 20),
        "excluded_classes": (list, []),
        "cases_per_class": ((int, type(None)), None),
        "equal_var": (bool, True),
        "fnr_threshold": (_NUM, 0.5),
    },
}
TOP_LEVEL = {"seed": (int, 0), "output_dir": (str, "ark-out")}


def _type_ok(value, types) -> bool:
    types = types if isinstance(types, tuple) else (types,)
    if isinstance(value, bool) and bool not in types:
        return False
    return isinstance(value, types)


def resolve_config(raw: dict, seed=None, output_dir=None) -> dict:
    """Validate ``raw`` against the strict schema and fill defaults.

    Unknown keys and wrongly typed values raise :class:`ConfigurationError`
    naming the field path (``section.key``).
    """
    if not isinstance(raw, dict):
        raise ConfigurationError("config: top level must be a JSON object")
    known = set(SCHEMA) | set(TOP_LEVEL)
    for key in raw:
        if key not in known:
            raise ConfigurationError(f"config: unknown key {key!r}")
    out = {}
    for key, (types, default) in TOP_LEVEL.items():
        value = raw.get(key, default)
        if not _type_ok(value, types):
            raise ConfigurationError(f"config: {key} has invalid type {type(value).__name__}")
        out[key] = value
    for section, fields in SCHEMA.items():
        given = raw.get(section, {})
        if not isinstance(given, dict):
            raise ConfigurationError(f"config: {section} must be an object")
        for key in given:
            if key not in fields:
                raise ConfigurationError(f"config: unknown key {section}.{key}")
        resolved = {}
        for key, (types, default) in fields.items():
            value = given.get(key, copy.deepcopy(default))
            if not _type_ok(value, types):
                raise ConfigurationError(f"config: {section}.{key} has invalid type {type(value).__name__}")
            resolved[key] = value
        out[section] = resolved
    if seed is not None:
        out["seed"] = seed
    if output_dir is not None:
        out["output_dir"] = str(output_dir)
    if out["data"]["n_tasks"] < 1:
        raise ConfigurationError("config: data.n_tasks must be >= 1")
    if out["eval"]["n_trials"] < 1:
        raise ConfigurationError("config: eval.n_trials must be >= 1")
    if out["eval"]["finetune_init"] not in ("pretrained", "random", "both"):
        raise ConfigurationError("config: eval.finetune_init must be 'pretrained', 'random' or 'both'")
    return out


# -- artifact layout --------------------------------------------------------


class Run:
    """Resolved config plus the artifact paths under ``output_dir``."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.root = Path(cfg["output_dir"])
        self.seed = cfg["seed"]

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def outdir(self, name: str) -> Path:
        d = self.path(name)
        d.mkdir(parents=True, exist_ok=True)
        return d

    def require(self, path: Path, hint: str) -> Path:
        if not path.exists():
            raise MissingArtifactError(f"missing prerequisite {path} (run `ark {hint}` first)")
        return path

    # data
    def manifests(self) -> list:
        index = self.require(self.path("data", "MANIFEST.json"), "gen-data")
        entries = json.loads(index.read_text(encoding="utf-8"))["tasks"]
        return [D.load_manifest(self.require(self.path("data", e["path"]), "gen-data")) for e in entries]

    def task_split(self, manifests) -> tuple:
        """(pretraining manifests, target manifests) from the config."""
        by_id = {m.task.task_id: m for m in manifests}
        ids = sorted(by_id)
        pre = self.cfg["pretrain"]["tasks"]
        if pre is None:
            pre = ids[:-1] if len(ids) > 1 else ids
        tgt = self.cfg["eval"]["target_tasks"]
        if tgt is None:
            tgt = [i for i in ids if i not in pre] or ids
        for name, group in (("pretrain.tasks", pre), ("eval.target_tasks", tgt)):
            unknown = [i for i in group if i not in by_id]
            if unknown:
                raise ConfigurationError(f"config: {name} references unknown task ids {unknown}")
        return [by_id[i] for i in pre], [by_id[i] for i in tgt]

    # model
    def encoder_config(self, image_shape) -> EncoderConfig:
        m = self.cfg["model"]
        return EncoderConfig(
            m["encoder"], tuple(m["widths"]), tuple(image_shape), m["feature_dim"], m["kernel_size"], m["stride"],
            m["pool"], float(m["input_mean"]), float(m["input_std"]),
        )

    def pretrain_config(self, checkpoint_dir=None) -> PretrainConfig:
        p = self.cfg["pretrain"]
        return PretrainConfig(
            mode=p["mode"], rounds=p["rounds"], lr0=float(p["lr0"]), momentum=float(p["momentum"]),
            batch_size=p["batch_size"], consistency_weight=float(p["consistency_weight"]),
            use_projector=self.cfg["model"]["use_projector"], use_consistency=p["use_consistency"], seed=self.seed,
            checkpoint_every=p["checkpoint_every"], checkpoint_dir=checkpoint_dir, cosine_restarts=p["cosine_restarts"],
            shuffle_task_order=p["shuffle_task_order"], momentum_schedule=p["momentum_schedule"],
        )

    def probe_config(self, train_fraction=1.0) -> ProbeConfig:
        e = self.cfg["eval"]
        return ProbeConfig(e["probe_epochs"], float(e["probe_lr"]), e["probe_batch_size"], self.seed, train_fraction, e["k_shot"], e["standardize"])

    def checkpoint(self, source: str) -> Path:
        return self.require(self.path("pretrain", f"{source}.ark"), "pretrain")

    def stage(self, pair) -> str:
        stage = self.cfg["eval"]["stage"]
        return stage if pair.use_projector else "encoder"

    def embedding_path(self, task_id: int) -> Path:
        e = self.cfg["eval"]
        return self.path("embeddings", f"task{task_id}.{e['source']}.jsonl")


# -- commands ---------------------------------------------------------------


def cmd_gen_data(run_: Run) -> None:
    d = run_.cfg["data"]
    suite = D.generate_synthetic_suite(
        n_tasks=d["n_tasks"], sizes=d["sizes"], image_size=d["image_size"], vocab_overlap=float(d["vocab_overlap"]),
        subgroup_skew=float(d["subgroup_skew"]), seed=run_.seed, n_classes=d["n_classes"], label_modes=d["label_modes"],
        prevalence=float(d["prevalence"]), distractors=d["distractors"], split_fractions=d["split_fractions"],
        radius_range=tuple(d["radius_range"]),
    )
    out = run_.outdir("data")
    entries = []
    for m in suite:
        name = f"task{m.task.task_id}.jsonl"
        D.save_manifest(m, out / name)
        D.load_manifest(out / name)
        entries.append({"task_id": m.task.task_id, "name": m.task.name, "path": name, "n_records": len(m.records)})
    D.check_suite_leaks(suite)
    index = {"seed": run_.seed, "image_size": d["image_size"], "tasks": entries}
    (out / "MANIFEST.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log.info("wrote %d task manifests to %s", len(suite), out)


def cmd_pretrain(run_: Run) -> None:
    pre, _ = run_.task_split(run_.manifests())
    out = run_.outdir("pretrain")
    enc = run_.encoder_config(pre[0].image_shape)
    m = run_.cfg["model"]
    cfg = run_.pretrain_config(str(out / "checkpoints"))
    pair = build_model(enc, m["embed_dim"], [x.task for x in pre], run_.seed, cfg.momentum, m["use_projector"], m["projector_hidden"])
    pair, round_log = run(pair, pre, cfg)
    save_checkpoint(pair, None, out / "teacher.ark", parts=("teacher",))
    save_checkpoint(pair, pair.optimizer_state, out / "student.ark", parts=("student",))
    round_log.to_csv(out / "round_log.csv")
    log.info("pretrained %s for %d rounds; %d EMA updates", cfg.mode, cfg.rounds, round_log.ema_updates)


def cmd_export(run_: Run) -> None:
    source = run_.cfg["eval"]["source"]
    if source not in ("teacher", "student"):
        raise ConfigurationError("config: eval.source must be 'teacher' or 'student'")
    pair, _ = load_checkpoint(run_.checkpoint(source), heads=False)
    out = run_.outdir("embeddings")
    for m in run_.manifests():
        recs = export_embeddings(pair, m, source, run_.stage(pair))
        save_embeddings(recs, run_.embedding_path(m.task.task_id))
    log.info("exported embeddings to %s", out)


def _split_embeddings(records):
    return [r for r in records if r.split == "train"], [r for r in records if r.split == "test"]


def cmd_probe(run_: Run) -> None:
    _, targets = run_.task_split(run_.manifests())
    out = run_.outdir("probe")
    n = run_.cfg["eval"]["n_trials"]
    k_shot = run_.cfg["eval"]["k_shot"]
    fractions = [None] if k_shot is not None else [float(f) for f in run_.cfg["eval"]["train_fractions"]]
    curve = ["task_id,train_fraction,k_shot,metric,n_trials,mean,std"]
    for m in targets:
        train, test = _split_embeddings(load_embeddings(run_.require(run_.embedding_path(m.task.task_id), "export")))
        for frac in fractions:
            tag = f"k{k_shot}" if k_shot is not None else "frac" + format(frac, "g").replace(".", "p")
            rep = probe_trials(train, test, m.task, run_.probe_config(frac if frac is not None else 1.0), n, f"probe_task{m.task.task_id}_{tag}")
            rep.write(out / f"task{m.task.task_id}_{tag}")
            std = "" if rep.n_trials < 2 else format(rep.std, ".17g")
            curve.append(f"{m.task.task_id},{'' if frac is None else format(frac, 'g')},{'' if k_shot is None else k_shot},{rep.metric},{rep.n_trials},{rep.mean:.17g},{std}")
            log.info("probe task %d %s: %.4f", m.task.task_id, tag, rep.mean)
    (out / "data_efficiency.csv").write_text("\n".join(curve) + "\n", encoding="utf-8")


def cmd_finetune(run_: Run) -> None:
    manifests = run_.manifests()
    _, targets = run_.task_split(manifests)
    out = run_.outdir("finetune")
    e = run_.cfg["eval"]
    inits = ("pretrained", "random") if e["finetune_init"] == "both" else (e["finetune_init"],)
    enc = run_.encoder_config(targets[0].image_shape)
    cfg = FinetuneConfig(enc, e["finetune_epochs"], float(e["finetune_lr"]), e["finetune_batch_size"], run_.seed, 1.0, run_.cfg["model"]["embed_dim"])
    for init in inits:
        source = str(run_.checkpoint("teacher")) if init == "pretrained" else None
        for m in targets:
            rep = finetune_trials(source, m, cfg, e["n_trials"], f"finetune_task{m.task.task_id}_{init}")
            rep.write(out / f"task{m.task.task_id}_{init}")
            log.info("finetune task %d from %s: %.4f", m.task.task_id, init, rep.mean)


def cmd_bias(run_: Run) -> None:
    b = run_.cfg["bias"]
    manifests = {m.task.task_id: m for m in run_.manifests()}
    if b["task"] not in manifests:
        raise ConfigurationError(f"config: bias.task {b['task']} is not a generated task")
    task = manifests[b["task"]].task
    records = load_embeddings(run_.require(run_.embedding_path(task.task_id), "export"))
    plans = build_exclusive_folds(records, task, b["n_folds_per_subgroup"], b["excluded_classes"], run_.seed, b["cases_per_class"])
    report = run_bias_experiment(records, plans, task, run_.probe_config(), b["equal_var"], float(b["fnr_threshold"]))
    out = run_.outdir("bias")
    report.write(out / "bias_report")
    (out / "folds.json").write_text(json.dumps([p.to_json() for p in plans], indent=1) + "\n", encoding="utf-8")
    log.info("bias: %d folds, significant classes %s", len(plans), report.significant_classes)


def cmd_ablate(run_: Run) -> None:
    pre, targets = run_.task_split(run_.manifests())
    enc = run_.encoder_config(pre[0].image_shape)
    table = run_ablation(pre, targets, enc, run_.pretrain_config(), run_.cfg["model"]["embed_dim"], run_.probe_config(), run_.cfg["eval"]["n_trials"])
    out = run_.outdir("ablate")
    (out / "ablation.csv").write_text(table.to_csv(), encoding="utf-8")
    for tid, reports in table.reports.items():
        for i, rep in enumerate(reports):
            rep.write(out / f"task{tid}_row{i}")
    log.info("ablation table with %d rows", len(table.rows))


def _display(path: Path, root: Path) -> str:
    """``path`` relative to the output dir when inside it, so reports do not depend on where runs live."""
    try:
        return str(path.resolve().relative_to(root.resolve()))
    except ValueError:
        return str(path)


def _default_report_inputs(run_: Run) -> list:
    found = []
    for sub in ("probe", "finetune"):
        d = run_.path(sub)
        if d.is_dir():
            found.extend(sorted(d.glob("*.json")))
    return found


def cmd_report(run_: Run) -> None:
    e = run_.cfg["eval"]
    inputs = [Path(p) for p in e["report_inputs"]] or _default_report_inputs(run_)
    curves = [Path(p) for p in e["curve_logs"]]
    if not curves and run_.path("pretrain", "round_log.csv").exists():
        curves = [run_.path("pretrain", "round_log.csv")]
    if not inputs and not curves:
        raise MissingArtifactError("nothing to report: no metric reports or round logs found (run probe/finetune/pretrain first)")
    out = run_.outdir("report")
    if inputs:
        groups = {}
        for p in inputs:
            rep = MetricReport.from_json(json.loads(run_.require(p, "probe").read_text(encoding="utf-8")))
            rep.label = rep.label or p.stem
            # compare conditions that share a target (file prefix) and a metric
            groups.setdefault((p.stem.split("_")[0], rep.metric), []).append(rep)
        lines = ["group,metric,label,n_trials,mean,std,status,t,p"]
        for (group, metric), reports in sorted(groups.items()):
            for row in compare_conditions(reports):
                std = "" if np.isnan(row.std) else format(row.std, ".17g")
                lines.append(f"{group},{metric},{row.label},{row.n},{row.mean:.17g},{std},{row.status},{row.t:.17g},{format_p(row.p)}")
        (out / "significance.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if curves:
        lines = ["source,round,mean_task_loss,mean_consistency_loss"]
        for p in curves:
            rows = [line.split(",") for line in run_.require(p, "pretrain").read_text(encoding="utf-8").splitlines()[1:] if line]
            for r in sorted({int(x[0]) for x in rows}):
                sel = [x for x in rows if int(x[0]) == r]
                lt = np.mean([float(x[2]) for x in sel])
                lc = np.mean([float(x[3]) for x in sel])
                lines.append(f"{_display(p, run_.root)},{r},{lt:.17g},{lc:.17g}")
        (out / "convergence.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    log.info("report written to %s", out)


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "export": cmd_export,
    "probe": cmd_probe,
    "finetune": cmd_finetune,
    "bias": cmd_bias,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ark", description="Cyclic multi-task pretraining and evaluation on synthetic suites.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="JSON run config")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--output-dir", default=None, help="override the config output_dir")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        path = Path(args.config)
        if not path.exists():
            raise ConfigurationError(f"config file {path} not found")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {path}: invalid JSON ({exc})") from None
        cfg = resolve_config(raw, args.seed, args.output_dir)
        run_ = Run(cfg)
        run_.root.mkdir(parents=True, exist_ok=True)
        resolved = run_.path(f"{args.command}.config.json")
        resolved.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        HANDLERS[args.command](run_)
    except (ConfigurationError, ContractError) as exc:
        print(f"ark: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        where = f" (round {exc.round_index}, task {exc.task_id})" if exc.round_index is not None else ""
        print(f"ark: divergence: {exc}{where}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except MissingArtifactError as exc:
        print(f"ark: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ArkError as exc:
        print(f"ark: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
