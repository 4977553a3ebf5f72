import json
import subprocess
import sys

import pytest

from ark.cli import EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_MISSING, EXIT_OK, main, resolve_config
from ark.errors import ConfigurationError

TINY = {
    "data": {
        "n_tasks": 3, "sizes": [400, 120, 120], "image_size": 16, "label_modes": ["multilabel", "multilabel", "binary"],
        "split_fractions": {"pretrain": 0.5, "train": 0.3, "val": 0.0, "test": 0.2}, "subgroup_skew": 0.5,
    },
    "model": {"widths": [4], "feature_dim": 8, "embed_dim": 6},
    "pretrain": {"rounds": 1, "lr0": 0.05, "batch_size": 20},
    "eval": {"n_trials": 2, "probe_epochs": 3, "finetune_epochs": 1, "train_fractions": [0.5, 1.0]},
    "bias": {"task": 0, "n_folds_per_subgroup": 2},
}


def _write(tmp_path, cfg, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def test_resolve_fills_defaults_and_applies_overrides():
    cfg = resolve_config({"pretrain": {"rounds": 3}}, seed=9, output_dir="x")
    assert cfg["pretrain"]["rounds"] == 3 and cfg["pretrain"]["lr0"] == 0.3
    assert cfg["seed"] == 9 and cfg["output_dir"] == "x"


@pytest.mark.parametrize(
    "raw, path",
    [
        ({"bogus": 1}, "bogus"),
        ({"pretrain": {"round": 3}}, "pretrain.round"),
        ({"pretrain": {"rounds": "3"}}, "pretrain.rounds"),
        ({"model": {"use_projector": 1}}, "model.use_projector"),
        ({"seed": 1.5}, "seed"),
        ({"eval": []}, "eval"),
    ],
)
def test_schema_violations_name_the_field(raw, path):
    with pytest.raises(ConfigurationError, match=path.replace(".", r"\.")):
        resolve_config(raw)


def test_config_errors_exit_2(tmp_path, capsys):
    assert main(["gen-data", "--config", _write(tmp_path, {"data": {"sizes": "many"}})]) == EXIT_CONFIG
    assert "data.sizes" in capsys.readouterr().err
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["gen-data", "--config", str(tmp_path / "bad.json")]) == EXIT_CONFIG
    assert main(["gen-data", "--config", str(tmp_path / "absent.json")]) == EXIT_CONFIG
    cfg = {**TINY, "data": {**TINY["data"], "n_tasks": 2}}
    assert main(["gen-data", "--config", _write(tmp_path, cfg), "--output-dir", str(tmp_path / "o")]) == EXIT_CONFIG


def test_missing_prerequisites_exit_4(tmp_path):
    cfg = _write(tmp_path, TINY)
    out = str(tmp_path / "out")
    for command in ("pretrain", "export", "probe", "finetune", "bias", "ablate", "report"):
        assert main([command, "--config", cfg, "--output-dir", out]) == EXIT_MISSING, command


def test_divergence_exits_3(tmp_path):
    cfg = _write(tmp_path, {**TINY, "pretrain": {"rounds": 1, "lr0": 1e12, "batch_size": 20}})
    out = str(tmp_path / "out")
    assert main(["gen-data", "--config", cfg, "--output-dir", out]) == EXIT_OK
    with pytest.warns(RuntimeWarning):
        assert main(["pretrain", "--config", cfg, "--output-dir", out]) == EXIT_DIVERGENCE


def _pipeline(cfg, out, seed=None):
    extra = ["--output-dir", str(out)] + (["--seed", str(seed)] if seed is not None else [])
    for command in ("gen-data", "pretrain", "export", "probe", "finetune", "bias", "ablate", "report"):
        assert main([command, "--config", cfg] + extra) == EXIT_OK, command


def test_full_pipeline_is_deterministic(tmp_path):
    cfg = _write(tmp_path, TINY)
    _pipeline(cfg, tmp_path / "a")
    _pipeline(cfg, tmp_path / "b")
    a, b = tmp_path / "a", tmp_path / "b"
    expected = [
        "data/MANIFEST.json", "pretrain/teacher.ark", "pretrain/student.ark", "pretrain/round_log.csv",
        "embeddings/task2.teacher.jsonl", "probe/task2_frac0p5.json", "probe/data_efficiency.csv",
        "finetune/task2_pretrained.json", "finetune/task2_random.json", "bias/bias_report.csv", "bias/folds.json",
        "ablate/ablation.csv", "report/significance.csv", "report/convergence.csv",
    ]
    for rel in expected:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    resolved = json.loads((a / "probe.config.json").read_text())
    assert resolved["output_dir"] == str(a) and resolved["eval"]["probe_lr"] == 0.1
    assert (a / "report/convergence.csv").read_text().splitlines()[1].startswith("pretrain/round_log.csv,0,")
    sig = (a / "report" / "significance.csv").read_text().splitlines()
    assert sig[0] == "group,metric,label,n_trials,mean,std,status,t,p" and len(sig) == 5


def test_seed_override_changes_data(tmp_path):
    cfg = _write(tmp_path, TINY)
    for seed, d in ((0, "s0"), (1, "s1")):
        assert main(["gen-data", "--config", cfg, "--output-dir", str(tmp_path / d), "--seed", str(seed)]) == EXIT_OK
    assert (tmp_path / "s0/data/task0.jsonl").read_bytes() != (tmp_path / "s1/data/task0.jsonl").read_bytes()
    assert json.loads((tmp_path / "s1/gen-data.config.json").read_text())["seed"] == 1


def test_console_entry_point(tmp_path):
    cfg = _write(tmp_path, {"bogus": True})
    proc = subprocess.run([sys.executable, "-m", "ark.cli", "report", "--config", cfg], capture_output=True, text=True)
    assert proc.returncode == EXIT_CONFIG and "bogus" in proc.stderr
    proc = subprocess.run([sys.executable, "-m", "ark.cli", "train", "--config", cfg], capture_output=True, text=True)
    assert proc.returncode == 2
