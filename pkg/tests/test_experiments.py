import csv
import io

import pytest

from ark import experiments as X
from ark.errors import ConfigurationError
from ark.eval import FinetuneConfig, ProbeConfig
from ark.pretrain import PretrainConfig

CFG = PretrainConfig(rounds=2, lr0=0.05, batch_size=15)
PROBE = ProbeConfig(epochs=3)


@pytest.fixture(scope="module")
def ml_suite():
    from ark.data import generate_synthetic_suite

    return generate_synthetic_suite(
        3, 100, 16, seed=4, label_modes=["multilabel", "binary", "multilabel"], distractors=0,
        split_fractions={"pretrain": 0.5, "train": 0.25, "val": 0.0, "test": 0.25},
    )


@pytest.mark.parametrize("evaluator", ["probe", "head"])
def test_forgetting_reports_both_modes(ml_suite, tiny_encoder, evaluator):
    res = X.forgetting_experiment(ml_suite, tiny_encoder, CFG, 6, PROBE, evaluator=evaluator)
    assert set(res) == {"cyclic", "sequential"}
    for r in res.values():
        assert set(r.final) == set(r.after_stage) == {0, 1, 2}
        assert r.delta[2] == 0.0
        assert r.delta[0] == r.final[0] - r.after_stage[0]
    rows = list(csv.reader(io.StringIO(X.forgetting_csv(res))))
    assert rows[0] == ["mode", "task_id", "after_stage", "final", "delta"] and len(rows) == 7


def test_forgetting_rejects_unknown_evaluator(ml_suite, tiny_encoder):
    with pytest.raises(ConfigurationError):
        X.forgetting_experiment(ml_suite, tiny_encoder, CFG, 6, evaluator="oracle")


def test_convergence_curves_have_one_row_per_mode_and_round(ml_suite, tiny_encoder):
    logs = X.compare_convergence(ml_suite, tiny_encoder, PretrainConfig(rounds=2, lr0=0.05, batch_size=12), 6)
    assert logs["cyclic"].ema_updates == 6 and logs["concurrent"].ema_updates == 2
    rows = list(csv.reader(io.StringIO(X.curves_csv(logs))))
    assert rows[0] == ["mode", "round", "mean_task_loss", "mean_consistency_loss"]
    assert [(r[0], r[1]) for r in rows[1:]] == [("concurrent", "0"), ("concurrent", "1"), ("cyclic", "0"), ("cyclic", "1")]


def test_ablation_table_structure(ml_suite, tiny_encoder):
    table = X.run_ablation(ml_suite[:2], ml_suite[2:], tiny_encoder, CFG, 6, PROBE, n_trials=3)
    rows = list(csv.reader(io.StringIO(table.to_csv())))
    assert rows[0] == ["target_task", "source", "projector", "consistency", "metric", "n_trials", "mean", "std", "status", "t", "p"]
    body = rows[1:]
    assert [(r[1], r[2], r[3]) for r in body] == [("teacher", "0", "0"), ("teacher", "0", "1"), ("student", "1", "1"), ("teacher", "1", "1")]
    assert all(r[5] == "3" for r in body)
    assert sorted(r[8] for r in body).count("best") == 1


def test_transfer_experiment_reports(ml_suite, tiny_encoder):
    out = X.transfer_experiment(
        ml_suite[:2], ml_suite[2], tiny_encoder, CFG, 6, PROBE,
        FinetuneConfig(tiny_encoder, epochs=1, lr=0.01, batch_size=10, embed_dim=6), n_trials=2,
    )
    assert set(out) == {"probe_pretrained", "probe_random", "finetune_pretrained", "finetune_random"}
    assert all(r.n_trials == 2 for r in out.values())
