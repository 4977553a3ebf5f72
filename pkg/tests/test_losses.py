import numpy as np
import pytest

from ark import losses as L
from ark.errors import ConfigurationError, DataError, DimensionError
from ark.tensor import Tensor, grad_check


def test_bce_matches_naive_formula(rng):
    z = rng.normal(size=(5, 3))
    y = rng.integers(0, 2, size=(5, 3)).astype(float)
    p = 1 / (1 + np.exp(-z))
    naive = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert L.bce_with_logits(Tensor(z), y).item() == pytest.approx(naive, rel=1e-12)


def test_bce_is_finite_for_extreme_logits():
    z = Tensor(np.array([[1000.0, -1000.0]]))
    assert np.isfinite(L.bce_with_logits(z, np.array([[0.0, 1.0]])).item())


def test_bce_rejects_bad_targets():
    with pytest.raises(DataError):
        L.bce_with_logits(Tensor(np.zeros((1, 2))), np.array([[0.0, 2.0]]))
    with pytest.raises(DimensionError):
        L.bce_with_logits(Tensor(np.zeros((1, 2))), np.zeros((1, 3)))


def test_ce_matches_naive_formula(rng):
    z = rng.normal(size=(4, 5))
    idx = np.array([0, 4, 2, 2])
    p = np.exp(z) / np.exp(z).sum(1, keepdims=True)
    naive = -np.mean(np.log(p[np.arange(4), idx]))
    assert L.ce_multiclass(Tensor(z), idx).item() == pytest.approx(naive, rel=1e-12)
    assert L.ce_multiclass(Tensor(z[1]), 4).item() == pytest.approx(-np.log(p[1, 4]), rel=1e-12)


def test_ce_rejects_bad_indices():
    z = Tensor(np.zeros((2, 3)))
    with pytest.raises(DataError):
        L.ce_multiclass(z, np.array([0, 3]))
    with pytest.raises(DataError):
        L.ce_multiclass(z, np.array([0.5, 1.0]))
    with pytest.raises(DimensionError):
        L.ce_multiclass(z, np.array([0]))


def test_loss_gradients(rng):
    for _ in range(20):
        z = rng.normal(size=(4, 3)) * 2
        y = rng.integers(0, 2, size=(4, 3)).astype(float)
        idx = rng.integers(0, 3, size=4)
        t = rng.normal(size=(4, 3))
        assert grad_check(lambda a: L.bce_with_logits(a, y), z).passed
        assert grad_check(lambda a: L.ce_multiclass(a, idx), z).passed
        assert grad_check(lambda a: L.mse_consistency(Tensor(t), a), z).passed


def test_consistency_stops_teacher_gradient(rng):
    t = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    s = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    L.mse_consistency(t, s).backward()
    assert t.grad is None
    np.testing.assert_allclose(s.grad, 2 * (s.data - t.data) / 6)


def test_consistency_of_identical_embeddings_is_zero(rng):
    e = rng.normal(size=(3, 4))
    assert L.mse_consistency(Tensor(e), Tensor(e)).item() == 0.0


def test_total_loss_weighting():
    a, b = Tensor(np.array(2.0)), Tensor(np.array(3.0))
    assert L.total_loss(a, b, 0.5).item() == 3.5
    assert L.total_loss(a, b, 0.0).item() == 2.0
    with pytest.raises(ConfigurationError):
        L.total_loss(a, b, -1.0)


def test_task_loss_dispatch():
    z = Tensor(np.zeros((1, 2)))
    assert L.task_loss("ce_multiclass", z, np.array([1])).item() == pytest.approx(np.log(2))
    with pytest.raises(ConfigurationError):
        L.task_loss("mse_consistency", z, z)
    with pytest.raises(ValueError):
        L.task_loss("hinge", z, z)
