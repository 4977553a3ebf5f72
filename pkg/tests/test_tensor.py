import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ark import tensor as T
from ark.errors import BackwardError, ConfigurationError, ContractError, DimensionError
from ark.tensor import Tensor, grad_check, numerical_gradient


def _away_from_kinks(x, margin=1e-2):
    # keep finite differences off the relu/clamp corners
    x = np.array(x)
    x[np.abs(x) < margin] += 3 * margin
    return x


def _clamp_sample(r, s):
    x = r.uniform(-1, 1, s)
    x[np.abs(np.abs(x) - 0.5) < 1e-2] *= 1.1
    return x


UNARY = {
    "relu": (T.relu, lambda r, s: _away_from_kinks(r.normal(size=s))),
    "sigmoid": (T.sigmoid, lambda r, s: r.normal(size=s) * 3),
    "exp": (T.exp, lambda r, s: r.normal(size=s)),
    "log": (T.log, lambda r, s: r.uniform(0.2, 3.0, size=s)),
    "power3": (lambda a: T.power(a, 3.0), lambda r, s: r.normal(size=s)),
    "clamp": (lambda a: T.clamp(a, -0.5, 0.5), _clamp_sample),
    "neg": (lambda a: -a, lambda r, s: r.normal(size=s)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients_match_finite_differences(name, rng):
    op, sample = UNARY[name]
    w = rng.normal(size=(3, 4))
    for _ in range(20):
        x = sample(rng, (3, 4))
        rep = grad_check(lambda a: (op(a) * w).sum(), x)
        assert rep.passed, (name, rep.max_rel_error)


@pytest.mark.parametrize("op", [T.add, T.sub, T.mul, T.div])
def test_binary_broadcast_gradients(op, rng):
    for _ in range(20):
        a = rng.normal(size=(3, 4))
        b = rng.uniform(0.5, 2.0, size=(4,))
        assert grad_check(lambda t: (op(t, Tensor(b)) ** 2).sum(), a).passed
        assert grad_check(lambda t: (op(Tensor(a), t) ** 2).sum(), b).passed


def test_matmul_reshape_reduce_gradients(rng):
    for _ in range(20):
        a = rng.normal(size=(3, 5))
        b = rng.normal(size=(5, 2))
        assert grad_check(lambda t: (t @ Tensor(b)).sum(), a).passed
        assert grad_check(lambda t: (Tensor(a) @ t).mean(), b).passed
        assert grad_check(lambda t: (t.reshape(5, 3) ** 2).sum(axes=0).sum(), a).passed
        assert grad_check(lambda t: (T.reduce("mean", t, axes=1) ** 2).sum(), a).passed


def test_pooling_gradients(rng):
    w = rng.normal(size=(2, 3))
    for _ in range(20):
        x = rng.normal(size=(2, 3, 4, 4))
        assert grad_check(lambda t: (T.global_avg_pool(t) * w).sum(), x).passed
        assert grad_check(lambda t: (T.global_max_pool(t) * w).sum(), x).passed


def test_global_max_pool_ties_route_to_first_argmax():
    x = Tensor(np.ones((1, 2, 2)), requires_grad=True)
    T.global_max_pool(x).sum().backward()
    np.testing.assert_array_equal(x.grad, [[[1.0, 0.0], [0.0, 0.0]]])


@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_gradients(stride, rng):
    for _ in range(20):
        x = rng.normal(size=(2, 2, 5, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        w = rng.normal(size=T.conv2d(Tensor(x), Tensor(k), stride).shape)
        assert grad_check(lambda t: (T.conv2d(t, Tensor(k), stride) * w).sum(), x).passed
        assert grad_check(lambda t: (T.conv2d(Tensor(x), t, stride) * w).sum(), k).passed


def test_conv2d_matches_direct_loop(rng):
    x = rng.normal(size=(2, 5, 6))
    k = rng.normal(size=(3, 2, 3, 3))
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros((3, 5, 6))
    for o in range(3):
        for i in range(5):
            for j in range(6):
                ref[o, i, j] = np.sum(xp[:, i : i + 3, j : j + 3] * k[o])
    np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(k)).data, ref, rtol=0, atol=1e-12)


def test_conv2d_rejects_even_kernels_and_channel_mismatch(rng):
    with pytest.raises(ConfigurationError):
        T.conv2d(Tensor(rng.normal(size=(1, 4, 4))), Tensor(rng.normal(size=(1, 1, 2, 2))))
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(rng.normal(size=(2, 4, 4))), Tensor(rng.normal(size=(1, 1, 3, 3))))


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    T.relu(x).sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_second_backward_raises():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = (x * x).sum()
    y.backward()
    with pytest.raises(BackwardError):
        y.backward()


def test_backward_requires_scalar_or_explicit_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()
    y = x * 2.0
    y.backward(np.array([1.0, 0.0, 1.0]))
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 2.0])


def test_shared_subexpression_accumulates():
    x = Tensor(np.array(3.0), requires_grad=True)
    y = x * x + x
    y.backward()
    assert x.grad == pytest.approx(7.0)


def test_node_ids_increase_in_recording_order():
    x = Tensor(np.ones(2), requires_grad=True)
    a = x * 2.0
    b = a + 1.0
    assert a.node_id < b.node_id


def test_no_grad_is_thread_local():
    seen = {}

    def worker():
        seen["worker"] = T.grad_enabled()

    with T.no_grad():
        assert not T.grad_enabled()
        t = threading.Thread(target=worker)
        t.start()
        t.join()
        y = Tensor(np.ones(2), requires_grad=True) * 2.0
        assert y.node_id is None
    assert seen["worker"] is True
    assert T.grad_enabled()


def test_broadcast_shape_mismatch_raises():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_elementwise_dispatch():
    a = Tensor(np.array([1.0, 4.0]))
    np.testing.assert_allclose(T.elementwise("power", a, 0.5).data, [1.0, 2.0])
    np.testing.assert_allclose(T.elementwise("clamp", a, lo=2.0, hi=3.0).data, [2.0, 3.0])
    with pytest.raises(ConfigurationError):
        T.elementwise("tanh", a)
    with pytest.raises(ContractError):
        T.elementwise("add", a)


def test_grad_check_flags_a_wrong_gradient():
    def bad(t):
        return T.make_result(np.array((t.data**2).sum()), (t,), lambda g: (g * t.data,))

    assert not grad_check(bad, np.array([1.0, 2.0])).passed


def test_grad_check_rejects_non_scalar_and_bad_step():
    with pytest.raises(ContractError):
        grad_check(lambda t: t * 2.0, np.ones(2))
    with pytest.raises(ConfigurationError):
        grad_check(lambda t: t.sum(), np.ones(2), step=0.0)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-3, 3)))
def test_numerical_gradient_of_quadratic_is_linear(x):
    g = numerical_gradient(lambda t: (t * t).sum(), x)
    np.testing.assert_allclose(g, 2 * x, atol=1e-6)
