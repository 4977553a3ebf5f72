"""Dense float64 tensors with a dynamic reverse-mode tape.

Every operation on tensors that require gradients records a node carrying a
monotonically increasing ``node_id``. ``Tensor.backward`` collects the nodes
reachable from the output and replays them in decreasing id order, which is
the reverse of recording order. A recorded graph can be differentiated once;
a second ``backward`` on the same graph raises :class:`BackwardError`.

The relu (and clamp) subgradient at the kink is 0.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import BackwardError, ConfigurationError, ContractError, DimensionError

_node_ids = itertools.count(1)
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "_parents", "_backward", "_consumed")

    def __init__(self, values, requires_grad: bool = False):
        self.data = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = None
        self._parents = ()
        self._backward = None
        self._consumed = False

    # -- views -------------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # -- autodiff ----------------------------------------------------------
    def backward(self, grad=None) -> None:
        if not self.requires_grad:
            raise BackwardError("backward() on a tensor that does not require grad")
        if self._consumed:
            raise BackwardError("graph already differentiated; re-run the forward pass")
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs an explicit gradient for shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise DimensionError(f"upstream gradient shape {grad.shape} != tensor shape {self.shape}")

        nodes = _collect(self)
        nodes.sort(key=lambda t: t.node_id, reverse=True)
        pending = {id(self): grad}
        for node in nodes:
            g = pending.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent)
                    pending[key] = pg if key not in pending else pending[key] + pg
        if self._backward is None:
            # leaf called directly
            self.grad = grad.copy() if self.grad is None else self.grad + grad
        for node in nodes:
            node._consumed = True
            node._backward = _consumed_backward
            node._parents = ()

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axes=None):
        return reduce("sum", self, axes)

    def mean(self, axes=None):
        return reduce("mean", self, axes)


def _consumed_backward(grad):
    raise BackwardError("graph already differentiated; re-run the forward pass")


def _collect(root: Tensor) -> list:
    seen = set()
    out = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen or t._backward is None:
            continue
        if t._consumed:
            raise BackwardError("graph already differentiated; re-run the forward pass")
        seen.add(id(t))
        out.append(t)
        stack.extend(t._parents)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as an op output; ``backward(g)`` returns one gradient per parent."""
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == np.float64 else data.astype(np.float64)
    out.grad = None
    out._consumed = False
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node_id = next(_node_ids)
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out.node_id = None
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"incompatible shapes {a.shape} and {b.shape}") from None


# -- binary elementwise ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data
    return make_result(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data
    return make_result(
        ad / bd,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)),
    )


# -- unary elementwise ----------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    y = stable_sigmoid(a.data)
    return make_result(y, (a,), lambda g: (g * y * (1.0 - y),))


def clamp(a: Tensor, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    if lo > hi:
        raise ConfigurationError(f"clamp bounds out of order: {lo} > {hi}")
    mask = (a.data > lo) & (a.data < hi)
    return make_result(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def power(a: Tensor, p: float) -> Tensor:
    if isinstance(p, Tensor):
        raise ContractError("power exponent must be a python scalar")
    x = a.data
    return make_result(x**p, (a,), lambda g: (g * p * x ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return make_result(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return make_result(np.log(x), (a,), lambda g: (g / x,))


_UNARY = {"relu": relu, "sigmoid": sigmoid, "exp": exp, "log": log}
_BINARY = {"add": add, "sub": sub, "multiply": mul, "mul": mul, "div": div}


def elementwise(op_kind: str, a, b=None, **kwargs) -> Tensor:
    """Dispatch an elementwise op by name.

    Unary kinds: relu, sigmoid, exp, log, clamp (``lo``/``hi`` kwargs),
    power (``b`` is the scalar exponent). Binary kinds: add, sub, multiply, div.
    """
    a = _as_tensor(a)
    if op_kind in _UNARY:
        return _UNARY[op_kind](a)
    if op_kind == "clamp":
        return clamp(a, kwargs.get("lo", 0.0), kwargs.get("hi", 1.0))
    if op_kind == "power":
        return power(a, b if b is not None else kwargs["p"])
    if op_kind in _BINARY:
        if b is None:
            raise ContractError(f"{op_kind} needs a second operand")
        return _BINARY[op_kind](a, b)
    raise ConfigurationError(f"unknown elementwise op {op_kind!r}")


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# -- linear algebra and shape ---------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return make_result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from None
    return make_result(out, (a,), lambda g: (g.reshape(old),))


def _normalize_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(op_kind: str, a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Sum or mean over ``axes`` (all axes when None)."""
    a = _as_tensor(a)
    axes = _normalize_axes(axes, a.ndim)
    shape = a.shape
    if op_kind == "sum":
        scale = 1.0
        out = a.data.sum(axis=axes, keepdims=keepdims)
    elif op_kind == "mean":
        count = int(np.prod([shape[i] for i in axes])) if axes else 1
        scale = 1.0 / count
        out = a.data.mean(axis=axes, keepdims=keepdims)
    else:
        raise ConfigurationError(f"unknown reduction {op_kind!r}")

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g * scale, shape).copy(),)

    return make_result(np.asarray(out, dtype=np.float64), (a,), backward)


def global_avg_pool(a: Tensor) -> Tensor:
    """Mean over the two trailing spatial axes."""
    if a.ndim < 3:
        raise DimensionError(f"global_avg_pool needs a c x h x w input, got {a.shape}")
    return reduce("mean", a, (a.ndim - 2, a.ndim - 1))


def global_max_pool(a: Tensor) -> Tensor:
    """Max over the two trailing spatial axes; ties route the gradient to the first maximum."""
    a = _as_tensor(a)
    if a.ndim < 3:
        raise DimensionError(f"global_max_pool needs a c x h x w input, got {a.shape}")
    lead = a.shape[:-2]
    flat = a.data.reshape(lead + (-1,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gi = np.zeros_like(flat)
        np.put_along_axis(gi, arg[..., None], g[..., None], axis=-1)
        return (gi.reshape(a.shape),)

    return make_result(out, (a,), backward)


# -- convolution ----------------------------------------------------------


def conv2d(inp: Tensor, kernels: Tensor, stride: int = 1) -> Tensor:
    """Cross-correlation with same zero padding (odd kernels only).

    ``inp`` is c_in x h x w or batched n x c_in x h x w; ``kernels`` is
    c_out x c_in x kh x kw.
    """
    inp, kernels = _as_tensor(inp), _as_tensor(kernels)
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    if kernels.ndim != 4:
        raise DimensionError(f"kernels must be 4-d, got {kernels.shape}")
    c_out, c_in, kh, kw = kernels.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"even kernel size {kh}x{kw}: same padding undefined")
    single = inp.ndim == 3
    if inp.ndim not in (3, 4):
        raise DimensionError(f"conv2d input must be 3-d or 4-d, got {inp.shape}")
    x = inp.data[None] if single else inp.data
    n, c, h, w = x.shape
    if c != c_in:
        raise DimensionError(f"input channels {c} != kernel channels {c_in} ({inp.shape} vs {kernels.shape})")
    if kh > h or kw > w:
        raise DimensionError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (w + 2 * pw - kw) // stride + 1
    k = kernels.data
    out = np.zeros((n, c_out, ho, wo))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            out += np.einsum("nchw,oc->nohw", patch, k[:, :, i, j], optimize=True)

    def backward(g):
        g4 = g[None] if single else g
        dk = np.zeros_like(k)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
                dk[:, :, i, j] = np.einsum("nohw,nchw->oc", g4, xp[sl], optimize=True)
                dxp[sl] += np.einsum("nohw,oc->nchw", g4, k[:, :, i, j], optimize=True)
        dx = dxp[:, :, ph : ph + h, pw : pw + w]
        return (dx[0] if single else dx, dk)

    return make_result(out[0] if single else out, (inp, kernels), backward)


# -- gradient checking ----------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray


def numerical_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = _scalar(f(Tensor(x)))
            flat[i] = orig - step
            fm = _scalar(f(Tensor(x)))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def _scalar(out) -> float:
    if not isinstance(out, Tensor) or out.size != 1:
        shape = out.shape if isinstance(out, Tensor) else type(out).__name__
        raise ContractError(f"grad_check needs a scalar-valued function, got {shape}")
    return float(out.data.reshape(-1)[0])


def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    step: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` at ``x`` with central differences.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps entries whose true gradient is ~0 from dividing by noise.
    """
    if step <= 0:
        raise ConfigurationError(f"step must be positive, got {step}")
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x.copy(), requires_grad=True)
    out = f(xt)
    _scalar(out)
    if out.requires_grad:
        out.backward()
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x)
    numeric = numerical_gradient(f, x, step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    err = float(np.max(np.abs(analytic - numeric) / denom)) if x.size else 0.0
    return GradCheckReport(err, err <= tol, analytic, numeric)
