"""Trial aggregation and two-sample t-tests."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, UndefinedMetricError

ALPHA = 0.05
_MAX_ITER = 500
_EPS = 1e-16
_TINY = 1e-300


@dataclass
class TrialSet:
    label: str
    samples: list


def mean_std(samples):
    """Arithmetic mean and sample standard deviation (n - 1 denominator)."""
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    if x.size < 2:
        raise UndefinedMetricError(f"standard deviation needs n >= 2, got n={x.size}")
    m = float(x.mean())
    return m, float(math.sqrt(np.sum((x - m) ** 2) / (x.size - 1)))


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = _TINY if abs(d) < _TINY else d
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularised incomplete beta function I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("betainc needs a, b > 0")
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"betainc needs x in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return betainc(df / 2.0, 0.5, df / (df + t * t))


def t_cdf(t: float, df: float) -> float:
    half_tail = 0.5 * t_sf_two_sided(t, df)
    return half_tail if t < 0 else 1.0 - half_tail


@dataclass
class TTestResult:
    t: float
    df: float
    p: float

    @property
    def significant(self) -> bool:
        return self.p < ALPHA

    def __iter__(self):
        return iter((self.t, self.df, self.p))


def t_test_independent(a, b, equal_var: bool = True) -> TTestResult:
    """Two-sided independent two-sample t-test (pooled variance; Welch when ``equal_var=False``).

    Zero variance in both samples gives t = 0, p = 1 for equal means and
    t = +/-inf, p = 0 otherwise.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    na, nb = a.size, b.size
    if na < 2 or nb < 2:
        raise UndefinedMetricError(f"t-test needs n >= 2 per sample, got {na} and {nb}")
    ma, va = mean_std(a)
    mb, vb = mean_std(b)
    va, vb = va * va, vb * vb
    diff = ma - mb
    if equal_var:
        df = float(na + nb - 2)
        pooled = ((na - 1) * va + (nb - 1) * vb) / df
        se2 = pooled * (1.0 / na + 1.0 / nb)
    else:
        qa, qb = va / na, vb / nb
        se2 = qa + qb
        df = se2 * se2 / (qa * qa / (na - 1) + qb * qb / (nb - 1)) if se2 > 0 else float(na + nb - 2)
    if se2 == 0.0:
        if diff == 0.0:
            return TTestResult(0.0, df, 1.0)
        return TTestResult(math.copysign(math.inf, diff), df, 0.0)
    t = diff / math.sqrt(se2)
    return TTestResult(t, df, t_sf_two_sided(t, df))


@dataclass
class ComparisonRow:
    label: str
    mean: float
    std: float
    n: int
    status: str
    t: float
    p: float


def compare_conditions(conditions, alpha: float = ALPHA, higher_is_better: bool = True, equal_var: bool = True) -> list:
    """Mark each condition as best, tied_with_best (p >= alpha vs best) or other.

    ``conditions`` holds ``(label, samples)`` pairs or objects with ``label``,
    ``metric`` and ``trials`` attributes (e.g. MetricReport).
    """
    items = []
    metrics = set()
    for cond in conditions:
        if isinstance(cond, tuple):
            label, samples = cond
        elif isinstance(cond, TrialSet):
            label, samples = cond.label, cond.samples
        else:
            label, samples = cond.label, cond.trials
            metrics.add(cond.metric)
        items.append((label, np.asarray(samples, dtype=np.float64)))
    if len(metrics) > 1:
        raise ContractError(f"conditions report different metrics: {sorted(metrics)}")
    if len({len(s) for _, s in items}) > 1:
        raise ContractError("conditions must have equal trial counts")
    if not items:
        return []
    means = [float(s.mean()) for _, s in items]
    best = int(np.argmax(means) if higher_is_better else np.argmin(means))
    rows = []
    for i, (label, s) in enumerate(items):
        std = mean_std(s)[1] if len(s) >= 2 else float("nan")
        if i == best:
            rows.append(ComparisonRow(label, means[i], std, len(s), "best", 0.0, 1.0))
            continue
        res = t_test_independent(items[best][1], s, equal_var)
        status = "tied_with_best" if res.p >= alpha else "other"
        rows.append(ComparisonRow(label, means[i], std, len(s), status, res.t, res.p))
    return rows


def format_p(p: float) -> str:
    return format(p, ".4g")
