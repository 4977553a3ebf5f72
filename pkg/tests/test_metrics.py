import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ark.errors import DimensionError, UndefinedMetricError
from ark.metrics import accuracy, auc, fnr, per_class_auc, threshold_at_specificity


def brute_force_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def brute_force_fnr(scores, labels, threshold):
    probs = 1 / (1 + np.exp(-np.asarray(scores)))
    tp = fn = 0
    for p, y in zip(probs, labels):
        if y:
            if p >= threshold:
                tp += 1
            else:
                fn += 1
    return fn / (fn + tp)


def test_auc_examples():
    assert auc([0.1, 0.9], [0, 1]) == 1.0
    assert auc([0.9, 0.1], [0, 1]) == 0.0
    assert auc([0.5, 0.5], [0, 1]) == 0.5
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auc_undefined_and_shape_errors():
    with pytest.raises(UndefinedMetricError):
        auc([0.1, 0.2], [1, 1])
    with pytest.raises(DimensionError):
        auc([0.1, 0.2], [1])


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 50), st.integers(0, 2**32 - 1))
def test_auc_matches_brute_force_with_ties(n, seed):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, 5, n).astype(float)  # coarse grid forces ties
    labels = rng.integers(0, 2, n)
    labels[0], labels[-1] = 0, 1
    assert abs(auc(scores, labels) - brute_force_auc(scores, labels)) <= 1e-12


def test_auc_is_invariant_to_monotone_transforms(rng):
    s = rng.normal(size=40)
    y = rng.integers(0, 2, 40)
    assert auc(s, y) == auc(np.exp(s) * 3 + 1, y)
    assert auc(-s, y) == pytest.approx(1 - auc(s, y), abs=1e-12)


def test_per_class_auc_marks_undefined_classes():
    scores = np.array([[0.1, 0.2], [0.9, 0.3]])
    ind = np.array([[0, 1], [1, 1]])
    assert per_class_auc(scores, ind, ["a", "b"]) == {"a": 1.0, "b": None}


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 40), st.floats(0.05, 0.95), st.integers(0, 2**32 - 1))
def test_fnr_matches_confusion_matrix(n, threshold, seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=n) * 2
    y = rng.integers(0, 2, n)
    y[0] = 1
    assert fnr(s, y, threshold) == brute_force_fnr(s, y, threshold)


def test_fnr_examples_and_errors():
    assert fnr([0.9, 0.2, 0.7], [1, 1, 0], logits=False) == 0.5
    assert fnr([0.5], [1], threshold=0.5, logits=False) == 0.0
    with pytest.raises(UndefinedMetricError):
        fnr([0.1, 0.2], [0, 0])


def test_accuracy():
    assert accuracy([0, 1, 2], [0, 1, 1]) == pytest.approx(2 / 3)
    with pytest.raises(UndefinedMetricError):
        accuracy([], [])


def test_threshold_at_specificity(rng):
    s = rng.uniform(size=100)
    y = rng.integers(0, 2, 100)
    thr = threshold_at_specificity(s, y, 0.9, logits=False)
    neg = s[y == 0]
    assert np.mean(neg < thr) >= 0.9
