import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import FunctionTransformer

from ark.errors import DataError
from ark.estimators import ArkPretrainer, LinearProbe


def _blobs(rng, n=200, k=3):
    y = rng.integers(0, k, n)
    X = rng.normal(size=(n, 5)) + 3.0 * np.eye(k, 5)[y]
    return X, y


def test_multiclass_probe_separates_blobs(rng):
    X, y = _blobs(rng)
    probe = LinearProbe("multiclass", 3, epochs=30).fit(X, y)
    assert probe.score(X, y) > 0.9
    np.testing.assert_allclose(probe.predict_proba(X).sum(axis=1), 1.0)
    assert probe.predict(X).shape == (len(X),)


def test_multilabel_probe_scores_auc(rng):
    X = rng.normal(size=(150, 4))
    Y = (X[:, :2] > 0).astype(float)
    probe = LinearProbe("multilabel", epochs=30).fit(X, Y)
    assert probe.score(X, Y) > 0.95
    assert probe.predict(X).shape == (150, 2)


def test_probe_is_seeded_and_clonable(rng):
    X, y = _blobs(rng)
    a = LinearProbe("multiclass", 3, epochs=3, random_state=4).fit(X, y)
    b = clone(a).fit(X, y)
    assert a.coef_.tobytes() == b.coef_.tobytes()
    assert clone(a).get_params()["random_state"] == 4


def test_probe_errors(rng):
    with pytest.raises(NotFittedError):
        LinearProbe().decision_function(np.zeros((1, 2)))
    with pytest.raises(DataError):
        LinearProbe("multiclass", 2).fit(np.zeros((2, 2)), [0, 5])
    with pytest.raises(DataError):
        LinearProbe("multilabel").fit(np.zeros((3, 2)), np.zeros((2, 1)))


def test_standardization_makes_probe_scale_invariant(rng):
    X, y = _blobs(rng)
    a = LinearProbe("multiclass", 3, epochs=5).fit(X, y)
    b = LinearProbe("multiclass", 3, epochs=5).fit(X * 1000.0, y)
    np.testing.assert_allclose(a.decision_function(X), b.decision_function(X * 1000.0), atol=1e-8)


def test_pretrainer_fit_transform_in_pipeline(tiny_suite):
    est = ArkPretrainer("conv", (4,), 8, 6, rounds=1, lr0=0.05, batch_size=15)
    est.fit(tiny_suite)
    images = np.stack([r.image for r in tiny_suite[0].records[:5]])
    Z = est.transform(images)
    assert Z.shape == (5, 6)
    assert est.pair_.ema_updates == 3
    pipe = make_pipeline(FunctionTransformer(lambda x: x), est)
    np.testing.assert_array_equal(pipe.transform(images), Z)
    with pytest.raises(DataError):
        ArkPretrainer().fit([])
