"""Scikit-learn API conformance of the estimator facade."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from ordfusion.datasets import SyntheticSpec, build_synthetic_dataset
from ordfusion.estimator import OrdinalFusionClassifier


def _xy(n=120, k=3, seed=0, labels_offset=0):
    spec = SyntheticSpec(
        k=k, proportions=tuple([1] * k), image_size=16, overlap_sigma=0.1, seed=seed
    )
    ds = build_synthetic_dataset(spec, n)
    X = ds.images_array()
    y = ds.labels_array() + labels_offset
    return X, y


def _fast_clf(**kw):
    defaults = dict(
        channels=8,
        batch_size=8,
        joint_steps=60,
        continued_steps=10,
        lr_encoder=2e-3,
        random_state=0,
    )
    defaults.update(kw)
    return OrdinalFusionClassifier(**defaults)


def test_get_set_params_and_clone():
    clf = _fast_clf(tau=0.3, lam=0.1)
    params = clf.get_params()
    assert params["tau"] == 0.3
    assert params["lam"] == 0.1
    cloned = clone(clf)
    assert cloned.get_params() == params
    clf.set_params(alpha=1.0)
    assert clf.get_params()["alpha"] == 1.0


def test_predict_before_fit_raises():
    clf = _fast_clf()
    with pytest.raises(NotFittedError):
        clf.predict(np.zeros((2, 16, 16)))


def test_fit_predict_learns_easy_task():
    X, y = _xy()
    clf = _fast_clf(joint_steps=300, enable_ig=False, enable_sf=False, enable_ct=False).fit(X, y)
    assert list(clf.classes_) == [1, 2, 3]
    preds = clf.predict(X)
    assert preds.shape == (len(y),)
    assert (preds == y).mean() > 0.8  # easy low-overlap task
    assert clf.score(X, y) == (preds == y).mean()


def test_arbitrary_label_values_round_trip():
    X, y = _xy(labels_offset=9)  # labels 10, 11, 12
    clf = _fast_clf(joint_steps=30).fit(X, y)
    preds = clf.predict(X)
    assert set(np.unique(preds)).issubset({10, 11, 12})


def test_predict_proba_rows_sum_to_one():
    X, y = _xy(n=60)
    clf = _fast_clf(joint_steps=20).fit(X, y)
    proba = clf.predict_proba(X[:10])
    assert proba.shape == (10, 3)
    assert np.allclose(proba.sum(axis=1), 1.0, atol=1e-5)
    assert (proba >= 0).all()
    # argmax agrees with predict
    assert (clf.classes_[proba.argmax(axis=1)] == clf.predict(X[:10])).all()


def test_input_validation():
    X, y = _xy(n=40)
    clf = _fast_clf(joint_steps=5)
    with pytest.raises(ValueError):
        clf.fit(X.reshape(40, -1), y)  # 2-D feature matrix is not an image stack
    with pytest.raises(ValueError):
        clf.fit(X + 9.0, y)  # outside [0, 1]
    with pytest.raises(ValueError):
        clf.fit(X, y[:-1])
    clf.fit(X, y)
    with pytest.raises(ValueError):
        clf.predict(np.zeros((2, 8, 8), dtype=np.float32))  # wrong image shape


def test_ablation_flags_respected():
    X, y = _xy(n=40)
    clf = _fast_clf(joint_steps=5, continued_steps=0, enable_ig=False, enable_sf=False, enable_ct=False)
    clf.fit(X, y)
    assert clf.trainer_.generator is None


def test_deterministic_given_random_state():
    X, y = _xy(n=60)
    a = _fast_clf(joint_steps=25).fit(X, y)
    b = _fast_clf(joint_steps=25).fit(X, y)
    assert np.array_equal(a.decision_function(X), b.decision_function(X))
