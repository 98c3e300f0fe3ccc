import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from flowtrack.data import SyntheticConfig, synth_dataset
from flowtrack.estimators import EdgeAffinityClassifier, NetworkFlowTracker


def separable(rng, n=200):
    X = rng.normal(size=(n, 6))
    y = (X[:, 1] > 0).astype(int)
    return X, y


def test_params_roundtrip():
    est = NetworkFlowTracker(gamma=0.05, loss_kind="L1")
    assert est.get_params()["gamma"] == 0.05
    c = clone(est)
    assert c.get_params() == est.get_params()
    assert EdgeAffinityClassifier(hidden=8).set_params(lr=0.1).lr == 0.1


def test_classifier_fits(rng):
    X, y = separable(rng)
    clf = EdgeAffinityClassifier(hidden=16, lr=0.05, epochs=150).fit(X, y)
    assert clf.score(X, y) > 0.9
    assert clf.loss_curve_[-1] < clf.loss_curve_[0]
    p = clf.predict_proba(X)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    np.testing.assert_allclose(clf.transform(X), -np.log(np.clip(p[:, 1], 1e-6, 1 - 1e-6)))


def test_classifier_validation(rng):
    with pytest.raises(NotFittedError):
        EdgeAffinityClassifier().predict(np.zeros((1, 6)))
    with pytest.raises(ValueError):
        EdgeAffinityClassifier(epochs=1).fit(np.zeros((3, 4)), [0, 1, 0])
    with pytest.raises(ValueError):
        EdgeAffinityClassifier(epochs=1).fit(np.zeros((3, 6)), [0, 1])


def test_tracker_fit_predict_score():
    seqs = synth_dataset(SyntheticConfig(n_objects=3, n_frames=30, seed=11), 3)
    est = NetworkFlowTracker(epochs=1, loss_kind="BCE", batch_size=2, lr=1e-2)
    with pytest.raises(NotFittedError):
        est.predict(seqs[0])
    est.fit(seqs)
    assert est.trace_ and hasattr(est, "params_")
    tracks = est.predict(seqs[0])
    assert all(len(t.detections) > 0 for t in tracks)
    s = est.score(seqs[:1])
    assert 0.0 <= s <= 1.0
    with pytest.raises(ValueError):
        NetworkFlowTracker().fit([])
