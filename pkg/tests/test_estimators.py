import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fedistill import FederatedDistillationClassifier
from fedistill.data import synth_classification, train_test_split


@pytest.fixture(scope="module")
def blobs():
    full = synth_classification(4, 40, 6, seed=3)
    train, test = train_test_split(full, 0.25, seed=0)
    names = np.array(["ant", "bee", "cat", "dog"])
    return train.samples, names[train.labels], test.samples, names[test.labels]


def small(**kw):
    params = dict(hidden=(16,), rounds=4, local_steps=10, batch_size=16)
    params.update(kw)
    return FederatedDistillationClassifier(**params)


@pytest.mark.parametrize("scheme", ["fd", "fl", "mix2fld"])
def test_fit_predict(blobs, scheme):
    X, y, Xt, yt = blobs
    clf = small(scheme=scheme, n_mix=4, n_inv=4, server_steps=5).fit(X, y)
    assert set(clf.predict(Xt)) <= set(clf.classes_)
    assert clf.score(Xt, yt) > 0.5
    proba = clf.predict_proba(Xt)
    assert proba.shape == (len(Xt), 4)
    assert np.allclose(proba.sum(axis=1), 1.0)
    assert len(clf.history_) == 4


def test_reproducible(blobs):
    X, y, Xt, _ = blobs
    a = small(random_state=7).fit(X, y).predict_proba(Xt)
    b = small(random_state=7).fit(X, y).predict_proba(Xt)
    assert np.array_equal(a, b)


def test_params_and_clone():
    clf = small(lr=0.05)
    assert clf.get_params()["lr"] == 0.05
    assert clone(clf).set_params(rounds=2).rounds == 2


def test_not_fitted(blobs):
    with pytest.raises(NotFittedError):
        small().predict(blobs[2])


def test_validation(blobs):
    X, y, _, _ = blobs
    with pytest.raises(ValueError):
        small(scheme="fedprox").fit(X, y)
    with pytest.raises(ValueError):
        small().fit(X, np.zeros(len(X)))
    clf = small(rounds=1).fit(X, y)
    with pytest.raises(ValueError):
        clf.predict(X[:, :3])
