import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from gradprom import GradPromEnhancer
from gradprom.synthdata import make_dataset, parse_degrade


@pytest.fixture(scope="module")
def data():
    return make_dataset(0, 16, 4, degradation=parse_degrade("gaussian(0.2)"))


def small(**kw):
    base = dict(channels=4, recognizer_channels=4, epochs=2, batch_size=4, vr_pretrain_epochs=1)
    base.update(kw)
    return GradPromEnhancer(**base)


def test_params_and_clone():
    est = small(lam=0.5)
    assert est.get_params()["lam"] == 0.5
    c = clone(est)
    assert c.get_params() == est.get_params() and c is not est


def test_fit_transform_predict_score(data):
    X, y = data.degraded["train"], data.clean["train"]
    est = small().fit(X, y, labels=data.labels["train"])
    out = est.transform(data.degraded["eval"])
    assert out.shape == data.clean["eval"].shape and out.min() >= 0 and out.max() <= 1
    assert est.predict(data.degraded["eval"]).shape == (4, 3)
    assert np.isfinite(est.score(data.degraded["eval"], data.clean["eval"]))
    assert len(est.step_records_) == 2 * 4


def test_deterministic(data):
    X, y, lab = data.degraded["train"], data.clean["train"], data.labels["train"]
    a = small().fit(X, y, labels=lab).transform(X)
    b = small().fit(X, y, labels=lab).transform(X)
    assert a.tobytes() == b.tobytes()


def test_3d_input_accepted(data):
    X, y = data.degraded["train"][:, 0], data.clean["train"][:, 0]
    est = small(strategy="none", vr_pretrain_epochs=0).fit(X, y)
    assert est.transform(X).shape == (16, 1, 32, 32)


def test_super_resolution(data):
    y = data.clean["train"]
    X = y.reshape(16, 1, 16, 2, 16, 2).mean(axis=(3, 5))
    est = small(recognizer="segmenter").fit(X, y, masks=data.masks["train"])
    assert est.transform(X).shape == y.shape and est.scale_factor_ == 2
    assert est.predict(X).shape == (16, 2, 32, 32)


def test_validation_errors(data):
    X, y = data.degraded["train"], data.clean["train"]
    with pytest.raises(NotFittedError):
        small().transform(X)
    with pytest.raises(ValueError, match="labels"):
        small().fit(X, y)
    with pytest.raises(ValueError):
        small().fit(X, y[:3], labels=data.labels["train"])
    with pytest.raises(ValueError):
        small().fit(X * 3, y, labels=data.labels["train"])
    with pytest.raises(ValueError):
        small().fit(X, y, labels=data.labels["train"] + 5)
    with pytest.raises(ValueError):
        small().fit(X, y[:, :, :, :30], labels=data.labels["train"])
