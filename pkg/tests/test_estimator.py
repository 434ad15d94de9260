import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from conftest import philox
from selfroll.estimator import SelfRollingGenerator, check_conditions
from selfroll.world import WorldConfig, sample_ground_truth


@pytest.fixture(scope="module")
def data():
    r = philox(0)
    y = r.integers(0, 2, size=40)
    return sample_ground_truth(WorldConfig(angles_deg=(30.0, 60.0)), 4, y, r, 40), y


def _est(**kw):
    base = dict(n_iterations=4, teacher_iterations=4, n_frames=4, batch_size=4, window=4, model_dim=8)
    base.update(kw)
    return SelfRollingGenerator(**base)


def test_params_round_trip():
    est = _est(paradigm="tf", objective="denoise")
    assert clone(est).get_params() == est.get_params()
    est.set_params(layers=1)
    assert est.layers == 1


def test_fit_sample_predict_score(data):
    X, y = data
    est = _est().fit(X, y)
    assert est.n_conditions_ == 2
    assert est.sample(5, condition=1).shape == (5, 4, 2)
    out = est.predict(X[:3, :2], y[:3])
    np.testing.assert_array_equal(out[:, :2], X[:3, :2])
    assert np.isfinite(est.score(X[:10], y[:10]))


def test_same_random_state_same_model(data):
    X, y = data
    a = _est(random_state=5).fit(X, y).sample(3)
    b = _est(random_state=5).fit(X, y).sample(3)
    np.testing.assert_array_equal(a, b)


def test_validation(data):
    X, y = data
    with pytest.raises(NotFittedError):
        _est().sample(2)
    with pytest.raises(ValueError):
        _est().fit(X[:, :3], y)
    with pytest.raises(ValueError):
        _est(paradigm="tf").fit(X, y)
    est = _est().fit(X, y)
    with pytest.raises(ValueError):
        est.predict(X[:2, :2, :1])
    with pytest.raises(ValueError):
        est.sample(2, condition=5)


def test_check_conditions():
    np.testing.assert_array_equal(check_conditions(None, 3), [0, 0, 0])
    np.testing.assert_array_equal(check_conditions([1.0, 0.0], 2), [1, 0])
    for bad in ([0.5, 1], [-1, 0], [[0, 1]]):
        with pytest.raises(ValueError):
            check_conditions(bad, 2)
    with pytest.raises(ValueError):
        check_conditions([0, 2], 2, vocab=2)
