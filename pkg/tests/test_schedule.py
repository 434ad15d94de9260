import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selfroll import tensor as tn
from selfroll.schedule import NoiseSchedule, coefficients, data_prediction, forward_perturb, \
    frame_denoising_loss, timestep_shift, velocity_target
from selfroll.tensor import Tensor


def test_shift_value_by_hand():
    # 5 * 0.5 / (1 + 4 * 0.5) = 2.5 / 3
    assert abs(timestep_shift(5, 500) - 2500.0 / 3.0) < 1e-9


def test_shift_fixed_points_and_identity():
    assert timestep_shift(5, 0) == 0.0
    assert timestep_shift(5, 1000) == 1000.0
    t = np.linspace(0, 1000, 11)
    np.testing.assert_allclose(timestep_shift(1, t), t, rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(a=st.floats(0, 1000), b=st.floats(0, 1000), k=st.floats(1, 10))
def test_shift_is_monotone(a, b, k):
    lo, hi = sorted((a, b))
    assert timestep_shift(k, lo) <= timestep_shift(k, hi) + 1e-12


def test_shift_rejects_bad_input():
    with pytest.raises(ValueError):
        timestep_shift(0.5, 10)
    with pytest.raises(ValueError):
        timestep_shift(5, 1001)


def test_forward_perturb_endpoints_exact(rng):
    x = rng.standard_normal((3, 4, 2))
    eps = rng.standard_normal(x.shape)
    np.testing.assert_array_equal(forward_perturb(x, eps, 0.0).frame.data, x)
    np.testing.assert_array_equal(forward_perturb(x, eps, 1000.0).frame.data, eps)


def test_forward_perturb_per_frame_t(rng):
    x = rng.standard_normal((2, 3, 2))
    eps = rng.standard_normal(x.shape)
    t = np.array([[0.0, 500.0, 1000.0], [250.0, 0.0, 1000.0]])
    out = forward_perturb(x, eps, t).frame.data
    a, s = coefficients(t)
    np.testing.assert_allclose(out, a[..., None] * x + s[..., None] * eps, rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        forward_perturb(x, eps[:, :2], 10.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), t=st.floats(1.0, 1000.0))
def test_data_prediction_round_trip(seed, t):
    r = np.random.default_rng(seed)
    x = r.standard_normal((2, 3, 2))
    eps = r.standard_normal(x.shape)
    noisy = forward_perturb(x, eps, t)
    x0 = data_prediction(Tensor(velocity_target(x, eps)), noisy)
    assert np.max(np.abs(x0.data - x)) < 1e-12


def test_schedule_indexing():
    s = NoiseSchedule()
    assert s.T == 4
    assert [s.t(j) for j in range(5)] == [0.0, 250.0, 500.0, 750.0, 1000.0]
    with pytest.raises(ValueError):
        s.t(5)
    with pytest.raises(ValueError):
        NoiseSchedule((500.0, 750.0))


def test_denoising_loss_zero_at_target(rng):
    x = rng.standard_normal((2, 3, 2))
    eps = rng.standard_normal(x.shape)
    noisy = forward_perturb(x, eps, 300.0)
    loss = frame_denoising_loss(Tensor(velocity_target(x, eps)), noisy, x)
    assert loss.item() == 0.0


def test_denoising_loss_gradient(rng):
    x = rng.standard_normal((2, 3, 2))
    eps = rng.standard_normal(x.shape)
    v = tn.parameter(rng.standard_normal(x.shape))
    noisy = forward_perturb(x, eps, 300.0)
    assert tn.grad_check(lambda: frame_denoising_loss(v, noisy, x), {"v": v}) < 1e-8
