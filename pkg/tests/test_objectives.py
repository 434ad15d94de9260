import numpy as np
import pytest

from conftest import philox
from selfroll import tensor as tn
from selfroll.objectives import Discriminator, EMAState, GANConfig, SequenceScore, SiDConfig, \
    critic_denoising_loss, dmd_generator_loss, ema_update, gan_losses, real_score_with_cfg, \
    sample_interval_timesteps, sid_generator_loss, truncation_interval
from selfroll.schedule import NoiseSchedule, coefficients
from selfroll.tensor import Tensor


class GaussianScore:
    """Exact denoiser for a unit-variance Gaussian prior with mean ``m`` (differentiable in x_t)."""

    shift = 5.0
    null_label = 1

    def __init__(self, m):
        self.m = m

    def denoise(self, x_t, t, cond):
        a, s = coefficients(np.asarray(t, dtype=np.float64), self.shift)
        v = a * a + s * s
        a, v = (np.asarray(z).reshape(-1, 1, 1) for z in (a, v))
        slope = np.broadcast_to(a / v, x_t.shape)
        return tn.add(tn.mul_const(tn.as_tensor(x_t), slope), Tensor(np.broadcast_to(self.m - a * a * self.m / v,
                                                                                     x_t.shape)))


def _gen_grad(loss_fn, mu, n, t, seed):
    r = philox(seed)
    p = tn.parameter([mu])
    z = r.standard_normal((n, 1, 1))
    eps = r.standard_normal((n, 1, 1))
    with tn.Tape() as tape:
        x_hat = tn.add(Tensor(z), p)
        loss = loss_fn(x_hat, np.full(n, t), eps)
    tape.backward(loss)
    return p.grad[0]


@pytest.mark.parametrize("t", [100.0, 400.0, 900.0])
def test_dmd_matches_reverse_kl_gradient(t):
    mu, n = 0.7, 10_000
    a, s = coefficients(t)
    v = a * a + s * s
    g = _gen_grad(lambda x, tt, e: dmd_generator_loss(x, GaussianScore(0.0), GaussianScore(mu), tt, e), mu, n, t, 1)
    # reverse KL between the noised marginals: alpha^2 mu^2 / (2 v)
    kl_grad = a * a * mu / v
    assert abs(g * a * a / (s * s) - kl_grad) / kl_grad < 1e-3


@pytest.mark.parametrize("t", [100.0, 400.0, 900.0])
def test_sid_half_matches_fisher_gradient(t):
    mu, n = 0.7, 10_000
    a, s = coefficients(t)
    v = a * a + s * s
    g = _gen_grad(lambda x, tt, e: sid_generator_loss(x, GaussianScore(0.0), GaussianScore(mu), tt, e, alpha=0.5),
                  mu, n, t, 2)
    # Fisher divergence between the noised marginals: alpha^2 mu^2 / v^2
    fisher_grad = 2 * a * a * mu / v ** 2
    assert abs(g - 0.5 * s ** 4 / (a * a) * fisher_grad) / abs(g) < 1e-3


def test_dmd_loss_value_and_stop_gradient():
    x = tn.parameter(np.full((1, 1, 1), 2.0))
    with tn.Tape() as tape:
        loss = dmd_generator_loss(x, GaussianScore(0.0), GaussianScore(0.0), [500.0], np.zeros((1, 1, 1)))
    tape.backward(loss)
    # identical scores: zero loss and zero gradient
    assert loss.item() == 0.0 and x.grad[0, 0, 0] == 0.0


def test_noise_timestep_must_be_positive():
    x = Tensor(np.zeros((1, 1, 1)))
    with pytest.raises(ValueError):
        dmd_generator_loss(x, GaussianScore(0), GaussianScore(0), [0.0], np.zeros((1, 1, 1)))


class _Const:
    shift = 5.0

    def __call__(self, x_t, t, cond):
        return Tensor(np.full(x_t.shape[0], 0.3))


def test_gan_constant_discriminator():
    r = philox(0)
    x = r.standard_normal((4, 3, 2))
    out = gan_losses(_Const(), x, x + 1, np.full(4, 300.0), r, GANConfig(lambda_reg=30.0))
    assert out.discriminator.item() == np.log(2.0)
    assert out.generator.item() == np.log(2.0)
    assert out.regularizer.item() == 0.0
    with pytest.raises(ValueError):
        gan_losses(_Const(), x, x[:2], np.full(4, 300.0), r)


def test_gan_regularizer_penalises_sensitive_discriminator(small_model):
    r = philox(1)
    disc = Discriminator(small_model, r)
    x = r.standard_normal((3, 4, 2))
    out = gan_losses(disc, x, x, np.full(3, 300.0), r, cond=0)
    assert out.regularizer.item() > 0
    assert set(disc.params) >= {"disc.head.w1", "disc.head.b1", "disc.head.w2"}


def test_cfg_weights_by_hand(small_model):
    score = SequenceScore(small_model)
    x = philox(2).standard_normal((2, 3, 2))
    t = np.array([300.0, 600.0])
    f_c = score.denoise(x, t, np.array([1, 1])).data
    f_u = score.denoise(x, t, np.full(2, score.null_label)).data
    np.testing.assert_array_equal(real_score_with_cfg(score, x, t, 1, 1.0).data, f_c)
    np.testing.assert_array_equal(real_score_with_cfg(score, x, t, 1, 0.0).data, f_u)
    np.testing.assert_allclose(real_score_with_cfg(score, x, t, 1, 3.0).data, 3 * f_c - 2 * f_u,
                               rtol=0, atol=1e-12)


def test_critic_loss_never_reaches_generator(small_model):
    x = tn.parameter(philox(3).standard_normal((2, 3, 2)))
    with tn.Tape() as tape:
        loss = critic_denoising_loss(SequenceScore(small_model), x, np.array([10.0, 900.0]),
                                     philox(4).standard_normal((2, 3, 2)))
    tape.backward(loss)
    assert x.grad is None
    assert small_model.params["out.w"].grad is not None


def test_ema_by_hand():
    p = {"w": np.array([2.0])}
    ema = EMAState.from_params({"w": np.array([1.0])}, 0.99)
    ema_update(ema, p)
    assert abs(ema.shadow["w"][0] - 1.01) < 1e-15
    frozen = EMAState.from_params({"w": np.array([1.0])}, 1.0)
    ema_update(frozen, p)
    assert frozen.shadow["w"][0] == 1.0
    copy = EMAState.from_params({"w": np.array([1.0])}, 0.0)
    ema_update(copy, p)
    assert copy.shadow["w"][0] == 2.0
    with pytest.raises(ValueError):
        EMAState.from_params(p, 1.5)
    with pytest.raises(KeyError):
        ema_update(ema, {"u": np.array([0.0])})


def test_interval_timesteps_stay_inside():
    sched = NoiseSchedule()
    for s in range(1, 5):
        lo, hi = truncation_interval(sched, s)
        t = sample_interval_timesteps(philox(s), 200, sched, s)
        assert np.all(t > 0) and np.all(t >= lo) and np.all(t <= hi)


def test_sid_alpha_range():
    with pytest.raises(ValueError):
        SiDConfig(alpha=2.0)
