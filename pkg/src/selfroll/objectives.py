"""Sequence-level distribution-matching objectives and their helpers.

Score networks are anything exposing ``velocity(x_t, t, cond) -> Tensor``
and ``denoise(x_t, t, cond) -> Tensor`` on whole sequences (B, N, d) with
one raw timestep per sequence. :class:`SequenceScore` adapts a
:class:`~selfroll.transformer.CausalTransformer` with a bidirectional mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .schedule import NoiseSchedule, NoisySample, data_prediction, forward_perturb, frame_denoising_loss
from .tensor import Tensor
from .transformer import CausalTransformer, build_mask


# --------------------------------------------------------------------------
# configs


@dataclass
class DMDConfig:
    """Hyperparameters shared by the score-based objectives.

    The real-score and critic networks themselves are owned by the trainer;
    this only records how they are used.
    """

    cfg_weight: float = 3.0
    update_ratio: int = 5
    lr_generator: float = 2e-6
    lr_critic: float = 4e-7
    t_range: tuple = (20.0, 980.0)
    per_frame_t: bool = False
    restrict_t: bool = False

    def __post_init__(self):
        lo, hi = (float(v) for v in self.t_range)
        if not 0.0 < lo < hi <= 1000.0:
            raise ValueError(f"t_range must satisfy 0 < lo < hi <= 1000, got {self.t_range}")
        self.t_range = (lo, hi)
        if self.update_ratio < 1:
            raise ValueError("update_ratio must be >= 1")


@dataclass
class SiDConfig(DMDConfig):
    alpha: float = 1.0
    lr_critic: float = 2e-6

    def __post_init__(self):
        super().__post_init__()
        if not 0.5 <= self.alpha <= 1.2:
            raise ValueError(f"alpha must lie in [0.5, 1.2], got {self.alpha}")


@dataclass
class GANConfig:
    lambda_reg: float = 30.0
    sigma_perturb: float = 0.05
    update_ratio: int = 1
    lr_generator: float = 2e-6
    lr_critic: float = 2e-6

    def __post_init__(self):
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be >= 0")
        if self.sigma_perturb <= 0:
            raise ValueError("sigma_perturb must be > 0")


# --------------------------------------------------------------------------
# score networks


class SequenceScore:
    """Bidirectional whole-sequence denoiser on top of a transformer backbone."""

    def __init__(self, model: CausalTransformer):
        self.model = model

    @property
    def params(self) -> dict:
        return self.model.params

    @property
    def null_label(self) -> int:
        return self.model.config.condition_vocab

    @property
    def shift(self) -> float:
        return self.model.shift

    def _t(self, t, B, N) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        return np.broadcast_to(t[:, None] if t.ndim == 1 else t, (B, N))

    def velocity(self, x_t, t, cond) -> Tensor:
        x_t = tn.as_tensor(x_t)
        B, N, _ = x_t.shape
        spec = build_mask("bidirectional", N, self.model.config.tokens_per_frame,
                          self.model.config.chunk_size)
        return self.model.forward_masked(x_t, self._t(t, B, N), np.broadcast_to(cond, (B,)), spec)

    def denoise(self, x_t, t, cond) -> Tensor:
        x_t = tn.as_tensor(x_t)
        B, N, _ = x_t.shape
        v = self.velocity(x_t, t, cond)
        return data_prediction(v, NoisySample(x_t, self._t(t, B, N), None, self.model.shift),
                               self.model.pc)


class Discriminator:
    """Critic backbone, mean pooling over tokens, then a two-layer readout: one logit per sequence.

    The readout has no output bias: a constant offset cancels in the
    relativistic pairing anyway.
    """

    def __init__(self, backbone: CausalTransformer, rng=None, head: dict | None = None):
        self.backbone = backbone
        D = backbone.config.model_dim
        if head is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            head = {"disc.head.w1": tn.parameter(rng.standard_normal((D, D)) / np.sqrt(D)),
                    "disc.head.b1": tn.parameter(np.zeros(D)),
                    "disc.head.w2": tn.parameter(rng.standard_normal((D, 1)) / np.sqrt(D))}
        self.head = head

    @property
    def params(self) -> dict:
        return {**self.backbone.params, **self.head}

    @property
    def shift(self) -> float:
        return self.backbone.shift

    def __call__(self, x_t, t, cond) -> Tensor:
        x_t = tn.as_tensor(x_t)
        B, N, _ = x_t.shape
        spec = build_mask("bidirectional", N, self.backbone.config.tokens_per_frame,
                          self.backbone.config.chunk_size)
        t = np.asarray(t, dtype=np.float64)
        t = np.broadcast_to(t[:, None] if t.ndim == 1 else t, (B, N))
        h = self.backbone.hidden_masked(x_t, t, np.broadcast_to(cond, (B,)), spec)
        z = tn.silu(tn.linear(tn.mean(h, axis=1), self.head["disc.head.w1"], self.head["disc.head.b1"]))
        return tn.reshape(tn.matmul(z, self.head["disc.head.w2"]), (B,))


def real_score_with_cfg(score, x_t, t, cond, w_cfg: float) -> Tensor:
    """Guided clean estimate ``f_u + w (f_c - f_u)``, written so w = 0 and w = 1 are exact."""
    x_t = tn.as_tensor(x_t)
    B = x_t.shape[0]
    f_c = score.denoise(x_t, t, np.broadcast_to(cond, (B,)))
    if w_cfg == 1.0:
        return f_c
    f_u = score.denoise(x_t, t, np.full(B, score.null_label))
    return tn.add(tn.mul_const(f_c, w_cfg), tn.mul_const(f_u, 1.0 - w_cfg))


# --------------------------------------------------------------------------
# timesteps


def sample_dm_timesteps(rng, batch: int, n_frames: int, config: DMDConfig) -> np.ndarray:
    """Raw timesteps for noise injection: (B,) by default, (B, N) with ``per_frame_t``."""
    lo, hi = config.t_range
    shape = (batch, n_frames) if config.per_frame_t else (batch,)
    return rng.uniform(lo, hi, size=shape)


def truncation_interval(schedule: NoiseSchedule, s: int) -> tuple[float, float]:
    """[t_{s-1}, t_s] for a drawn truncation step."""
    return schedule.t(s - 1), schedule.t(s)


def sample_interval_timesteps(rng, batch: int, schedule: NoiseSchedule, s: int) -> np.ndarray:
    lo, hi = truncation_interval(schedule, s)
    # keep away from the exact clean end, where the scores are undefined
    return rng.uniform(max(lo, 1e-3), hi, size=batch)


def _check_t(t, lo: float = 0.0, hi: float = 1000.0) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= lo) or np.any(t > hi):
        raise ValueError(f"noise-injection timestep outside ({lo:g}, {hi:g}]")
    return t


def _per_sample(x: Tensor) -> Tensor:
    """Sum over every non-batch axis, then mean over the batch."""
    B = x.shape[0]
    return tn.mean(tn.sum_(tn.reshape(x, (B, -1)), axis=1))


# --------------------------------------------------------------------------
# generator losses


def dmd_generator_loss(x_hat: Tensor, real, critic, t, epsilon, cond=0,
                       cfg_weight: float = 1.0) -> Tensor:
    """``1/2 |x_hat - sg[x_hat - (f_fake - f_real)]|^2`` summed per sequence, averaged over the batch.

    Both score evaluations run outside the tape; the only path to the
    generator is through ``x_hat``, whose gradient is ``f_fake - f_real``.
    """
    t = _check_t(t)
    noisy = forward_perturb(tn.stop_gradient(x_hat), epsilon, t, shift=_shift(real, critic))
    with tn.no_grad():
        f_real = real_score_with_cfg(real, noisy.frame, t, cond, cfg_weight)
        f_fake = critic.denoise(noisy.frame, t, cond)
    target = tn.stop_gradient(x_hat.data - (f_fake.data - f_real.data))
    diff = tn.sub(x_hat, target)
    return tn.mul_const(_per_sample(tn.square(diff)), 0.5)


def sid_generator_loss(x_hat: Tensor, real, critic, t, epsilon, cond=0, alpha: float = 1.0,
                       cfg_weight: float = 1.0) -> Tensor:
    """``(f_real - f_fake)^T (f_fake - x_hat) + (1 - alpha) |f_real - f_fake|^2``.

    Gradients reach the generator through ``x_hat`` and through the noisy
    input of both score networks. Their own parameters pick up gradients
    too; callers discard those.
    """
    t = _check_t(t)
    noisy = forward_perturb(x_hat, epsilon, t, shift=_shift(real, critic))
    f_real = real_score_with_cfg(real, noisy.frame, t, cond, cfg_weight)
    f_fake = critic.denoise(noisy.frame, t, cond)
    gap = tn.sub(f_real, f_fake)
    inner = tn.mul(gap, tn.sub(f_fake, x_hat))
    loss = _per_sample(inner)
    if alpha != 1.0:
        loss = tn.add(loss, tn.mul_const(_per_sample(tn.square(gap)), 1.0 - alpha))
    return loss


def _shift(*nets) -> float:
    return getattr(nets[0], "shift", 5.0)


# --------------------------------------------------------------------------
# critic


def critic_denoising_loss(critic, x_hat, t, epsilon, cond=0, weights=None) -> Tensor:
    """v-prediction MSE of the critic on detached generator samples."""
    x_hat = tn.stop_gradient(x_hat)
    noisy = forward_perturb(x_hat, epsilon, t, shift=_shift(critic))
    v = critic.velocity(noisy.frame, t, cond)
    return frame_denoising_loss(v, noisy, x_hat, weights)


# --------------------------------------------------------------------------
# GAN


@dataclass
class GANLosses:
    discriminator: Tensor
    generator: Tensor
    regularizer: Tensor


def gan_losses(disc, x_real, x_fake, t, rng, config: GANConfig | None = None,
               cond=0, shift: float | None = None) -> GANLosses:
    """Relativistic pairing loss with finite-difference R1/R2 penalty.

    Real and fake batches are paired by index and noised to the same ``t``.
    Pass a detached ``x_fake`` when updating the discriminator.
    """
    config = config or GANConfig()
    x_real = tn.as_tensor(x_real)
    x_fake = tn.as_tensor(x_fake)
    if x_real.shape != x_fake.shape:
        raise ValueError(f"real batch {x_real.shape} and fake batch {x_fake.shape} differ")
    t = _check_t(t)
    k = shift if shift is not None else _shift(disc)
    real_t = forward_perturb(x_real, rng.standard_normal(x_real.shape), t, shift=k).frame
    fake_t = forward_perturb(x_fake, rng.standard_normal(x_fake.shape), t, shift=k).frame
    d_real = disc(real_t, t, cond)
    d_fake = disc(fake_t, t, cond)
    sig = config.sigma_perturb
    d_real_p = disc(tn.add(real_t, Tensor(sig * rng.standard_normal(x_real.shape))), t, cond)
    d_fake_p = disc(tn.add(fake_t, Tensor(sig * rng.standard_normal(x_fake.shape))), t, cond)
    reg = tn.mul_const(tn.add(tn.mean(tn.square(tn.sub(d_real, d_real_p))),
                              tn.mean(tn.square(tn.sub(d_fake, d_fake_p)))), 0.5)
    l_d = tn.mul_const(tn.mean(tn.log_sigmoid(tn.sub(d_real, d_fake))), -1.0)
    if config.lambda_reg:
        l_d = tn.add(l_d, tn.mul_const(reg, config.lambda_reg))
    l_g = tn.mul_const(tn.mean(tn.log_sigmoid(tn.sub(d_fake, d_real))), -1.0)
    return GANLosses(l_d, l_g, reg)


# --------------------------------------------------------------------------
# EMA


@dataclass
class EMAState:
    shadow: dict = field(default_factory=dict)
    decay: float = 0.99

    @classmethod
    def from_params(cls, params: dict, decay: float = 0.99) -> "EMAState":
        if not 0.0 <= decay <= 1.0:
            raise ValueError(f"decay must lie in [0, 1], got {decay}")
        return cls({k: np.array(_data(v), dtype=np.float64) for k, v in params.items()}, decay)


def _data(v) -> np.ndarray:
    return v.data if isinstance(v, Tensor) else np.asarray(v)


def ema_update(ema: EMAState, params: dict) -> EMAState:
    """In place: shadow <- decay * shadow + (1 - decay) * current."""
    if set(ema.shadow) != set(params):
        raise KeyError("EMA shadow and parameter names differ")
    d = ema.decay
    for k, v in params.items():
        cur = _data(v)
        if cur.shape != ema.shadow[k].shape:
            raise ValueError(f"{k}: shape {cur.shape} vs shadow {ema.shadow[k].shape}")
        if d == 0.0:
            ema.shadow[k] = np.array(cur, dtype=np.float64)
        elif d != 1.0:
            ema.shadow[k] = d * ema.shadow[k] + (1.0 - d) * cur
    return ema
