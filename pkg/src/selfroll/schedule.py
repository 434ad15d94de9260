"""Flow-matching corruption, timestep shifting and the few-step schedule.

Timesteps live on [0, 1000] with 0 the clean end and 1000 pure noise. A raw
timestep ``t`` is first warped by :func:`timestep_shift`; the shifted value
``t'`` sets the interpolation ``x_t = (1 - t'/1000) x + (t'/1000) eps``.
The network predicts ``v = eps - x``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import Tensor, as_tensor, mean, mul_const, square, sub

T_MAX = 1000.0


def timestep_shift(k: float, t):
    """Warp raw timesteps toward the noisy end; 0 and 1000 are fixed points."""
    if k < 1:
        raise ValueError(f"shift factor must be >= 1, got {k}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > T_MAX):
        raise ValueError(f"timestep outside [0, {T_MAX:g}]")
    u = t / T_MAX
    out = (k * u) / (1.0 + (k - 1.0) * u) * T_MAX
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class NoiseSchedule:
    steps: tuple = (1000.0, 750.0, 500.0, 250.0)
    shift: float = 5.0

    def __post_init__(self):
        steps = tuple(float(s) for s in self.steps)
        object.__setattr__(self, "steps", steps)
        if not steps:
            raise ValueError("schedule needs at least one step")
        if any(b >= a for a, b in zip(steps, steps[1:])):
            raise ValueError(f"schedule must be strictly descending, got {steps}")
        if steps[0] > T_MAX or steps[-1] <= 0:
            raise ValueError(f"schedule steps must lie in (0, {T_MAX:g}]")
        if self.shift < 1:
            raise ValueError(f"shift factor must be >= 1, got {self.shift}")

    @property
    def T(self) -> int:
        return len(self.steps)

    def t(self, j: int) -> float:
        """Raw timestep t_j for j in 0..T, with t_0 = 0 and t_T = steps[0]."""
        if not 0 <= j <= self.T:
            raise ValueError(f"step index {j} outside [0, {self.T}]")
        return 0.0 if j == 0 else self.steps[self.T - j]


@dataclass(frozen=True)
class ForwardCoefficients:
    t: float
    alpha: float
    sigma: float


def coefficients(t, shift: float = 5.0):
    """(alpha_t, sigma_t) after shifting; arrays in, arrays out."""
    sigma = np.asarray(timestep_shift(shift, t)) / T_MAX
    return 1.0 - sigma, sigma


def forward_coefficients(t: float, shift: float = 5.0) -> ForwardCoefficients:
    a, s = coefficients(t, shift)
    return ForwardCoefficients(float(t), float(a), float(s))


def _expand(c, ndim: int) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return c.reshape(c.shape + (1,) * (ndim - c.ndim))


@dataclass
class NoisySample:
    frame: Tensor
    t: np.ndarray
    epsilon: np.ndarray
    shift: float = 5.0

    @property
    def sigma(self) -> np.ndarray:
        return coefficients(self.t, self.shift)[1]


def forward_perturb(clean, epsilon, t, schedule: NoiseSchedule | None = None,
                    shift: float | None = None) -> NoisySample:
    """Corrupt ``clean`` to timestep ``t`` with the given Gaussian draw.

    ``t`` may be a scalar or an array matching the leading axes of ``clean``
    (per sample, or per sample and frame). Differentiable in ``clean``.
    """
    clean = as_tensor(clean)
    epsilon = np.asarray(epsilon, dtype=np.float64)
    if epsilon.shape != clean.shape:
        raise ValueError(f"clean {clean.shape} and epsilon {epsilon.shape} differ")
    k = shift if shift is not None else (schedule.shift if schedule is not None else 5.0)
    t = np.asarray(t, dtype=np.float64)
    alpha, sigma = coefficients(t, k)
    a = _expand(alpha, clean.ndim)
    s = _expand(sigma, clean.ndim)
    noisy = mul_const(clean, np.broadcast_to(a, clean.shape)) + Tensor(s * epsilon)
    return NoisySample(noisy, t, epsilon, k)


@dataclass(frozen=True)
class Preconditioning:
    c_skip: float = 1.0
    c_in: float = 1.0
    c_out: float = 1.0
    c_noise: Callable = field(default=lambda t: t)


def data_prediction(v_hat: Tensor, noisy: NoisySample, pc: Preconditioning | None = None) -> Tensor:
    """Clean-frame estimate ``c_skip x_t - c_out sigma_t v_hat``."""
    pc = pc or Preconditioning()
    if v_hat.shape != noisy.frame.shape:
        raise ValueError(f"v_hat {v_hat.shape} vs noisy frame {noisy.frame.shape}")
    s = np.broadcast_to(_expand(noisy.sigma, v_hat.ndim), v_hat.shape)
    skip = noisy.frame if pc.c_skip == 1.0 else mul_const(noisy.frame, pc.c_skip)
    return sub(skip, mul_const(v_hat, pc.c_out * s))


def velocity_target(clean, epsilon) -> np.ndarray:
    clean = clean.data if isinstance(clean, Tensor) else np.asarray(clean)
    return np.asarray(epsilon) - clean


def frame_denoising_loss(v_hat: Tensor, noisy: NoisySample, clean, weights=None) -> Tensor:
    """Weighted mean of ``(v_hat - (eps - x))^2`` over frames and dimensions.

    ``weights`` broadcasts over the leading axes like ``t`` does (per sample
    or per frame); default is 1.
    """
    if v_hat.data.size == 0:
        raise ValueError("denoising loss on an empty sequence")
    target = velocity_target(clean, noisy.epsilon)
    err = square(sub(v_hat, Tensor(target)))
    if weights is not None:
        w = np.broadcast_to(_expand(weights, err.ndim), err.shape)
        err = mul_const(err, w)
    return mean(err)
