"""Finite-difference audit of every loss path used in training."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .config import RunConfig
from .objectives import Discriminator, GANConfig, SequenceScore, critic_denoising_loss, dmd_generator_loss, \
    gan_losses, sid_generator_loss
from .rollout import diffusion_forcing_step, self_forcing_rollout, teacher_forcing_step
from .schedule import NoiseSchedule
from .transformer import CausalTransformer
from .world import sample_ground_truth

TOLERANCE = 1e-5


@dataclass
class PathResult:
    name: str
    max_rel_error: float
    n_coords: int
    seconds: float
    zero_upstream: bool = True

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE and self.zero_upstream


def _coords(params: dict, rng, per_tensor: int):
    out = []
    for name, p in params.items():
        all_idx = list(np.ndindex(p.shape))
        pick = rng.choice(len(all_idx), size=min(per_tensor, len(all_idx)), replace=False)
        out.extend((name, all_idx[i]) for i in sorted(pick))
    return out


def _replayable(make_loss, seed: int):
    """Closure that redraws identical randomness on every call."""
    def f():
        return make_loss(np.random.Generator(np.random.Philox(seed)))
    return f


def _prefixed(prefix: str, params: dict) -> dict:
    return {f"{prefix}/{k}": v for k, v in params.items()}


def run_grad_check(config: RunConfig, seed: int = 0, per_tensor: int = 3, batch: int = 2,
                   n_frames: int = 4) -> list[PathResult]:
    """grad_check over each loss path at a random subset of coordinates per tensor.

    Self-forcing paths check generator parameters (the critic and real score
    stay constant); the critic and discriminator paths check their own.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    mc = config.model
    shift = config.schedule.shift
    gen = CausalTransformer(mc, rng, shift=shift)
    real = CausalTransformer(mc, rng, shift=shift)
    fake = CausalTransformer(mc, rng, shift=shift)
    disc = Discriminator(fake.copy(), rng)
    sched = NoiseSchedule(config.schedule.steps, shift)
    world = config.world
    cond = rng.integers(0, world.n_conditions, size=batch)
    data = sample_ground_truth(world, n_frames, cond, rng, batch)
    cw = config.dm.cfg_weight
    gan_cfg = GANConfig(config.dm.gan_lambda, config.dm.gan_sigma)

    def rollout(r):
        return self_forcing_rollout(gen, sched, n_frames, cond, r, batch).frames

    def dm_t(r):
        return r.uniform(config.dm.t_min, config.dm.t_max, size=batch)

    paths = {
        "denoise-tf": (lambda r: teacher_forcing_step(gen, data, cond, r), gen.params),
        "denoise-df": (lambda r: diffusion_forcing_step(gen, data, cond, r), gen.params),
        "sf-step-s": (lambda r: tn.mean(tn.square(rollout(r))), gen.params),
        "dmd": (lambda r: _dmd(rollout(r), SequenceScore(real), SequenceScore(fake), r, cond, cw, dm_t),
                gen.params),
        "sid": (lambda r: _sid(rollout(r), SequenceScore(real), SequenceScore(fake), r, cond, cw, dm_t,
                               config.dm.sid_alpha), gen.params),
        "critic": (lambda r: critic_denoising_loss(SequenceScore(fake), rollout(r), dm_t(r),
                                                   r.standard_normal((batch, n_frames, mc.frame_dim)), cond),
                   fake.params),
        "gan-g": (lambda r: gan_losses(disc, data, rollout(r), dm_t(r), r, gan_cfg, cond).generator,
                  gen.params),
        "gan-d": (lambda r: gan_losses(disc, data, tn.stop_gradient(rollout(r)), dm_t(r), r, gan_cfg,
                                       cond).discriminator, disc.params),
    }
    results = []
    for name, (make, params) in paths.items():
        t0 = time.perf_counter()
        coords = _coords(params, rng, per_tensor)
        err = tn.grad_check(_replayable(make, seed + 1), params, coords=coords)
        zero = _upstream_zero(name, make, seed + 1, gen, real, fake)
        results.append(PathResult(name, err, len(coords), time.perf_counter() - t0, zero))
    return results


def _dmd(x_hat, real, fake, r, cond, cw, dm_t):
    t = dm_t(r)
    return dmd_generator_loss(x_hat, real, fake, t, r.standard_normal(x_hat.shape), cond, cw)


def _sid(x_hat, real, fake, r, cond, cw, dm_t, alpha):
    t = dm_t(r)
    return sid_generator_loss(x_hat, real, fake, t, r.standard_normal(x_hat.shape), cond, alpha, cw)


def _upstream_zero(name, make, seed, gen, real, fake) -> bool:
    """Stopped paths must leave exactly zero gradient on what they stop.

    DMD never differentiates the score networks; the critic and
    discriminator losses never reach the generator.
    """
    stopped = {"dmd": [real, fake], "critic": [gen], "gan-d": [gen]}.get(name)
    if not stopped:
        return True
    for m in stopped + [gen, real, fake]:
        m.zero_grad()
    with tn.Tape() as tape:
        loss = make(np.random.Generator(np.random.Philox(seed)))
    tape.backward(loss)
    ok = all(p.grad is None or not np.any(p.grad) for m in stopped for p in m.params.values())
    for m in (gen, real, fake):
        m.zero_grad()
    return ok


def format_report(results: list[PathResult]) -> str:
    lines = [f"{'path':<12} {'max_rel_err':>12} {'coords':>7} {'secs':>6}  status"]
    for r in results:
        status = "ok" if r.ok else ("FAIL" if r.zero_upstream else "FAIL (stopped path leaked)")
        lines.append(f"{r.name:<12} {r.max_rel_error:12.3e} {r.n_coords:7d} {r.seconds:6.1f}  {status}")
    worst = max(r.max_rel_error for r in results)
    lines.append(f"worst {worst:.3e} (tolerance {TOLERANCE:g})")
    return "\n".join(lines)
