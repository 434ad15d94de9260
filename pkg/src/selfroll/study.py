"""Paradigm comparisons on the synthetic world under a shared teacher.

Each study trains one teacher per seed, forks every paradigm from it with
the same iteration budget, then measures per-frame drift of the EMA
generator against fresh ground truth.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt_io
from .config import RunConfig
from .inference import ExtrapolationResult, extrapolation_quality, generate_rolling
from .train import Trainer, make_rng, sampling_setup
from .world import DriftReport, drift_report, median_bandwidth, sample_ground_truth

PARADIGM_RUNS = {"tf": ("tf", "denoise"), "df": ("df", "denoise"), "sf": ("sf", "dmd")}


def train_teacher(config: RunConfig) -> ckpt_io.Checkpoint:
    """Run only the teacher phase of ``config`` and return its checkpoint."""
    base = copy.deepcopy(config)
    base.train.iterations = 0
    tr = Trainer(base.validate())
    while tr.iteration < tr.total_iterations:
        tr.step()
    return tr.to_checkpoint()


def fork(teacher: ckpt_io.Checkpoint, config: RunConfig, paradigm: str, objective: str,
         **train_overrides) -> Trainer:
    """Train one paradigm to completion starting from ``teacher``."""
    cfg = copy.deepcopy(config)
    cfg.train.paradigm, cfg.train.objective = paradigm, objective
    for k, v in train_overrides.items():
        setattr(cfg.train, k, v)
    tr = Trainer.from_teacher(teacher, cfg.validate())
    while tr.iteration < tr.total_iterations:
        tr.step()
    return tr


def rollout_drift(trainer: Trainer, truth: np.ndarray, bandwidth: float, seed: int,
                  cond: int = 0) -> DriftReport:
    """Per-frame MMD^2 of ``len(truth)`` EMA rollouts (rolling cache of N frames)."""
    cfg = trainer.config
    schedule, sampler = sampling_setup(cfg)
    n, N = truth.shape[:2]
    x, _ = generate_rolling(trainer.ema_generator(), schedule, N, N, make_rng(seed), cond, n,
                            warmup=False, sampler=sampler)
    return drift_report(x, truth, bandwidth)


@dataclass
class SeedOutcome:
    seed: int
    reports: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)
    trainers: dict = field(default_factory=dict)
    teacher: ckpt_io.Checkpoint | None = None


def exposure_bias_study(config: RunConfig, paradigms=("tf", "df", "sf"), n_samples: int = 400,
                        keep_trainers: bool = False) -> SeedOutcome:
    """Drift reports for each paradigm trained from one shared teacher."""
    t0 = time.perf_counter()
    teacher = train_teacher(config)
    out = SeedOutcome(config.seed, teacher=teacher)
    out.seconds["teacher"] = time.perf_counter() - t0
    rng = make_rng(10_000 + config.seed)
    truth = sample_ground_truth(config.world, config.train.n_frames, 0, rng, n_samples)
    h = median_bandwidth(truth.reshape(-1, truth.shape[2]))
    for name in paradigms:
        t0 = time.perf_counter()
        tr = fork(teacher, config, *PARADIGM_RUNS[name])
        out.reports[name] = rollout_drift(tr, truth, h, 20_000 + config.seed)
        out.seconds[name] = time.perf_counter() - t0
        if keep_trainers:
            out.trainers[name] = tr
    return out


def exposure_bias_verdict(reports: dict, ratio: float = 0.8) -> tuple[bool, str]:
    """Self forcing drifts less than both baselines and ends at most ``ratio`` x TF's final error."""
    sf, tf, df = reports["sf"], reports["tf"], reports["df"]
    slope_ok = sf.slope < tf.slope and sf.slope < df.slope
    last_ok = sf.distances[-1] <= ratio * tf.distances[-1]
    detail = (f"slope sf={sf.slope:.2e} tf={tf.slope:.2e} df={df.slope:.2e}; "
              f"final mmd2 sf={sf.distances[-1]:.4f} tf={tf.distances[-1]:.4f}")
    return slope_ok and last_ok, detail


def extrapolation_study(config: RunConfig, M: int, L: int, n_samples: int = 200, n_perm: int = 200,
                        teacher: ckpt_io.Checkpoint | None = None,
                        without: Trainer | None = None) -> ExtrapolationResult:
    """Self forcing with and without local-window training, rolled past the horizon.

    ``teacher`` and ``without`` may be reused from an earlier study with the
    same config.
    """
    teacher = teacher if teacher is not None else train_teacher(config)
    if without is None:
        without = fork(teacher, config, "sf", "dmd", local_window=False)
    with_window = fork(teacher, config, "sf", "dmd", local_window=True)
    schedule, sampler = sampling_setup(without.config)
    return extrapolation_quality(with_window.ema_generator(), without.ema_generator(), schedule,
                                 config.world, M, config.train.n_frames, L,
                                 make_rng(30_000 + config.seed), n_samples, n_perm=n_perm, sampler=sampler)
