"""Training loops for teacher forcing, diffusion forcing and self forcing.

Every run starts with a teacher phase: a bidirectional whole-sequence
denoiser trained on ground truth (with condition dropout so guidance has an
unconditional branch). Its weights initialise the generator and the critic,
and it stays frozen as the real score. The paradigm phase follows.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import tensor as tn
from .config import RunConfig
from .inference import euler_schedule
from .objectives import Discriminator, EMAState, GANConfig, SequenceScore, critic_denoising_loss, \
    dmd_generator_loss, ema_update, gan_losses, sample_interval_timesteps, sid_generator_loss
from .optim import Adam
from .rollout import diffusion_forcing_step, self_forcing_rollout, teacher_forcing_step
from .schedule import NoiseSchedule
from .transformer import CausalTransformer
from .world import sample_ground_truth

METRICS_HEADER = ["iteration", "phase", "generator_loss", "critic_loss", "wall_ms"]


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def training_schedule(config: RunConfig) -> NoiseSchedule:
    return NoiseSchedule(config.schedule.steps, config.schedule.shift)


def sampling_setup(config: RunConfig) -> tuple[NoiseSchedule, str]:
    """Schedule and sampler used at generation time.

    ``auto`` keeps the few-step chain for self forcing and switches the
    denoising-trained paradigms to a many-step Euler ODE.
    """
    kind = config.schedule.sampler
    if kind == "auto":
        kind = "fewstep" if config.train.paradigm == "sf" else "euler"
    if kind == "euler":
        return euler_schedule(config.schedule.sample_steps, config.schedule.shift), "euler"
    return training_schedule(config), "fewstep"


@dataclass
class StepMetrics:
    phase: str
    generator_loss: float | None
    critic_loss: float | None


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


class Trainer:
    """Owns every network, optimizer and the run's single random stream."""

    def __init__(self, config: RunConfig, rng: np.random.Generator | None = None,
                 data: tuple[np.ndarray, np.ndarray] | None = None):
        self.config = config.validate()
        self.dataset = data
        self.rng = rng if rng is not None else make_rng(config.seed)
        self.schedule = training_schedule(config)
        mc = config.model
        shift = config.schedule.shift
        self.teacher = CausalTransformer(mc, self.rng, shift=shift)
        self.generator = CausalTransformer(mc, self.rng, shift=shift)
        self.critic = CausalTransformer(mc, self.rng, shift=shift)
        self.disc = Discriminator(self.critic, self.rng)
        o = config.optim
        clip = o.grad_clip if o.grad_clip > 0 else None
        self.opt_teacher = Adam(self.teacher.params, o.lr_teacher, 0.9, o.beta2, o.eps, 0.0, clip)
        self.opt_gen = Adam(self.generator.params, o.lr_generator, o.beta1, o.beta2, o.eps,
                            self._decay(), clip)
        critic_params = self.disc.params if config.train.objective == "gan" else self.critic.params
        self.opt_critic = Adam(critic_params, o.lr_critic, o.beta1, o.beta2, o.eps, self._decay(), clip)
        self.ema = EMAState.from_params(self.generator.params, o.ema_decay)
        self.iteration = 0

    def _decay(self) -> float:
        # SiD runs without weight decay; the other objectives use the configured value
        return 0.0 if self.config.train.objective == "sid" else self.config.optim.weight_decay

    # -- bookkeeping ----------------------------------------------------------

    @property
    def total_iterations(self) -> int:
        return self.config.train.teacher_iterations + self.config.train.iterations

    @property
    def local_window(self) -> int | None:
        t = self.config.train
        return t.n_frames - self.config.model.chunk_size if t.local_window else None

    def _start_paradigm(self) -> None:
        """Copy the teacher into generator and critic; fresh optimizer and EMA state."""
        state = self.teacher.state_dict()
        self.generator.load_state_dict({k: v.copy() for k, v in state.items()})
        self.critic.load_state_dict({k: v.copy() for k, v in state.items()})
        for opt in (self.opt_gen, self.opt_critic):
            opt.step_count = 0
            for k in opt.m:
                opt.m[k] = np.zeros_like(opt.m[k])
                opt.v[k] = np.zeros_like(opt.v[k])
        self.ema = EMAState.from_params(self.generator.params, self.config.optim.ema_decay)

    def _data(self, batch: int):
        """Ground-truth batch: fresh world draws, or rows resampled from ``dataset``."""
        if self.dataset is not None:
            X, y = self.dataset
            idx = self.rng.integers(0, len(X), size=batch)
            return X[idx], y[idx]
        t = self.config.train
        cond = self.rng.integers(0, self.config.world.n_conditions, size=batch)
        x = sample_ground_truth(self.config.world, t.n_frames, cond, self.rng, batch)
        return x, cond

    # -- phases -------------------------------------------------------------

    def teacher_step(self) -> StepMetrics:
        tc = self.config.train
        x, cond = self._data(tc.batch)
        drop = self.rng.uniform(size=tc.batch) < tc.cond_dropout
        cond = np.where(drop, self.config.model.condition_vocab, cond)
        t = self.rng.uniform(0.0, 1000.0, size=tc.batch)
        eps = self.rng.standard_normal(x.shape)
        self.opt_teacher.zero_grad()
        with tn.Tape() as tape:
            loss = critic_denoising_loss(SequenceScore(self.teacher), x, t, eps, cond)
        tape.backward(loss)
        self.opt_teacher.step()
        return StepMetrics("teacher", None, loss.item())

    def denoise_step(self) -> StepMetrics:
        tc = self.config.train
        x, cond = self._data(tc.batch)
        step = teacher_forcing_step if tc.paradigm == "tf" else diffusion_forcing_step
        self.opt_gen.zero_grad()
        with tn.Tape() as tape:
            loss = step(self.generator, x, cond, self.rng, local_window=self.local_window)
        tape.backward(loss)
        self.opt_gen.step()
        ema_update(self.ema, self.generator.params)
        return StepMetrics(tc.paradigm, loss.item(), None)

    def _dm_t(self, batch: int, n_frames: int, s: int) -> np.ndarray:
        dm = self.config.dm
        if dm.restrict_t:
            return sample_interval_timesteps(self.rng, batch, self.schedule, s)
        shape = (batch, n_frames) if dm.per_frame_t else (batch,)
        return self.rng.uniform(dm.t_min, dm.t_max, size=shape)

    def self_forcing_step(self, paradigm_iteration: int) -> StepMetrics:
        tc, dm = self.config.train, self.config.dm
        objective = tc.objective
        B, N = tc.batch, tc.n_frames
        ratio = 1 if objective == "gan" else dm.update_ratio
        update_gen = paradigm_iteration % ratio == 0
        cond = self._conditions(B)
        real, critic = SequenceScore(self.teacher), SequenceScore(self.critic)
        g_loss = None
        with tn.Tape() as tape:
            if update_gen:
                res = self_forcing_rollout(self.generator, self.schedule, N, cond, self.rng, B,
                                           local_window=tc.local_window)
            else:
                with tn.no_grad():
                    res = self_forcing_rollout(self.generator, self.schedule, N, cond, self.rng, B,
                                               local_window=tc.local_window)
            x_hat = res.frames
            s = res.truncation.s
            if update_gen:
                t = self._dm_t(B, N, s)
                eps = self.rng.standard_normal(x_hat.shape)
                if objective == "dmd":
                    loss = dmd_generator_loss(x_hat, real, critic, t, eps, cond, dm.cfg_weight)
                elif objective == "sid":
                    loss = sid_generator_loss(x_hat, real, critic, t, eps, cond, dm.sid_alpha, dm.cfg_weight)
                else:
                    x_real, _ = self._gan_real(cond)
                    loss = gan_losses(self.disc, x_real, x_hat, t, self.rng, self._gan_config(), cond).generator
        if update_gen:
            self.opt_gen.zero_grad()
            tape.backward(loss)
            # only the generator moves; frozen and critic networks drop what they collected
            self.teacher.zero_grad()
            self.critic.zero_grad()
            for p in self.disc.head.values():
                p.grad = None
            self.opt_gen.step()
            ema_update(self.ema, self.generator.params)
            g_loss = loss.item()
        c_loss = self._critic_step(tn.stop_gradient(x_hat).data, cond, s)
        return StepMetrics(f"sf-{objective}", g_loss, c_loss)

    def _conditions(self, batch: int) -> np.ndarray:
        if self.dataset is not None:
            return self.rng.choice(self.dataset[1], size=batch)
        return self.rng.integers(0, self.config.world.n_conditions, size=batch)

    def _gan_config(self) -> GANConfig:
        dm = self.config.dm
        return GANConfig(dm.gan_lambda, dm.gan_sigma)

    def _gan_real(self, cond):
        if self.dataset is not None:
            X, y = self.dataset
            idx = np.array([self.rng.choice(np.flatnonzero(y == c)) for c in cond])
            return X[idx], cond
        x = sample_ground_truth(self.config.world, self.config.train.n_frames, cond, self.rng, len(cond))
        return x, cond

    def _critic_step(self, fake: np.ndarray, cond, s: int) -> float:
        B, N = fake.shape[:2]
        self.opt_critic.zero_grad()
        with tn.Tape() as tape:
            if self.config.train.objective == "gan":
                x_real, _ = self._gan_real(cond)
                t = self._dm_t(B, N, s)
                loss = gan_losses(self.disc, x_real, fake, t, self.rng, self._gan_config(), cond).discriminator
            else:
                t = self._dm_t(B, N, s)
                eps = self.rng.standard_normal(fake.shape)
                loss = critic_denoising_loss(SequenceScore(self.critic), fake, t, eps, cond)
        tape.backward(loss)
        self.teacher.zero_grad()
        self.opt_critic.step()
        return loss.item()

    def step(self) -> StepMetrics:
        """Advance one global iteration (teacher phase first, then the paradigm)."""
        k = self.iteration
        tc = self.config.train
        if k < tc.teacher_iterations:
            m = self.teacher_step()
        else:
            j = k - tc.teacher_iterations
            if j == 0 and tc.teacher_iterations > 0:
                self._start_paradigm()
            m = self.self_forcing_step(j) if tc.paradigm == "sf" else self.denoise_step()
        self.iteration += 1
        return m

    # -- persistence ----------------------------------------------------------

    def to_checkpoint(self) -> ckpt_io.Checkpoint:
        arrays = {}
        for prefix, params in (("teacher", self.teacher.params), ("generator", self.generator.params),
                               ("critic", self.critic.params), ("disc_head", self.disc.head)):
            arrays.update({f"{prefix}/{k}": p.data for k, p in params.items()})
        arrays.update({f"ema/{k}": v for k, v in self.ema.shadow.items()})
        for name, opt in self._optimizers().items():
            arrays.update({k: v for k, v in opt.state_arrays(f"opt_{name}").items()})
        extra = {f"steps_{name}": opt.step_count for name, opt in self._optimizers().items()}
        return ckpt_io.Checkpoint(self.config, arrays, self.iteration, ckpt_io.rng_state(self.rng), extra)

    def _optimizers(self) -> dict[str, Adam]:
        return {"teacher": self.opt_teacher, "generator": self.opt_gen, "critic": self.opt_critic}

    @classmethod
    def from_checkpoint(cls, ck: ckpt_io.Checkpoint, config: RunConfig | None = None) -> "Trainer":
        """Rebuild a trainer mid-run. ``config`` may extend the iteration budget only."""
        config = config or ck.config
        _check_resume_config(ck.config, config)
        tr = cls(config, make_rng(config.seed))
        tr.teacher.load_state_dict(ck.group("teacher"))
        tr.generator.load_state_dict(ck.group("generator"))
        tr.critic.load_state_dict(ck.group("critic"))
        for k, v in ck.group("disc_head").items():
            tr.disc.head[k].data = v.copy()
        tr.ema.shadow = {k: v.copy() for k, v in ck.group("ema").items()}
        for name, opt in tr._optimizers().items():
            sub = {k: v for k, v in ck.arrays.items() if k.startswith(f"opt_{name}.")}
            opt.load_state_arrays(f"opt_{name}", sub, ck.extra[f"steps_{name}"])
        tr.rng = ckpt_io.restore_rng(ck.rng_state)
        tr.iteration = ck.iteration
        return tr

    @classmethod
    def from_teacher(cls, ck: ckpt_io.Checkpoint, config: RunConfig) -> "Trainer":
        """Start ``config``'s paradigm phase from the teacher of a finished teacher phase.

        Lets several paradigms share one pretrained teacher; model, world,
        schedule and teacher settings must match.
        """
        if ck.iteration != ck.config.train.teacher_iterations:
            raise ValueError("checkpoint is not at the end of its teacher phase")
        a, b = ck.config.to_flat(), config.to_flat()
        shared = [k for k in a if k.split(".")[0] in ("model", "world", "schedule", "seed")
                  or k in ("train.teacher_iterations", "train.n_frames", "optim.lr_teacher")]
        diff = sorted(k for k in shared if a[k] != b[k] and k != "schedule.sampler")
        if diff:
            raise ValueError(f"teacher checkpoint differs in {diff}")
        tr = cls(config, make_rng(config.seed))
        tr.teacher.load_state_dict(ck.group("teacher"))
        tr.rng = ckpt_io.restore_rng(ck.rng_state)
        tr.iteration = ck.iteration
        return tr

    def ema_generator(self) -> CausalTransformer:
        g = self.generator.copy()
        g.load_state_dict({k: v.copy() for k, v in self.ema.shadow.items()})
        return g


def _check_resume_config(saved: RunConfig, new: RunConfig) -> None:
    a, b = saved.to_flat(), new.to_flat()
    free = {"train.iterations", "train.checkpoint_every"}
    diff = sorted(k for k in a if a[k] != b[k] and k not in free)
    if diff:
        raise ValueError(f"resume config differs from checkpoint in {diff}")


def generator_from_checkpoint(ck: ckpt_io.Checkpoint, use_ema: bool = True) -> CausalTransformer:
    cfg = ck.config
    params = ck.group("ema" if use_ema else "generator")
    model = CausalTransformer(cfg.model, params={k: tn.parameter(v) for k, v in params.items()},
                              shift=cfg.schedule.shift)
    return model


def run_training(config: RunConfig, out_dir, resume: ckpt_io.Checkpoint | None = None,
                 log=None) -> Trainer:
    """Train to the configured budget, writing ``metrics.csv`` and checkpoints under ``out_dir``.

    Periodic checkpoints go to ``checkpoint_<iteration>.ckpt``; the final
    state is always written to ``checkpoint.ckpt``. On resume, rows already
    present in the metrics log beyond the checkpoint are dropped first.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics = out / "metrics.csv"
    if resume is None:
        tr = Trainer(config)
        with open(metrics, "w", newline="") as fh:
            csv.writer(fh).writerow(METRICS_HEADER)
    else:
        tr = Trainer.from_checkpoint(resume, config)
        _truncate_metrics(metrics, tr.iteration)
    every = tr.config.train.checkpoint_every
    with open(metrics, "a", newline="") as fh:
        w = csv.writer(fh)
        while tr.iteration < tr.total_iterations:
            t0 = time.perf_counter()
            m = tr.step()
            ms = (time.perf_counter() - t0) * 1e3
            w.writerow([tr.iteration, m.phase, _fmt(m.generator_loss), _fmt(m.critic_loss), f"{ms:.3f}"])
            if log is not None:
                log(tr.iteration, m)
            if every and tr.iteration % every == 0 and tr.iteration < tr.total_iterations:
                fh.flush()
                ckpt_io.save(out / f"checkpoint_{tr.iteration}.ckpt", tr.to_checkpoint())
    ckpt_io.save(out / "checkpoint.ckpt", tr.to_checkpoint())
    return tr


def _truncate_metrics(path: Path, iteration: int) -> None:
    if not path.exists():
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerow(METRICS_HEADER)
        return
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) <= iteration]
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(keep)
