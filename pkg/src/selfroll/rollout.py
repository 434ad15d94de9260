"""Training paradigms: parallel teacher/diffusion forcing and self-forcing rollout."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .schedule import NoiseSchedule, forward_perturb, frame_denoising_loss
from .tensor import Tensor
from .transformer import CausalTransformer, KVCache, build_mask


@dataclass(frozen=True)
class TruncationDraw:
    s: int
    T: int

    def __post_init__(self):
        if not 1 <= self.s <= self.T:
            raise ValueError(f"truncation step s={self.s} outside [1, {self.T}]")


def draw_truncation(schedule: NoiseSchedule, rng) -> TruncationDraw:
    return TruncationDraw(int(rng.integers(1, schedule.T + 1)), schedule.T)


@dataclass
class RolloutResult:
    frames: Tensor
    cache: KVCache
    epsilons: list = field(default_factory=list)
    truncation: TruncationDraw | None = None
    grad_steps: list = field(default_factory=list)
    tape_nodes: list = field(default_factory=list)

    @property
    def n_chunks(self) -> int:
        return len(self.grad_steps)


def _cond(cond, batch: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(cond, dtype=int), (batch,)).copy()


def _window_start(n_frames: int, chunk_size: int, i: int, local_window: bool):
    """First visible frame for chunk ``i``: the final chunk skips chunk 0."""
    last = i == n_frames // chunk_size - 1
    return chunk_size if (local_window and last and i > 0) else None


def self_forcing_rollout(model: CausalTransformer, schedule: NoiseSchedule, n_frames: int, cond,
                         rng, batch: int = 1, s: int | None = None,
                         local_window: bool = False) -> RolloutResult:
    """Autoregressive self-rollout with KV caching and gradient truncation.

    For every chunk the denoising chain runs from t_T down to t_s without
    recording; only the step-s denoise is recorded on the caller's tape and
    its clean estimate becomes that chunk's output. Cached K/V come from the
    clean estimate re-encoded at timestep 0 and never carry gradients.
    """
    c = model.config.chunk_size
    if n_frames % c:
        raise ValueError(f"chunk_size {c} does not divide {n_frames}")
    trunc = draw_truncation(schedule, rng) if s is None else TruncationDraw(int(s), schedule.T)
    s = trunc.s
    cond = _cond(cond, batch)
    d = model.config.frame_dim
    cache = KVCache(model.config.layers, n_frames)
    outputs, epsilons, grad_steps, nodes = [], [], [], []
    tape = tn._active_tape()
    for i in range(n_frames // c):
        start = i * c
        lo = _window_start(n_frames, c, i, local_window)
        x = rng.standard_normal((batch, c, d))
        chunk_eps = [x]
        for j in range(schedule.T, s - 1, -1):
            t = schedule.t(j)
            if j == s:
                before = len(tape) if tape is not None else 0
                x0 = model.denoise_cached(tn.stop_gradient(x), t, cond, cache, start, lo)
                if tape is not None:
                    nodes.append(len(tape) - before)
                outputs.append(x0)
                grad_steps.append(j)
                model.append_kv(x0, cond, cache, start, lo)
            else:
                with tn.no_grad():
                    x0 = model.denoise_cached(x, t, cond, cache, start, lo)
                eps = rng.standard_normal(x.shape)
                chunk_eps.append(eps)
                x = forward_perturb(x0.data, eps, schedule.t(j - 1), schedule).frame.data
        epsilons.append(chunk_eps)
    frames = tn.concat(outputs, axis=1)
    return RolloutResult(frames, cache, epsilons, trunc, grad_steps, nodes)


def inference_rollout(model: CausalTransformer, schedule: NoiseSchedule, n_frames: int, cond,
                      rng, batch: int = 1) -> np.ndarray:
    """Full T-step generation with a cache holding every previous chunk."""
    with tn.no_grad():
        res = self_forcing_rollout(model, schedule, n_frames, cond, rng, batch, s=1)
    return res.frames.data


# --------------------------------------------------------------------------
# parallel paradigms


def _interleave(clean: np.ndarray, noisy: Tensor, chunk_size: int) -> tuple[Tensor, np.ndarray]:
    """Stream [clean chunk 0, noisy chunk 0, clean chunk 1, ...] and the noisy slots."""
    B, N, d = clean.shape
    parts, slots, pos = [], [], 0
    for c in range(N // chunk_size):
        sl = slice(c * chunk_size, (c + 1) * chunk_size)
        parts.append(Tensor(clean[:, sl]))
        parts.append(tn.take(noisy, (slice(None), sl)))
        slots.extend(range(pos + chunk_size, pos + 2 * chunk_size))
        pos += 2 * chunk_size
    return tn.concat(parts, axis=1), np.asarray(slots)


def teacher_forcing_loss(model: CausalTransformer, data, cond, t, epsilon, weights=None,
                         local_window: int | None = None) -> Tensor:
    """Denoising loss with clean ground-truth context, all frames in parallel.

    ``t`` holds one timestep per sequence, shared across frames.
    """
    data = np.asarray(data, dtype=np.float64)
    B, N, _ = data.shape
    c = model.config.chunk_size
    t = np.asarray(t, dtype=np.float64).reshape(B)
    noisy = forward_perturb(data, epsilon, t, shift=model.shift)
    stream, slots = _interleave(data, noisy.frame, c)
    spec = build_mask("tf", N, model.config.tokens_per_frame, c, local_window)
    t_stream = np.zeros((B, 2 * N))
    t_stream[:, slots] = t[:, None]
    v = model.forward_masked(stream, t_stream, _cond(cond, B), spec)
    v_noisy = tn.concat([tn.take(v, (slice(None), slice(k, k + c))) for k in slots[::c]], axis=1)
    return frame_denoising_loss(v_noisy, noisy, data, weights)


def teacher_forcing_step(model: CausalTransformer, data, cond, rng, t=None,
                        local_window: int | None = None) -> Tensor:
    """One teacher-forcing loss draw: shared t per sequence, then epsilon."""
    data = np.asarray(data, dtype=np.float64)
    B = data.shape[0]
    if t is None:
        t = rng.uniform(0.0, 1000.0, size=B)
    eps = rng.standard_normal(data.shape)
    return teacher_forcing_loss(model, data, cond, t, eps, local_window=local_window)


def diffusion_forcing_loss(model: CausalTransformer, data, cond, t, epsilon, weights=None,
                           local_window: int | None = None) -> Tensor:
    """Denoising loss with independently noised context under a block-causal mask."""
    data = np.asarray(data, dtype=np.float64)
    B, N, _ = data.shape
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B, N))
    noisy = forward_perturb(data, epsilon, t, shift=model.shift)
    spec = build_mask("df", N, model.config.tokens_per_frame, model.config.chunk_size, local_window)
    v = model.forward_masked(noisy.frame, t, _cond(cond, B), spec)
    return frame_denoising_loss(v, noisy, data, weights)


def diffusion_forcing_step(model: CausalTransformer, data, cond, rng, t=None,
                           local_window: int | None = None) -> Tensor:
    """One diffusion-forcing loss draw: i.i.d. t per frame, then epsilon."""
    data = np.asarray(data, dtype=np.float64)
    B, N, _ = data.shape
    if t is None:
        t = draw_frame_timesteps(rng, B, N, model.config.chunk_size)
    eps = rng.standard_normal(data.shape)
    return diffusion_forcing_loss(model, data, cond, t, eps, local_window=local_window)


def draw_frame_timesteps(rng, batch: int, n_frames: int, chunk_size: int = 1) -> np.ndarray:
    """Independent uniform timesteps per chunk, repeated over its frames."""
    t = rng.uniform(0.0, 1000.0, size=(batch, n_frames // chunk_size))
    return np.repeat(t, chunk_size, axis=1)
