"""Long-sequence generation: rolling KV cache plus the two recompute baselines."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .schedule import NoiseSchedule, coefficients, forward_perturb
from .transformer import CausalTransformer, FlopCounter, KVCache, build_mask
from .world import DriftReport, WorldConfig, drift_report, mean_marginal_mmd_test, median_bandwidth, \
    sample_ground_truth

STRATEGIES = ("rolling", "recompute-window", "no-cache")
SAMPLERS = ("fewstep", "euler")
WARMUP_CHUNKS = 3


@dataclass(frozen=True)
class CacheStrategy:
    kind: str = "rolling"
    window: int = 16
    stride: int | None = None

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown cache strategy {self.kind!r}; expected one of {STRATEGIES}")
        if self.window < 1:
            raise ValueError("window must be >= 1 frame")
        if self.kind == "recompute-window":
            if self.stride is None or not 1 <= self.stride <= self.window:
                raise ValueError(f"recompute-window needs 1 <= stride <= window, got {self.stride}")


@dataclass
class GenerationTrace:
    """Per-frame cost of one generation. Chunk costs are split evenly over its frames."""

    wall_ms: list = field(default_factory=list)
    attn_flops: list = field(default_factory=list)
    first_chunk_ms: float = 0.0

    @property
    def n_frames(self) -> int:
        return len(self.wall_ms)

    @property
    def cumulative_ms(self) -> np.ndarray:
        return np.cumsum(self.wall_ms)

    @property
    def first_frame_latency_ms(self) -> float:
        """Time until the first chunk's final clean estimate exists."""
        return self.first_chunk_ms

    def record_chunk(self, n_frames: int, ms: float, flops: int) -> None:
        if not self.wall_ms:
            self.first_chunk_ms = ms
        if flops % n_frames:
            raise ArithmeticError("chunk FLOPs do not split evenly over its frames")
        self.wall_ms.extend([ms / n_frames] * n_frames)
        self.attn_flops.extend([flops // n_frames] * n_frames)

    def to_csv(self, path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        cum = self.cumulative_ms
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame_index", "wall_ms", "attn_flops", "cumulative_ms"])
            for i in range(self.n_frames):
                w.writerow([i + 1, f"{self.wall_ms[i]:.6f}", int(self.attn_flops[i]), f"{cum[i]:.6f}"])
        tmp.replace(path)


def _cond(cond, batch):
    return np.broadcast_to(np.asarray(cond, dtype=int), (batch,)).copy()


def _check(model: CausalTransformer, M: int, L: int):
    if M < 1 or L < 1:
        raise ValueError(f"need M >= 1 and L >= 1, got M={M}, L={L}")
    c = model.config.chunk_size
    if M % c or L % c:
        raise ValueError(f"M={M} and L={L} must be multiples of chunk_size {c}")


def _warmup(model: CausalTransformer, schedule: NoiseSchedule, L: int, batch: int, cond):
    """Throwaway chunks on a scratch cache so timing excludes first-call overheads."""
    c, d = model.config.chunk_size, model.config.frame_dim
    cache = KVCache(model.config.layers, max(L, c))
    z = np.zeros((batch, c, d))
    with tn.no_grad():
        for i in range(WARMUP_CHUNKS):
            for j in range(schedule.T, 0, -1):
                model.denoise_cached(z, schedule.t(j), cond, cache, i * c)
            model.append_kv(z, cond, cache, i * c)


def _denoise_chunk(denoise, schedule: NoiseSchedule, x: np.ndarray, rng, sampler: str = "fewstep"):
    """Run one chunk down the schedule; ``denoise(x, t)`` returns the clean estimate.

    ``fewstep`` re-noises each clean estimate with fresh Gaussian noise;
    ``euler`` follows the deterministic flow ODE, reusing the implied noise.
    """
    if sampler not in SAMPLERS:
        raise ValueError(f"unknown sampler {sampler!r}; expected one of {SAMPLERS}")
    for j in range(schedule.T, 0, -1):
        t = schedule.t(j)
        x0 = denoise(x, t)
        if j == 1:
            break
        if sampler == "fewstep":
            eps = rng.standard_normal(x.shape)
            x = forward_perturb(x0, eps, schedule.t(j - 1), schedule).frame.data
        else:
            s_now = coefficients(t, schedule.shift)[1]
            s_next = coefficients(schedule.t(j - 1), schedule.shift)[1]
            x = x0 + (s_next / s_now) * (x - x0)
    return x0


def euler_schedule(n_steps: int, shift: float = 5.0) -> NoiseSchedule:
    """Evenly spaced raw timesteps 1000, ..., 1000/n for the ODE sampler."""
    return NoiseSchedule(tuple(np.linspace(1000.0, 1000.0 / n_steps, n_steps)), shift)


def generate_rolling(model: CausalTransformer, schedule: NoiseSchedule, M: int, L: int, rng,
                     cond=0, batch: int = 1, warmup: bool = True, sampler: str = "fewstep",
                     context: np.ndarray | None = None):
    """Generate M frames with a FIFO cache holding at most L context frames.

    Cached K/V are never recomputed; the oldest chunk is evicted when full.
    ``context`` (batch, k, d) seeds the cache with given clean frames, which
    count toward M and are returned unchanged. Returns frames (batch, M, d)
    and a :class:`GenerationTrace` over the generated frames.
    """
    _check(model, M, L)
    c, d = model.config.chunk_size, model.config.frame_dim
    cond = _cond(cond, batch)
    if warmup:
        _warmup(model, schedule, L, batch, cond)
    cache = KVCache(model.config.layers, L)
    trace, out = GenerationTrace(), []
    first = 0
    if context is not None:
        context = np.asarray(context, dtype=np.float64)
        k = context.shape[1]
        if context.shape[0] != batch or context.shape[2] != d or k % c or k > M:
            raise ValueError(f"context of shape {context.shape} does not fit batch={batch}, d={d}, "
                             f"chunk_size={c}, M={M}")
        with tn.no_grad():
            for i in range(k // c):
                model.append_kv(context[:, i * c:(i + 1) * c], cond, cache, i * c)
        out.append(context)
        first = k // c
    with tn.no_grad():
        for i in range(first, M // c):
            start = i * c
            counter = FlopCounter()
            t0 = time.perf_counter()
            x = rng.standard_normal((batch, c, d))
            x0 = _denoise_chunk(
                lambda z, t: model.denoise_cached(z, t, cond, cache, start, counter=counter).data,
                schedule, x, rng, sampler)
            model.append_kv(x0, cond, cache, start, counter=counter)
            trace.record_chunk(c, (time.perf_counter() - t0) * 1e3, counter.total)
            out.append(x0)
    return np.concatenate(out, axis=1), trace


def _rebuild(model, frames: list, first: int, cond, L: int, counter) -> KVCache:
    """Fresh cache from stored clean chunks, encoded causally in order."""
    c = model.config.chunk_size
    cache = KVCache(model.config.layers, L)
    for k, chunk in enumerate(frames):
        model.append_kv(chunk, cond, cache, first + k * c, counter=counter)
    return cache


def generate_recompute_window(model: CausalTransformer, schedule: NoiseSchedule, M: int, L: int,
                              stride: int, rng, cond=0, batch: int = 1, warmup: bool = True,
                              sampler: str = "fewstep"):
    """Causal sliding window that re-encodes the overlap on every shift.

    The cache fills to L frames; the next chunk then shifts the window by
    ``stride`` frames and K/V for the remaining L - stride frames are
    recomputed from their stored clean values before generation resumes.
    """
    _check(model, M, L)
    c, d = model.config.chunk_size, model.config.frame_dim
    if not 1 <= stride <= L or stride % c:
        raise ValueError(f"stride must be a multiple of chunk_size in [1, L], got {stride}")
    cond = _cond(cond, batch)
    if warmup:
        _warmup(model, schedule, L, batch, cond)
    cache = KVCache(model.config.layers, L)
    window: list = []      # clean chunks currently in the cache
    first = 0              # absolute frame index of window[0]
    trace, out = GenerationTrace(), []
    with tn.no_grad():
        for i in range(M // c):
            start = i * c
            counter = FlopCounter()
            t0 = time.perf_counter()
            if len(window) * c == L:
                drop = stride // c
                window = window[drop:]
                first += stride
                cache = _rebuild(model, window, first, cond, L, counter)
            x = rng.standard_normal((batch, c, d))
            x0 = _denoise_chunk(
                lambda z, t: model.denoise_cached(z, t, cond, cache, start, counter=counter).data,
                schedule, x, rng, sampler)
            model.append_kv(x0, cond, cache, start, counter=counter)
            window.append(x0)
            trace.record_chunk(c, (time.perf_counter() - t0) * 1e3, counter.total)
            out.append(x0)
    return np.concatenate(out, axis=1), trace


def generate_no_cache(model: CausalTransformer, schedule: NoiseSchedule, M: int, L: int, rng,
                      cond=0, batch: int = 1, warmup: bool = True, sampler: str = "fewstep"):
    """Every denoising step re-runs the last L clean frames plus the noisy chunk.

    Context frames enter at timestep 0 under a block-causal mask, so for
    M <= L the output equals the cached strategies.
    """
    _check(model, M, L)
    c, d = model.config.chunk_size, model.config.frame_dim
    p = model.config.tokens_per_frame
    cond = _cond(cond, batch)
    if warmup:
        _warmup(model, schedule, L, batch, cond)
    trace, out = GenerationTrace(), []
    history = np.zeros((batch, 0, d))
    with tn.no_grad():
        for i in range(M // c):
            start = i * c
            counter = FlopCounter()
            t0 = time.perf_counter()
            ctx = history[:, max(0, start - L):]
            lo = start - ctx.shape[1]
            n = ctx.shape[1] + c
            spec = build_mask("df", n, p, c)
            # relabel so frame indices stay absolute
            spec.frame_index = spec.frame_index + lo

            def denoise(z, t):
                stream = np.concatenate([ctx, z], axis=1)
                tt = np.zeros((batch, n))
                tt[:, -c:] = t
                x0 = model.denoise_masked(stream, tt, cond, spec, counter)
                return x0.data[:, -c:]

            x = rng.standard_normal((batch, c, d))
            x0 = _denoise_chunk(denoise, schedule, x, rng, sampler)
            history = np.concatenate([history, x0], axis=1)
            trace.record_chunk(c, (time.perf_counter() - t0) * 1e3, counter.total)
            out.append(x0)
    return np.concatenate(out, axis=1), trace


def generate(model: CausalTransformer, schedule: NoiseSchedule, M: int, strategy: CacheStrategy, rng,
             cond=0, batch: int = 1, warmup: bool = True, sampler: str = "fewstep"):
    if strategy.kind == "rolling":
        return generate_rolling(model, schedule, M, strategy.window, rng, cond, batch, warmup, sampler)
    if strategy.kind == "recompute-window":
        return generate_recompute_window(model, schedule, M, strategy.window, strategy.stride, rng,
                                         cond, batch, warmup, sampler)
    return generate_no_cache(model, schedule, M, strategy.window, rng, cond, batch, warmup, sampler)


# --------------------------------------------------------------------------
# closed-form attention costs (4 * queries * keys * width per layer)


def chunk_flops(model: CausalTransformer, T: int, context_frames: int) -> int:
    """One cached chunk: T denoise passes plus the K/V append, all seeing the same context."""
    cfg = model.config
    q = cfg.tokens_per_frame * cfg.chunk_size
    k = cfg.tokens_per_frame * (context_frames + cfg.chunk_size)
    return (T + 1) * cfg.layers * 4 * q * k * cfg.model_dim


def reencode_flops(model: CausalTransformer, n_frames: int) -> int:
    """Causal re-encoding of ``n_frames`` stored frames, chunk by chunk."""
    cfg = model.config
    c, p = cfg.chunk_size, cfg.tokens_per_frame
    q = p * c
    return sum(cfg.layers * 4 * q * p * (k + c) * cfg.model_dim for k in range(0, n_frames, c))


def window_flops(model: CausalTransformer, T: int, context_frames: int) -> int:
    """One no-cache chunk: T dense masked passes over context plus chunk."""
    cfg = model.config
    n = cfg.tokens_per_frame * (context_frames + cfg.chunk_size)
    return T * cfg.layers * 4 * n * n * cfg.model_dim


# --------------------------------------------------------------------------
# extrapolation


@dataclass
class ExtrapolationResult:
    with_window: DriftReport
    without_window: DriftReport
    within_stat: float
    within_p: float
    horizon: int

    @property
    def improved(self) -> bool:
        a, b = self.with_window.distances, self.without_window.distances
        return bool(len(a)) and float(np.mean(a)) < float(np.mean(b))


def extrapolation_quality(with_window: CausalTransformer, without_window: CausalTransformer,
                          schedule: NoiseSchedule, world: WorldConfig, M: int, horizon: int, L: int,
                          rng, n_samples: int = 200, cond=0, n_perm: int = 200,
                          sampler: str = "fewstep") -> ExtrapolationResult:
    """Drift beyond the training horizon for two models that differ only in local-window training.

    Both models roll out M frames with a rolling cache of L frames. Frames
    after ``horizon`` get per-index MMD^2 reports against fresh ground
    truth; frames up to ``horizon`` are compared between the two models
    with a whole-sequence permutation test.
    """
    if with_window.config != without_window.config:
        raise ValueError("models differ in architecture; only the local-window flag may differ")
    if not 1 <= horizon <= M:
        raise ValueError(f"need 1 <= horizon <= M, got horizon={horizon}, M={M}")
    seed = rng.integers(2 ** 63)
    xa, _ = generate_rolling(with_window, schedule, M, L, np.random.default_rng(seed), cond, n_samples,
                             warmup=False, sampler=sampler)
    xb, _ = generate_rolling(without_window, schedule, M, L, np.random.default_rng(seed + 1), cond,
                             n_samples, warmup=False, sampler=sampler)
    truth = sample_ground_truth(world, M, cond, rng, n_samples)
    h = median_bandwidth(truth.reshape(-1, truth.shape[2]))
    stat, p = mean_marginal_mmd_test(xa[:, :horizon], xb[:, :horizon], h, rng, n_perm)
    if M > horizon:
        ra = drift_report(xa[:, horizon:], truth[:, horizon:], h, frame_offset=horizon)
        rb = drift_report(xb[:, horizon:], truth[:, horizon:], h, frame_offset=horizon)
    else:
        empty = np.zeros(0)
        ra = DriftReport(empty, 0.0, 0.0, np.zeros(0, int), horizon, h)
        rb = DriftReport(empty.copy(), 0.0, 0.0, np.zeros(0, int), horizon, h)
    return ExtrapolationResult(ra, rb, stat, p, horizon)
