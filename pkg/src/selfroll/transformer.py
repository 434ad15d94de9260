"""Tiny frame-sequence transformer with mask-based and KV-cached forwards.

Frames are split into ``tokens_per_frame`` patches. Every token receives a
patch embedding, a slot embedding, a timestep embedding, a condition
embedding and (for frame 0 only) a first-frame marker. Attention logits carry
a learned bias indexed by the frame distance between query and key, computed
from the absolute frame index each token was generated at.
"""

from __future__ import annotations

from collections import deque
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tn
from .schedule import NoisySample, Preconditioning, data_prediction, timestep_shift
from .tensor import Tensor, ShapeError

PARADIGMS = {
    "tf": "teacher-forcing",
    "teacher-forcing": "teacher-forcing",
    "df": "diffusion-forcing",
    "diffusion-forcing": "diffusion-forcing",
    "sf": "self-forcing-full",
    "self-forcing-full": "self-forcing-full",
    "bidirectional": "bidirectional",
}


@dataclass
class ModelConfig:
    frame_dim: int = 2
    tokens_per_frame: int = 2
    model_dim: int = 32
    layers: int = 2
    heads: int = 2
    chunk_size: int = 1
    max_frames: int = 16
    condition_vocab: int = 1
    mlp_ratio: int = 4
    time_features: int = 8

    def validate(self) -> "ModelConfig":
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.max_frames % self.chunk_size:
            raise ValueError(f"chunk_size {self.chunk_size} does not divide max_frames {self.max_frames}")
        if self.frame_dim % self.tokens_per_frame:
            raise ValueError(f"tokens_per_frame {self.tokens_per_frame} does not divide frame_dim {self.frame_dim}")
        if self.time_features % 2:
            raise ValueError("time_features must be even")
        return self

    @property
    def patch_dim(self) -> int:
        return self.frame_dim // self.tokens_per_frame


# --------------------------------------------------------------------------
# masks


@dataclass
class AttentionMaskSpec:
    """Frame-level layout plus the boolean mask derived from it.

    ``frame_index`` and ``noisy`` describe each frame slot in the stream fed
    to :meth:`CausalTransformer.forward_masked`; teacher forcing doubles the
    stream with interleaved clean/noisy chunks.
    """

    paradigm: str
    n_frames: int
    tokens_per_frame: int
    chunk_size: int
    frame_index: np.ndarray
    noisy: np.ndarray
    frame_mask: np.ndarray
    local_window: int | None = None

    @property
    def matrix(self) -> np.ndarray:
        p = self.tokens_per_frame
        return np.kron(self.frame_mask, np.ones((p, p), dtype=bool)).astype(bool)

    @property
    def token_frames(self) -> np.ndarray:
        return np.repeat(self.frame_index, self.tokens_per_frame)


def build_mask(paradigm: str, n_frames: int, tokens_per_frame: int = 2, chunk_size: int = 1,
               local_window: int | None = None) -> AttentionMaskSpec:
    """Mask for parallel training over ``n_frames`` frames.

    With ``local_window`` set, rows of the final chunk may only attend to
    frames with index >= n_frames - local_window; ``n_frames - chunk_size``
    hides exactly the first chunk.
    """
    try:
        paradigm = PARADIGMS[paradigm]
    except KeyError:
        raise ValueError(f"unknown paradigm {paradigm!r}") from None
    if n_frames < 1 or tokens_per_frame < 1 or chunk_size < 1 or n_frames % chunk_size:
        raise ValueError(f"invalid layout N={n_frames} p={tokens_per_frame} chunk={chunk_size}")
    if local_window is not None:
        if local_window > n_frames:
            raise ValueError(f"local_window {local_window} exceeds N={n_frames}")
        if local_window < chunk_size:
            raise ValueError(f"local_window {local_window} would hide the final chunk from itself")

    frames = np.arange(n_frames)
    if paradigm == "teacher-forcing":
        n_chunks = n_frames // chunk_size
        idx, noisy = [], []
        for c in range(n_chunks):
            block = frames[c * chunk_size:(c + 1) * chunk_size]
            idx += [block, block]
            noisy += [np.zeros(chunk_size, bool), np.ones(chunk_size, bool)]
        frame_index = np.concatenate(idx)
        noisy = np.concatenate(noisy)
    else:
        frame_index = frames
        noisy = np.ones(n_frames, bool)

    chunk = frame_index // chunk_size
    row_c, col_c = chunk[:, None], chunk[None, :]
    if paradigm == "teacher-forcing":
        row_n, col_n = noisy[:, None], noisy[None, :]
        clean_rows = ~row_n & ~col_n & (col_c <= row_c)
        noisy_rows = row_n & ((~col_n & (col_c < row_c)) | (col_n & (col_c == row_c)))
        mask = clean_rows | noisy_rows
    elif paradigm == "bidirectional":
        mask = np.ones((len(frame_index), len(frame_index)), bool)
    else:
        mask = col_c <= row_c

    if local_window is not None:
        last = chunk == chunk.max()
        hidden = frame_index < n_frames - local_window
        mask = mask & ~(last[:, None] & hidden[None, :])
    return AttentionMaskSpec(paradigm, n_frames, tokens_per_frame, chunk_size,
                             frame_index, noisy, mask, local_window)


# --------------------------------------------------------------------------
# cache


class KVCache:
    """Per-layer FIFO of key/value blocks, capacity counted in frames.

    Entries are stored detached; they never carry gradients.
    """

    def __init__(self, layers: int, capacity: int):
        if capacity < 1:
            raise ValueError(f"cache capacity must be >= 1, got {capacity}")
        self.layers = layers
        self.capacity = capacity
        self.entries: deque = deque()
        self._memo: dict = {}

    def __len__(self) -> int:
        return sum(len(e[0]) for e in self.entries)

    @property
    def frames(self) -> list[int]:
        return [int(f) for e in self.entries for f in e[0]]

    def append(self, frame_index, keys: list, values: list) -> None:
        frame_index = np.asarray(frame_index, dtype=int)
        if len(keys) != self.layers or len(values) != self.layers:
            raise ValueError(f"expected {self.layers} layers of K/V, got {len(keys)}")
        if len(frame_index) > self.capacity:
            raise ValueError(f"chunk of {len(frame_index)} frames exceeds capacity {self.capacity}")
        if self.entries and frame_index.min() <= self.entries[-1][0].max():
            raise ValueError("cache frames must be appended in increasing order")
        while self.entries and len(self) + len(frame_index) > self.capacity:
            self.entries.popleft()
        self.entries.append((frame_index, list(keys), list(values)))
        self._memo.clear()

    def pop_front(self, n_frames: int) -> None:
        """Evict whole entries until at least ``n_frames`` frames are gone."""
        removed = 0
        while self.entries and removed < n_frames:
            removed += len(self.entries.popleft()[0])
        self._memo.clear()

    def layer(self, i: int, min_frame: int | None = None):
        """Concatenated (K, V, key frame indices) for layer ``i``."""
        key = (i, min_frame)
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        ents = [e for e in self.entries if min_frame is None or e[0][0] >= min_frame]
        if not ents:
            out = (None, None, np.zeros(0, dtype=int))
        else:
            p = ents[0][1][i].shape[-2] // len(ents[0][0])
            out = (np.concatenate([e[1][i] for e in ents], axis=-2),
                   np.concatenate([e[2][i] for e in ents], axis=-2),
                   np.concatenate([np.repeat(e[0], p) for e in ents]))
        self._memo[key] = out
        return out

    def copy(self) -> "KVCache":
        c = KVCache(self.layers, self.capacity)
        c.entries = deque(self.entries)
        return c


class FlopCounter:
    """Counts attention FLOPs: 2 multiply-adds per (query, key, channel) per layer."""

    def __init__(self):
        self.total = 0

    def add(self, n_query: int, n_key: int, width: int, layers: int = 1) -> None:
        self.total += 4 * n_query * n_key * width * layers


# --------------------------------------------------------------------------
# model


def _normal(rng, shape, std):
    return tn.parameter(rng.standard_normal(shape) * std)


def init_params(config: ModelConfig, rng) -> dict[str, Tensor]:
    config.validate()
    D, pd = config.model_dim, config.patch_dim
    hidden = config.mlp_ratio * D
    R = config.max_frames
    res = 0.5 / np.sqrt(2 * config.layers)
    p = {
        "embed.patch.w": _normal(rng, (pd, D), 1.0 / np.sqrt(pd)),
        "embed.patch.b": tn.parameter(np.zeros(D)),
        "embed.slot": _normal(rng, (config.tokens_per_frame, D), 0.1),
        "embed.time.w": _normal(rng, (config.time_features, D), 1.0 / np.sqrt(config.time_features)),
        "embed.time.b": tn.parameter(np.zeros(D)),
        "embed.cond": _normal(rng, (config.condition_vocab + 1, D), 0.1),
        "embed.marker": _normal(rng, (2, D), 0.1),
    }
    for l in range(config.layers):
        pre = f"layers.{l}."
        p[pre + "ln1.g"] = tn.parameter(np.ones(D))
        p[pre + "ln1.b"] = tn.parameter(np.zeros(D))
        for name in ("q", "k", "v"):
            p[pre + "attn." + name] = _normal(rng, (D, D), 1.0 / np.sqrt(D))
        p[pre + "attn.o"] = _normal(rng, (D, D), res / np.sqrt(D) * np.sqrt(2))
        p[pre + "attn.relpos"] = tn.parameter(np.zeros((2 * R - 1, config.heads)))
        p[pre + "ln2.g"] = tn.parameter(np.ones(D))
        p[pre + "ln2.b"] = tn.parameter(np.zeros(D))
        p[pre + "mlp.w1"] = _normal(rng, (D, hidden), 1.0 / np.sqrt(D))
        p[pre + "mlp.b1"] = tn.parameter(np.zeros(hidden))
        p[pre + "mlp.w2"] = _normal(rng, (hidden, D), res / np.sqrt(hidden) * np.sqrt(2))
        p[pre + "mlp.b2"] = tn.parameter(np.zeros(D))
    p["out.ln.g"] = tn.parameter(np.ones(D))
    p["out.ln.b"] = tn.parameter(np.zeros(D))
    p["out.w"] = _normal(rng, (D, pd), 0.5 / np.sqrt(D))
    p["out.b"] = tn.parameter(np.zeros(pd))
    return p


def time_features(tprime, n: int) -> np.ndarray:
    """Fixed Fourier features of the shifted timestep scaled to [0, 1]."""
    u = np.asarray(tprime, dtype=np.float64)[..., None] / 1000.0
    freqs = np.pi * 0.5 * 2.0 ** np.arange(n // 2)
    ang = u * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


class CausalTransformer:
    """Frame-sequence denoiser predicting ``v = eps - x`` per frame.

    Parameters live in ``self.params`` (name -> leaf Tensor). ``shift`` and
    ``preconditioning`` translate raw timesteps into the conditioning scalar
    and the network input scaling.
    """

    def __init__(self, config: ModelConfig, rng=None, params: dict | None = None,
                 shift: float = 5.0, preconditioning: Preconditioning | None = None):
        self.config = config.validate()
        if params is None:
            if rng is None:
                raise ValueError("need an rng to initialise parameters")
            params = init_params(config, rng)
        self.params = params
        self.shift = shift
        self.pc = preconditioning or Preconditioning()

    # -- helpers ----------------------------------------------------------

    def copy(self) -> "CausalTransformer":
        params = {k: tn.parameter(v.data.copy()) for k, v in self.params.items()}
        return CausalTransformer(self.config, params=params, shift=self.shift, preconditioning=self.pc)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for k, v in state.items():
            if self.params[k].shape != np.shape(v):
                raise ShapeError(f"{k}: {np.shape(v)} vs {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def _relpos_index(self, q_frames, k_frames) -> np.ndarray:
        R = self.config.max_frames
        d = np.clip(q_frames[:, None] - k_frames[None, :], -(R - 1), R - 1)
        return d + R - 1

    def embed(self, frames, t, cond, frame_index) -> Tensor:
        """Token embeddings (B, F*p, D) for frames (B, F, d) at raw timesteps ``t`` (B, F)."""
        cfg, P = self.config, self.params
        frames = tn.as_tensor(frames)
        B, F, d = frames.shape
        if d != cfg.frame_dim:
            raise ShapeError(f"frames have dim {d}, model expects {cfg.frame_dim}")
        p = cfg.tokens_per_frame
        x = frames if self.pc.c_in == 1.0 else tn.mul_const(frames, self.pc.c_in)
        h = tn.linear(tn.reshape(x, (B, F * p, cfg.patch_dim)), P["embed.patch.w"], P["embed.patch.b"])
        h = h + tn.gather(P["embed.slot"], np.tile(np.arange(p), F))
        t = np.asarray(t, dtype=np.float64)
        t = np.broadcast_to(t[:, None] if t.ndim == 1 else t, (B, F))
        tfeat = time_features(self.pc.c_noise(timestep_shift(self.shift, np.repeat(t, p, axis=1))),
                              cfg.time_features)
        h = h + tn.linear(Tensor(tfeat), P["embed.time.w"], P["embed.time.b"])
        cond = np.broadcast_to(np.asarray(cond, dtype=int), (B,))
        if cond.min() < 0 or cond.max() > cfg.condition_vocab:
            raise ValueError(f"condition label outside [0, {cfg.condition_vocab}]")
        h = h + tn.gather(P["embed.cond"], np.repeat(cond[:, None], F * p, axis=1))
        marker = (np.repeat(np.asarray(frame_index), p) == 0).astype(int)
        return h + tn.gather(P["embed.marker"], marker)

    def _blocks(self, h, q_frames, mask=None, cache: KVCache | None = None, min_key_frame=None,
                collect: bool = False, counter: FlopCounter | None = None):
        cfg, P = self.config, self.params
        kv = []
        for l in range(cfg.layers):
            pre = f"layers.{l}."
            a = tn.layer_norm(h, P[pre + "ln1.g"], P[pre + "ln1.b"])
            q = tn.matmul(a, P[pre + "attn.q"])
            k = tn.matmul(a, P[pre + "attn.k"])
            v = tn.matmul(a, P[pre + "attn.v"])
            if collect:
                kv.append((tn.stop_gradient(k).data, tn.stop_gradient(v).data))
            k_frames = q_frames
            if cache is not None:
                ck, cv, cf = cache.layer(l, min_key_frame)
                if ck is not None:
                    k = tn.concat([tn.stop_gradient(ck), k], axis=1)
                    v = tn.concat([tn.stop_gradient(cv), v], axis=1)
                    k_frames = np.concatenate([cf, q_frames])
            bias = tn.gather(P[pre + "attn.relpos"], self._relpos_index(q_frames, k_frames))
            o = tn.masked_attention(q, k, v, mask, cfg.heads, bias)
            if counter is not None:
                counter.add(q.shape[-2], k.shape[-2], cfg.model_dim)
            h = h + tn.matmul(o, P[pre + "attn.o"])
            m = tn.layer_norm(h, P[pre + "ln2.g"], P[pre + "ln2.b"])
            m = tn.silu(tn.linear(m, P[pre + "mlp.w1"], P[pre + "mlp.b1"]))
            h = h + tn.linear(m, P[pre + "mlp.w2"], P[pre + "mlp.b2"])
        return h, kv

    def _head(self, h, B, F) -> Tensor:
        P = self.params
        h = tn.layer_norm(h, P["out.ln.g"], P["out.ln.b"])
        out = tn.linear(h, P["out.w"], P["out.b"])
        return tn.reshape(out, (B, F, self.config.frame_dim))

    def hidden_masked(self, frames, t, cond, spec: AttentionMaskSpec) -> Tensor:
        frames = tn.as_tensor(frames)
        if frames.shape[1] != len(spec.frame_index) or spec.tokens_per_frame != self.config.tokens_per_frame:
            raise ShapeError(f"stream of {frames.shape[1]} frames does not match mask layout "
                             f"of {len(spec.frame_index)} frames")
        h = self.embed(frames, t, cond, spec.frame_index)
        h, _ = self._blocks(h, spec.token_frames, spec.matrix)
        return h

    # -- public forwards ----------------------------------------------------

    def forward_masked(self, frames, t, cond, spec: AttentionMaskSpec,
                       counter: FlopCounter | None = None) -> Tensor:
        """Parallel forward over a full stream under an explicit mask.

        Returns v-hat for every frame slot in the stream, shape (B, F, d).
        """
        frames = tn.as_tensor(frames)
        if frames.shape[1] != len(spec.frame_index) or spec.tokens_per_frame != self.config.tokens_per_frame:
            raise ShapeError(f"stream of {frames.shape[1]} frames does not match mask layout "
                             f"of {len(spec.frame_index)} frames")
        B, F, _ = frames.shape
        h = self.embed(frames, t, cond, spec.frame_index)
        h, _ = self._blocks(h, spec.token_frames, spec.matrix, counter=counter)
        return self._head(h, B, F)

    def _chunk_frames(self, n: int, frame_start: int) -> np.ndarray:
        return np.arange(frame_start, frame_start + n)

    def _check_cache(self, cache: KVCache | None):
        if cache is not None and cache.layers != self.config.layers:
            raise ValueError(f"cache has {cache.layers} layers, model has {self.config.layers}")

    def forward_cached(self, chunk, t, cond, cache: KVCache | None, frame_start: int,
                       min_key_frame: int | None = None, counter: FlopCounter | None = None) -> Tensor:
        """v-hat for one chunk attending to the cached context plus itself.

        The cache is read, never mutated. ``min_key_frame`` hides cached frames
        with a smaller index (local-window training).
        """
        self._check_cache(cache)
        chunk = tn.as_tensor(chunk)
        B, C, _ = chunk.shape
        fi = self._chunk_frames(C, frame_start)
        h = self.embed(chunk, t, cond, fi)
        h, _ = self._blocks(h, np.repeat(fi, self.config.tokens_per_frame), None, cache,
                            min_key_frame, counter=counter)
        return self._head(h, B, C)

    def append_kv(self, chunk, cond, cache: KVCache, frame_start: int,
                  min_key_frame: int | None = None, counter: FlopCounter | None = None) -> KVCache:
        """Run the clean chunk at timestep 0 and append its K/V (detached)."""
        self._check_cache(cache)
        chunk = tn.stop_gradient(chunk)
        B, C, _ = chunk.shape
        fi = self._chunk_frames(C, frame_start)
        with tn.no_grad():
            h = self.embed(chunk, np.zeros((B, C)), cond, fi)
            _, kv = self._blocks(h, np.repeat(fi, self.config.tokens_per_frame), None, cache,
                                 min_key_frame, collect=True, counter=counter)
        cache.append(fi, [k for k, _ in kv], [v for _, v in kv])
        return cache

    def denoise_cached(self, noisy_chunk, t, cond, cache, frame_start, min_key_frame=None,
                       counter=None) -> Tensor:
        """Clean-chunk estimate x0-hat from a cached forward."""
        noisy_chunk = tn.as_tensor(noisy_chunk)
        v = self.forward_cached(noisy_chunk, t, cond, cache, frame_start, min_key_frame, counter)
        return data_prediction(v, NoisySample(noisy_chunk, np.asarray(t, dtype=np.float64), None,
                                              self.shift), self.pc)

    def denoise_masked(self, noisy, t, cond, spec: AttentionMaskSpec,
                       counter: FlopCounter | None = None) -> Tensor:
        """Clean estimate for every frame slot of a masked stream; ``t`` is (B, F)."""
        noisy = tn.as_tensor(noisy)
        v = self.forward_masked(noisy, t, cond, spec, counter)
        return data_prediction(v, NoisySample(noisy, np.asarray(t, dtype=np.float64), None,
                                              self.shift), self.pc)

    def config_dict(self) -> dict:
        return asdict(self.config)
