"""scikit-learn style wrapper around :class:`~selfroll.train.Trainer`.

Example::

    est = SelfRollingGenerator(n_iterations=20, teacher_iterations=20, n_frames=4)
    est.fit(X, y)                  # X: (n, 4, frame_dim), y: integer condition labels
    est.sample(8, condition=0)     # -> (8, 4, frame_dim)
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig
from .inference import generate_rolling
from .train import Trainer, make_rng, sampling_setup
from .transformer import ModelConfig
from .world import WorldConfig, check_sequences, drift_report, median_bandwidth


def check_conditions(y, n_samples: int, vocab: int | None = None) -> np.ndarray:
    """Integer condition labels of length ``n_samples``; ``None`` means all zero."""
    if y is None:
        return np.zeros(n_samples, dtype=np.int64)
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_samples:
        raise ValueError(f"y must be 1-D with {n_samples} entries, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError("condition labels must be integers")
        y = y.astype(np.int64)
    if y.min() < 0 or (vocab is not None and y.max() >= vocab):
        raise ValueError(f"condition labels must lie in [0, {vocab})")
    return y


class SelfRollingGenerator(BaseEstimator):
    """Autoregressive chunk-wise video-style generator for short frame sequences.

    ``fit`` trains a teacher on ``X`` and then the chosen paradigm; ``sample``
    draws new sequences; ``predict`` continues given prefixes; ``score`` is the
    negative mean per-frame MMD^2 against held-out sequences (higher is better).
    """

    def __init__(self, paradigm="sf", objective="dmd", n_iterations=2000, teacher_iterations=1500,
                 batch_size=16, n_frames=16, chunk_size=1, model_dim=32, layers=2, heads=2,
                 local_window=False, cfg_weight=3.0, ema_decay=0.99, window=16, random_state=0):
        self.paradigm = paradigm
        self.objective = objective
        self.n_iterations = n_iterations
        self.teacher_iterations = teacher_iterations
        self.batch_size = batch_size
        self.n_frames = n_frames
        self.chunk_size = chunk_size
        self.model_dim = model_dim
        self.layers = layers
        self.heads = heads
        self.local_window = local_window
        self.cfg_weight = cfg_weight
        self.ema_decay = ema_decay
        self.window = window
        self.random_state = random_state

    def _run_config(self, frame_dim: int, n_conditions: int) -> RunConfig:
        cfg = RunConfig(seed=int(self.random_state))
        cfg.model = ModelConfig(frame_dim=frame_dim, model_dim=self.model_dim, layers=self.layers,
                                heads=self.heads, chunk_size=self.chunk_size,
                                max_frames=max(self.n_frames, self.window, ModelConfig().max_frames),
                                condition_vocab=n_conditions)
        # one placeholder angle per condition keeps the config self-consistent
        cfg.world = WorldConfig(frame_dim=frame_dim, angles_deg=tuple(float(a) for a in range(n_conditions)))
        t = cfg.train
        t.paradigm, t.objective = self.paradigm, self.objective
        t.iterations, t.teacher_iterations = self.n_iterations, self.teacher_iterations
        t.batch, t.n_frames, t.local_window = self.batch_size, self.n_frames, self.local_window
        t.checkpoint_every = 0
        cfg.dm.cfg_weight = self.cfg_weight
        cfg.optim.ema_decay = self.ema_decay
        cfg.inference.window = self.window
        return cfg.validate()

    def fit(self, X, y=None):
        X = check_sequences(X)
        if X.shape[1] != self.n_frames:
            raise ValueError(f"X has {X.shape[1]} frames per sequence, n_frames={self.n_frames}")
        y = check_conditions(y, len(X))
        n_cond = int(y.max()) + 1
        self.config_ = self._run_config(X.shape[2], n_cond)
        trainer = Trainer(self.config_, data=(X, y))
        for _ in range(trainer.total_iterations):
            trainer.step()
        self.trainer_ = trainer
        self.generator_ = trainer.ema_generator()
        self.n_conditions_ = n_cond
        self.frame_dim_ = X.shape[2]
        self.rng_ = make_rng(int(self.random_state) + 1)
        return self

    def _generate(self, n, M, condition, context=None):
        schedule, sampler = sampling_setup(self.config_)
        L = min(self.window, M)
        L -= L % self.chunk_size
        check_conditions(np.atleast_1d(condition), np.size(condition), self.n_conditions_)
        frames, _ = generate_rolling(self.generator_, schedule, M, L, self.rng_, condition, n,
                                     warmup=False, sampler=sampler, context=context)
        return frames

    def sample(self, n_samples: int, condition=0, n_frames: int | None = None) -> np.ndarray:
        """Draw ``n_samples`` sequences of shape (n_frames, frame_dim)."""
        check_is_fitted(self, "generator_")
        if n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        return self._generate(n_samples, n_frames or self.n_frames, condition)

    def predict(self, X, y=None, n_frames: int | None = None) -> np.ndarray:
        """Continue each prefix in ``X`` (n, k, d) to ``n_frames`` frames."""
        check_is_fitted(self, "generator_")
        X = check_sequences(X)
        if X.shape[2] != self.frame_dim_:
            raise ValueError(f"X has frame_dim {X.shape[2]}, fitted with {self.frame_dim_}")
        y = check_conditions(y, len(X), self.n_conditions_)
        return self._generate(len(X), n_frames or self.n_frames, y, context=X)

    def score(self, X, y=None) -> float:
        check_is_fitted(self, "generator_")
        X = check_sequences(X)
        y = check_conditions(y, len(X), self.n_conditions_)
        samples = self._generate(len(X), X.shape[1], y)
        h = median_bandwidth(X.reshape(-1, X.shape[2]))
        return -float(np.mean(drift_report(samples, X, h, min_samples=1).distances))
