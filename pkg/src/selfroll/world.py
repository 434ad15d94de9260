"""Ground-truth damped-rotation sequences and per-frame drift metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.utils.validation import check_array


@dataclass
class WorldConfig:
    """x[i+1] = rho * R(angle_c) x[i] + sigma_w * xi, with x[0] ~ N(0, I).

    ``rho = 0.8, sigma_w = 0.6`` makes N(0, I) the stationary marginal, so
    every frame index shares the same ground-truth marginal.
    """

    frame_dim: int = 2
    rho: float = 0.8
    sigma_w: float = 0.6
    angles_deg: tuple = (30.0,)

    def __post_init__(self):
        self.angles_deg = tuple(float(a) for a in self.angles_deg)
        if not 0 < self.rho <= 1:
            raise ValueError(f"rho must lie in (0, 1], got {self.rho}")
        if self.sigma_w < 0:
            raise ValueError("sigma_w must be non-negative")
        if self.frame_dim < 1 or not self.angles_deg:
            raise ValueError("need frame_dim >= 1 and at least one condition angle")

    @property
    def n_conditions(self) -> int:
        return len(self.angles_deg)

    def transition(self, condition: int) -> np.ndarray:
        """rho * R(angle): rotations on consecutive coordinate pairs."""
        th = np.deg2rad(self.angles_deg[condition])
        A = np.eye(self.frame_dim)
        rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        for k in range(0, self.frame_dim - 1, 2):
            A[k:k + 2, k:k + 2] = rot
        return self.rho * A


def sample_ground_truth(config: WorldConfig, n_frames: int, condition, rng, n: int = 1,
                        x1=None) -> np.ndarray:
    """Exact draws, shape (n, n_frames, frame_dim). ``condition`` is an int or (n,) labels."""
    if n_frames < 1:
        raise ValueError("need n_frames >= 1")
    cond = np.broadcast_to(np.asarray(condition, dtype=int), (n,))
    if cond.min() < 0 or cond.max() >= config.n_conditions:
        raise ValueError(f"condition outside [0, {config.n_conditions})")
    d = config.frame_dim
    out = np.empty((n, n_frames, d))
    out[:, 0] = rng.standard_normal((n, d)) if x1 is None else np.broadcast_to(x1, (n, d))
    mats = np.stack([config.transition(c) for c in range(config.n_conditions)])[cond]
    for i in range(1, n_frames):
        noise = rng.standard_normal((n, d))
        out[:, i] = np.einsum("nij,nj->ni", mats, out[:, i - 1]) + config.sigma_w * noise
    return out


def marginal_moments(config: WorldConfig, n_frames: int, condition: int = 0):
    """Analytic per-frame mean and covariance given x[0] ~ N(0, I)."""
    A = config.transition(condition)
    d = config.frame_dim
    cov = np.eye(d)
    means, covs = [], []
    for _ in range(n_frames):
        means.append(np.zeros(d))
        covs.append(cov)
        cov = A @ cov @ A.T + config.sigma_w ** 2 * np.eye(d)
    return np.array(means), np.array(covs)


def check_sequences(X, frame_dim: int | None = None) -> np.ndarray:
    """Validate an (n, frames, dim) float array of sequences."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64)
    if X.ndim != 3:
        raise ValueError(f"expected (n_sequences, n_frames, frame_dim), got shape {X.shape}")
    if frame_dim is not None and X.shape[2] != frame_dim:
        raise ValueError(f"frames have dim {X.shape[2]}, expected {frame_dim}")
    return X


# --------------------------------------------------------------------------
# two-sample distances


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def mmd_squared(A, B, bandwidth: float) -> float:
    """Biased (V-statistic) MMD^2 with k(x, y) = exp(-|x - y|^2 / (2 h^2))."""
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    A = check_array(A, dtype=np.float64)
    B = check_array(B, dtype=np.float64)
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"sample dims differ: {A.shape[1]} vs {B.shape[1]}")
    g = -0.5 / bandwidth ** 2
    kaa = np.exp(g * _sqdist(A, A)).mean()
    kbb = np.exp(g * _sqdist(B, B)).mean()
    kab = np.exp(g * _sqdist(A, B)).mean()
    return float(max(kaa + kbb - 2.0 * kab, 0.0))


def median_bandwidth(X, max_points: int = 2000) -> float:
    """Median pairwise distance (median heuristic) over at most ``max_points`` rows."""
    X = check_array(X, dtype=np.float64)[:max_points]
    d = np.sqrt(_sqdist(X, X))
    iu = np.triu_indices(len(X), 1)
    return float(np.median(d[iu]))


def mmd_permutation_test(A, B, bandwidth: float, rng, n_perm: int = 200) -> tuple[float, float]:
    """(MMD^2, permutation p-value) for H0: A and B share a distribution."""
    A = check_array(A, dtype=np.float64)
    B = check_array(B, dtype=np.float64)
    stat = mmd_squared(A, B, bandwidth)
    pooled = np.concatenate([A, B])
    K = np.exp(-0.5 * _sqdist(pooled, pooled) / bandwidth ** 2)
    n = len(A)
    hits = 0
    for _ in range(n_perm):
        perm = rng.permutation(len(pooled))
        a, b = perm[:n], perm[n:]
        val = K[np.ix_(a, a)].mean() + K[np.ix_(b, b)].mean() - 2 * K[np.ix_(a, b)].mean()
        hits += val >= stat
    return stat, (hits + 1) / (n_perm + 1)


def mean_marginal_mmd_test(A, B, bandwidth: float, rng, n_perm: int = 200) -> tuple[float, float]:
    """Two-sample test on sequence sets (n, F, d) using the mean per-frame MMD^2.

    Permutations swap whole sequences, so the null keeps each sequence intact.
    """
    A = check_sequences(A)
    B = check_sequences(B)
    pooled = np.concatenate([A, B])
    F = A.shape[1]
    g = -0.5 / bandwidth ** 2
    kernels = [np.exp(g * _sqdist(pooled[:, i], pooled[:, i])) for i in range(F)]
    K = sum(kernels) / F
    n = len(A)
    idx = np.arange(len(pooled))

    def stat(a, b):
        return K[np.ix_(a, a)].mean() + K[np.ix_(b, b)].mean() - 2 * K[np.ix_(a, b)].mean()

    observed = stat(idx[:n], idx[n:])
    hits = 0
    for _ in range(n_perm):
        perm = rng.permutation(len(pooled))
        hits += stat(perm[:n], perm[n:]) >= observed
    return float(observed), (hits + 1) / (n_perm + 1)


# --------------------------------------------------------------------------
# drift reports


@dataclass
class DriftReport:
    distances: np.ndarray
    slope: float
    intercept: float
    n_samples: np.ndarray
    frame_offset: int = 0
    bandwidth: float = 1.0
    meta: dict = field(default_factory=dict)

    @property
    def frame_index(self) -> np.ndarray:
        return np.arange(len(self.distances)) + self.frame_offset + 1

    def to_csv(self, path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame_index", "mmd2", "n_samples"])
            for i, d, n in zip(self.frame_index, self.distances, self.n_samples):
                w.writerow([int(i), repr(float(d)), int(n)])
        tmp.replace(path)

    def summary(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "bandwidth": self.bandwidth,
                "n_frames": len(self.distances), "mean_mmd2": float(np.mean(self.distances))
                if len(self.distances) else None, **self.meta}

    def to_json(self, path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        tmp.replace(path)


def fit_slope(values, offset: int = 0) -> tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2:
        return 0.0, float(values[0]) if len(values) else 0.0
    x = np.arange(len(values)) + offset + 1
    slope, intercept = np.polyfit(x, values, 1)
    return float(slope), float(intercept)


def drift_report(model_samples, reference_samples, bandwidth: float | None = None,
                 min_samples: int = 100, frame_offset: int = 0) -> DriftReport:
    """Per-frame-index MMD^2 between two sequence sets plus a least-squares slope.

    Both inputs are (n, F, d) arrays; the frame axis is compared index by
    index. The bandwidth defaults to the median heuristic on the reference.
    """
    M = check_sequences(model_samples)
    R = check_sequences(reference_samples)
    if M.shape[1:] != R.shape[1:]:
        raise ValueError(f"frame layouts differ: {M.shape[1:]} vs {R.shape[1:]}")
    if min(len(M), len(R)) < min_samples:
        raise ValueError(f"need >= {min_samples} samples per frame index, got {min(len(M), len(R))}")
    if bandwidth is None:
        bandwidth = median_bandwidth(R.reshape(-1, R.shape[2]))
    d = np.array([mmd_squared(M[:, i], R[:, i], bandwidth) for i in range(M.shape[1])])
    slope, intercept = fit_slope(d, frame_offset)
    n = np.full(len(d), min(len(M), len(R)))
    return DriftReport(d, slope, intercept, n, frame_offset, bandwidth)


def slope_null_band(reference_a, reference_b, bandwidth: float, rng, n_boot: int = 200,
                    level: float = 0.99) -> float:
    """Quantile of |slope| when sequence labels between two sets are shuffled."""
    A = check_sequences(reference_a)
    B = check_sequences(reference_b)
    pooled = np.concatenate([A, B])
    n = len(A)
    slopes = []
    for _ in range(n_boot):
        perm = rng.permutation(len(pooled))
        a, b = pooled[perm[:n]], pooled[perm[n:]]
        d = [mmd_squared(a[:, i], b[:, i], bandwidth) for i in range(A.shape[1])]
        slopes.append(abs(fit_slope(d)[0]))
    return float(np.quantile(slopes, level))
