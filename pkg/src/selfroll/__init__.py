"""Chunk-wise autoregressive diffusion over frame sequences, trained by self-rollout.

Everything runs on numpy in float64 with a small define-by-run autodiff.
"""

from .config import RunConfig
from .estimator import SelfRollingGenerator
from .inference import CacheStrategy, GenerationTrace, generate
from .schedule import NoiseSchedule, timestep_shift
from .train import Trainer, run_training
from .transformer import CausalTransformer, ModelConfig
from .world import DriftReport, WorldConfig, drift_report, sample_ground_truth

__version__ = "0.1.0"

__all__ = [
    "CacheStrategy", "CausalTransformer", "DriftReport", "GenerationTrace", "ModelConfig",
    "NoiseSchedule", "RunConfig", "SelfRollingGenerator", "Trainer", "WorldConfig",
    "drift_report", "generate", "run_training", "sample_ground_truth", "timestep_shift",
]
