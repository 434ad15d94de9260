"""Run configuration: nested dataclasses, flat dotted ``key=value`` text on disk.

Example file::

    # frame-wise self forcing
    train.paradigm = sf
    train.objective = dmd
    model.layers = 2
    world.angles_deg = 30, 60

Unknown keys and malformed values are errors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .transformer import ModelConfig
from .world import WorldConfig

PARADIGM_OBJECTIVES = {"tf": ("denoise",), "df": ("denoise",), "sf": ("dmd", "sid", "gan")}


@dataclass
class ScheduleSection:
    steps: tuple = (1000.0, 750.0, 500.0, 250.0)
    shift: float = 5.0
    sampler: str = "auto"
    sample_steps: int = 32


@dataclass
class TrainSection:
    paradigm: str = "sf"
    objective: str = "dmd"
    iterations: int = 2000
    batch: int = 16
    n_frames: int = 16
    local_window: bool = False
    cond_dropout: float = 0.1
    checkpoint_every: int = 500
    teacher_iterations: int = 1500


@dataclass
class OptimSection:
    beta1: float = 0.0
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    lr_generator: float = 1e-4
    lr_critic: float = 1e-4
    lr_teacher: float = 1e-3
    ema_decay: float = 0.99
    grad_clip: float = 1.0


@dataclass
class DMSection:
    cfg_weight: float = 3.0
    update_ratio: int = 5
    t_min: float = 20.0
    t_max: float = 980.0
    per_frame_t: bool = False
    restrict_t: bool = False
    sid_alpha: float = 1.0
    gan_lambda: float = 30.0
    gan_sigma: float = 0.05


@dataclass
class InferenceSection:
    strategy: str = "rolling"
    window: int = 16
    stride: int = 8


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    train: TrainSection = field(default_factory=TrainSection)
    optim: OptimSection = field(default_factory=OptimSection)
    dm: DMSection = field(default_factory=DMSection)
    world: WorldConfig = field(default_factory=WorldConfig)
    inference: InferenceSection = field(default_factory=InferenceSection)

    def validate(self) -> "RunConfig":
        t = self.train
        if t.paradigm not in PARADIGM_OBJECTIVES:
            raise ValueError(f"train.paradigm must be one of {sorted(PARADIGM_OBJECTIVES)}, got {t.paradigm!r}")
        allowed = PARADIGM_OBJECTIVES[t.paradigm]
        if t.objective not in allowed:
            why = ("self forcing trains through a distribution-matching objective"
                   if t.paradigm == "sf" else "teacher/diffusion forcing use the denoising loss")
            raise ValueError(f"train.objective={t.objective!r} is invalid with paradigm {t.paradigm!r}: "
                             f"{why}; choose from {allowed}")
        if t.iterations < 0 or t.teacher_iterations < 0 or t.batch < 1 or t.checkpoint_every < 0:
            raise ValueError("iteration counts must be >= 0 and batch >= 1")
        if t.n_frames > self.model.max_frames or t.n_frames % self.model.chunk_size:
            raise ValueError(f"train.n_frames={t.n_frames} must be a multiple of chunk_size "
                             f"and <= model.max_frames={self.model.max_frames}")
        if self.model.condition_vocab != self.world.n_conditions:
            raise ValueError(f"model.condition_vocab={self.model.condition_vocab} must equal the "
                             f"number of world.angles_deg ({self.world.n_conditions})")
        if self.model.frame_dim != self.world.frame_dim:
            raise ValueError("model.frame_dim and world.frame_dim differ")
        if self.schedule.sampler not in ("auto", "fewstep", "euler"):
            raise ValueError(f"schedule.sampler must be auto, fewstep or euler, got {self.schedule.sampler!r}")
        if self.schedule.sample_steps < 1:
            raise ValueError("schedule.sample_steps must be >= 1")
        if not 0.0 <= t.cond_dropout < 1.0:
            raise ValueError("train.cond_dropout must lie in [0, 1)")
        self.model.validate()
        return self

    # -- text form ----------------------------------------------------------

    def to_flat(self) -> dict[str, str]:
        return {k: _format(v) for k, v in _walk(self)}

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_flat().items())

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(self.dumps())
        tmp.replace(path)

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        pairs = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {n}: expected key = value, got {raw!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            if k in pairs:
                raise ValueError(f"line {n}: duplicate key {k!r}")
            pairs[k] = v
        return cls.from_flat(pairs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.loads(Path(path).read_text())

    @classmethod
    def from_flat(cls, pairs: dict[str, str]) -> "RunConfig":
        cfg = cls()
        known = dict(_walk(cfg))
        for k, v in pairs.items():
            if k not in known:
                raise KeyError(f"unknown config key {k!r}")
            _assign(cfg, k, _parse(v, known[k], k))
        # re-run dataclass checks on sections with __post_init__
        cfg.world = WorldConfig(**dataclasses.asdict(cfg.world))
        return cfg.validate()


def _walk(obj, prefix: str = ""):
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(v):
            yield from _walk(v, key + ".")
        else:
            yield key, v


def _assign(cfg, key: str, value) -> None:
    *path, last = key.split(".")
    obj = cfg
    for p in path:
        obj = getattr(obj, p)
    setattr(obj, last, value)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(text: str, default, key: str):
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError(text)
            return low == "true"
        if default is None:
            return None if text.lower() == "none" else int(text)
        if isinstance(default, tuple):
            return tuple(float(x) for x in text.split(",") if x.strip())
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {text!r} as {type(default).__name__}") from None
