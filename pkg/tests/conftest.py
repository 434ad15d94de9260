import numpy as np
import pytest

from selfroll.config import RunConfig
from selfroll.transformer import CausalTransformer, ModelConfig


def philox(seed):
    return np.random.Generator(np.random.Philox(seed))


@pytest.fixture
def rng():
    return philox(0)


@pytest.fixture
def small_config():
    return ModelConfig(frame_dim=2, tokens_per_frame=2, model_dim=16, layers=2, heads=2,
                       chunk_size=1, max_frames=16, condition_vocab=2)


@pytest.fixture
def small_model(small_config):
    return CausalTransformer(small_config, philox(1))


@pytest.fixture
def tiny_run():
    cfg = RunConfig(seed=3)
    cfg.train.iterations = 6
    cfg.train.teacher_iterations = 4
    cfg.train.batch = 2
    cfg.train.n_frames = 4
    cfg.train.checkpoint_every = 3
    cfg.inference.window = 4
    cfg.model.model_dim = 16
    return cfg.validate()


ACCEPTANCE_LINES = {}


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
