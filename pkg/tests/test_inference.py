import csv

import numpy as np
import pytest

from conftest import philox
from selfroll.inference import CacheStrategy, chunk_flops, euler_schedule, extrapolation_quality, generate, \
    generate_no_cache, generate_recompute_window, generate_rolling, reencode_flops, window_flops
from selfroll.rollout import inference_rollout
from selfroll.schedule import NoiseSchedule
from selfroll.transformer import CausalTransformer, ModelConfig
from selfroll.world import WorldConfig

SCHED = NoiseSchedule()


@pytest.fixture(params=[1, 2])
def model(request):
    cfg = ModelConfig(model_dim=16, layers=2, heads=2, chunk_size=request.param, max_frames=16, condition_vocab=2)
    return CausalTransformer(cfg, philox(10))


def test_strategies_agree_when_everything_fits(model):
    M = L = 8
    ref = inference_rollout(model, SCHED, M, 1, philox(0), batch=2)
    a, _ = generate_rolling(model, SCHED, M, L, philox(0), 1, 2, warmup=False)
    b, _ = generate_recompute_window(model, SCHED, M, L, model.config.chunk_size, philox(0), 1, 2, warmup=False)
    c, _ = generate_no_cache(model, SCHED, M, L, philox(0), 1, 2, warmup=False)
    for x in (a, b, c):
        assert np.abs(x - ref).max() < 1e-9


def test_warmup_does_not_touch_the_stream(model):
    a, _ = generate_rolling(model, SCHED, 4, 4, philox(1), warmup=True)
    b, _ = generate_rolling(model, SCHED, 4, 4, philox(1), warmup=False)
    np.testing.assert_array_equal(a, b)


def test_rolling_flops_match_closed_form(model):
    c = model.config.chunk_size
    L, M = 4, 16
    _, tr = generate_rolling(model, SCHED, M, L, philox(2), warmup=False)
    per_chunk = np.asarray(tr.attn_flops).reshape(-1, c).sum(axis=1)
    for i, f in enumerate(per_chunk):
        ctx = min(i * c, L)
        assert f == chunk_flops(model, SCHED.T, ctx)
    # constant once the cache is full
    assert len(set(per_chunk[L // c:])) == 1


def test_no_cache_flops_match_closed_form(model):
    c = model.config.chunk_size
    L, M = 4, 12
    _, tr = generate_no_cache(model, SCHED, M, L, philox(3), warmup=False)
    per_chunk = np.asarray(tr.attn_flops).reshape(-1, c).sum(axis=1)
    for i, f in enumerate(per_chunk):
        assert f == window_flops(model, SCHED.T, min(i * c, L))


def test_recompute_window_pays_reencode_on_shift(model):
    c = model.config.chunk_size
    L, stride, M = 4, 2, 12
    _, tr = generate_recompute_window(model, SCHED, M, L, stride, philox(4), warmup=False)
    per_chunk = np.asarray(tr.attn_flops).reshape(-1, c).sum(axis=1)
    held = 0
    for i, f in enumerate(per_chunk):
        extra = 0
        if held == L:
            held -= stride
            extra = reencode_flops(model, held)
        assert f == chunk_flops(model, SCHED.T, held) + extra
        held += c


def test_trace_bookkeeping(tmp_path, model):
    _, tr = generate(model, SCHED, 4, CacheStrategy("rolling", 4), philox(5))
    assert tr.n_frames == 4 and tr.first_frame_latency_ms > 0
    np.testing.assert_allclose(tr.cumulative_ms, np.cumsum(tr.wall_ms))
    tr.to_csv(tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["frame_index", "wall_ms", "attn_flops", "cumulative_ms"] and len(rows) == 5


def test_context_prefix_is_kept(model):
    c = model.config.chunk_size
    ctx = philox(6).standard_normal((2, 2 * c, 2))
    out, _ = generate_rolling(model, SCHED, 4 * c, 4 * c, philox(7), 0, 2, warmup=False, context=ctx)
    np.testing.assert_array_equal(out[:, :2 * c], ctx)
    with pytest.raises(ValueError):
        generate_rolling(model, SCHED, 4 * c, 4 * c, philox(7), 0, 3, warmup=False, context=ctx)


def test_euler_schedule_and_sampler(model):
    s = euler_schedule(4)
    assert s.steps == (1000.0, 750.0, 500.0, 250.0)
    x, _ = generate_rolling(model, euler_schedule(8), 4, 4, philox(8), sampler="euler", warmup=False)
    assert np.isfinite(x).all()
    with pytest.raises(ValueError):
        generate_rolling(model, s, 4, 4, philox(8), sampler="heun")


def test_strategy_validation():
    with pytest.raises(ValueError):
        CacheStrategy("ring")
    with pytest.raises(ValueError):
        CacheStrategy("recompute-window", 4, None)
    with pytest.raises(ValueError):
        CacheStrategy("rolling", 0)


def test_extrapolation_quality_shapes():
    cfg = ModelConfig(model_dim=8, layers=1, heads=1, max_frames=8)
    a, b = CausalTransformer(cfg, philox(1)), CausalTransformer(cfg, philox(2))
    res = extrapolation_quality(a, b, SCHED, WorldConfig(), M=6, horizon=4, L=3, rng=philox(3),
                                n_samples=100, n_perm=20)
    assert len(res.with_window.distances) == 2 and res.with_window.frame_index.tolist() == [5, 6]
    assert 0 < res.within_p <= 1
    with pytest.raises(ValueError):
        extrapolation_quality(a, CausalTransformer(ModelConfig(model_dim=16), philox(0)), SCHED, WorldConfig(),
                              6, 4, 3, philox(0))
