import numpy as np
import pytest

from conftest import philox
from selfroll import tensor as tn
from selfroll.rollout import diffusion_forcing_loss, teacher_forcing_loss
from selfroll.schedule import forward_perturb, frame_denoising_loss
from selfroll.transformer import CausalTransformer, FlopCounter, KVCache, ModelConfig, build_mask


def test_tf_mask_by_hand():
    # stream: clean0 noisy0 clean1 noisy1; a noisy frame never sees its own clean copy
    m = build_mask("tf", 2, tokens_per_frame=1).frame_mask
    expected = np.array([[1, 0, 0, 0],
                         [0, 1, 0, 0],
                         [1, 0, 1, 0],
                         [1, 0, 0, 1]], bool)
    np.testing.assert_array_equal(m, expected)


def test_df_mask_is_block_causal():
    m = build_mask("df", 4, tokens_per_frame=1, chunk_size=2).frame_mask
    expected = np.array([[1, 1, 0, 0], [1, 1, 0, 0], [1, 1, 1, 1], [1, 1, 1, 1]], bool)
    np.testing.assert_array_equal(m, expected)
    assert build_mask("df", 4, tokens_per_frame=3).matrix.shape == (12, 12)


def test_local_window_hides_first_chunk_from_last():
    m = build_mask("df", 4, tokens_per_frame=1, local_window=3).frame_mask
    assert not m[3, 0] and m[3, 1:].all() and m[2, 0]
    with pytest.raises(ValueError):
        build_mask("df", 4, local_window=5)
    with pytest.raises(ValueError):
        build_mask("nope", 4)


def test_cached_forward_matches_full_recompute(small_model):
    r = philox(5)
    worst = 0.0
    for _ in range(100):
        prefix = r.standard_normal((1, 8, 2))
        noisy = r.standard_normal((1, 1, 2))
        t = float(r.uniform(1, 1000))
        cond = int(r.integers(0, 2))
        cache = KVCache(2, 9)
        for i in range(8):
            small_model.append_kv(prefix[:, i:i + 1], cond, cache, i)
        cached = small_model.forward_cached(noisy, t, cond, cache, 8).data
        spec = build_mask("df", 9, 2)
        ts = np.zeros((1, 9))
        ts[0, 8] = t
        full = small_model.forward_masked(np.concatenate([prefix, noisy], 1), ts, cond, spec).data
        worst = max(worst, np.abs(cached[:, 0] - full[:, 8]).max())
    assert worst < 1e-9


def test_tf_parallel_equals_sequential(small_model):
    r = philox(6)
    B, N = 3, 6
    data = r.standard_normal((B, N, 2))
    eps = r.standard_normal(data.shape)
    t = r.uniform(1, 1000, size=B)
    cond = np.array([0, 1, 0])
    parallel = teacher_forcing_loss(small_model, data, cond, t, eps).item()
    noisy = forward_perturb(data, eps, t)
    seq = 0.0
    cache = KVCache(2, N)
    for i in range(N):
        v = small_model.forward_cached(noisy.frame.data[:, i:i + 1], t, cond, cache, i)
        step = forward_perturb(data[:, i:i + 1], eps[:, i:i + 1], t)
        seq += frame_denoising_loss(v, step, data[:, i:i + 1]).item()
        small_model.append_kv(data[:, i:i + 1], cond, cache, i)
    # the parallel loss averages over frames; sequential losses are per frame
    assert abs(parallel * N - seq) < 1e-9


def test_df_causality_bitwise(small_model):
    r = philox(7)
    N = 6
    spec = build_mask("df", N, 2)
    for _ in range(50):
        x = r.standard_normal((2, N, 2))
        t = r.uniform(0, 1000, size=(2, N))
        i = int(r.integers(0, N - 1))
        y = x.copy()
        y[:, i + 1:] += r.standard_normal(y[:, i + 1:].shape)
        t2 = t.copy()
        t2[:, i + 1:] = r.uniform(0, 1000, size=t2[:, i + 1:].shape)
        a = small_model.forward_masked(x, t, 0, spec).data
        b = small_model.forward_masked(y, t2, 0, spec).data
        assert np.array_equal(a[:, :i + 1], b[:, :i + 1])
        assert not np.array_equal(a[:, i + 1:], b[:, i + 1:])


def test_df_loss_gradients(small_model):
    r = philox(8)
    data = r.standard_normal((2, 3, 2))
    eps = r.standard_normal(data.shape)
    t = r.uniform(0, 1000, size=(2, 3))
    params = {k: small_model.params[k] for k in list(small_model.params)[:4]}
    err = tn.grad_check(lambda: diffusion_forcing_loss(small_model, data, 1, t, eps), params)
    assert err < 1e-5


def test_cache_fifo_eviction():
    c = KVCache(1, 3)
    k = [np.zeros((1, 2, 4))]
    for i in range(5):
        c.append([i], k, k)
    assert c.frames == [2, 3, 4]
    c.pop_front(1)
    assert c.frames == [3, 4]
    with pytest.raises(ValueError):
        c.append([1], k, k)
    with pytest.raises(ValueError):
        KVCache(1, 0)


def test_flop_counter_by_hand():
    fc = FlopCounter()
    fc.add(2, 3, 8, layers=2)
    assert fc.total == 4 * 2 * 3 * 8 * 2


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(model_dim=30, heads=4).validate()
    with pytest.raises(ValueError):
        CausalTransformer(ModelConfig())


def test_cache_layer_mismatch(small_model):
    with pytest.raises(ValueError):
        small_model.append_kv(np.zeros((1, 1, 2)), 0, KVCache(3, 4), 0)
