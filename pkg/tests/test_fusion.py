import numpy as np
import pytest

from rf_transfer.appearance import build_condition
from rf_transfer.dit import AttentionTensors, ModelConfig, ModelWeights, VelocityModel
from rf_transfer.errors import CacheMissError, ConfigError, DimensionError, ParseError, RangeError
from rf_transfer.fusion import (CaptureHook, FusionConfig, KVCache, capture_reference_kv, expand_attention,
                                make_fusion_hooks)
from rf_transfer.numerics import RngState
from rf_transfer.solvers import SolverSpec, invert, replay_then_denoise

CFG = ModelConfig(d_model=32, n_heads=2, latent_hw=8)
N = 4


@pytest.fixture(scope="module")
def setup():
    w = ModelWeights.init(CFG, 0)
    vm = VelocityModel(w, build_condition(None, np.zeros((8, 8)), np.zeros((8, 8)), d_model=32))
    ref = RngState(1).uniform(CFG.latent_shape)
    src = RngState(2).uniform(CFG.latent_shape)
    spec = SolverSpec("midpoint_reuse", N)
    gate = np.zeros(CFG.n_tokens, bool)
    gate[5:11] = True
    traj_ref = invert(ref, vm, spec)
    cache = capture_reference_kv(traj_ref, vm, [0, 2, 5, 7], gate)
    return w, vm, traj_ref, invert(src, vm, spec), cache, gate


def _cfg(layers, qgate, kvgate, **kw):
    return FusionConfig(layers, N, qgate, kvgate, **kw)


def test_capture_entry_count_and_shapes(setup):
    _, _, _, _, cache, gate = setup
    assert len(cache.entries) == 4 * (N + 1)
    k, v = cache.get(5, 2)
    assert k.shape == (CFG.n_heads, gate.sum(), CFG.head_dim) and v.shape == k.shape
    assert cache.stats()["ref_tokens"] == 6 and cache.layers == [0, 2, 5, 7]


def test_captured_k_matches_independent_recompute(setup):
    _, vm, traj_ref, _, cache, gate = setup
    sink = {}
    vm(traj_ref.latents[3], float(traj_ref.grid[3]), hooks=[CaptureHook(2, np.ones(CFG.n_tokens, bool), sink, 3)])
    k_full, v_full = sink[(2, 3)]
    assert np.array_equal(cache.get(2, 3)[0], k_full[:, gate])
    assert np.array_equal(cache.get(2, 3)[1], v_full[:, gate])


def test_cache_is_frozen_and_misses_raise(setup):
    cache = setup[4]
    with pytest.raises(ValueError):
        cache.get(0, 0)[0][0, 0, 0] = 1.0
    with pytest.raises(CacheMissError, match="layer 1"):
        cache.get(1, 0)


def test_capture_rejects_unknown_layer(setup):
    _, vm, traj_ref, _, _, gate = setup
    with pytest.raises(ConfigError):
        capture_reference_kv(traj_ref, vm, [99], gate)


def test_kv_roundtrip(tmp_path, setup):
    cache = setup[4]
    cache.save(tmp_path / "c.kvc")
    back = KVCache.load(tmp_path / "c.kvc")
    assert back.n_steps == N and np.array_equal(back.token_mask, cache.token_mask)
    for key, (k, v) in cache.entries.items():
        assert np.array_equal(back.entries[key][0], k) and np.array_equal(back.entries[key][1], v)
    raw = (tmp_path / "c.kvc").read_bytes()
    (tmp_path / "bad.kvc").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ParseError):
        KVCache.load(tmp_path / "bad.kvc")


def _site(seed, n_q=4, n_cond=0):
    r = RngState(seed)
    return AttentionTensors(0, *(r.fork(i).normal((2, n_q, 3)) for i in range(3)), n_cond=n_cond,
                            content_head=False)


def test_expand_two_equal_logits_average_values():
    q = np.zeros((1, 1, 2))
    site = AttentionTensors(0, q, np.ones((1, 1, 2)), np.array([[[1.0, 3.0]]]), content_head=False)
    out = expand_attention(site, (np.ones((1, 1, 2)), np.array([[[5.0, -1.0]]])), np.array([True]))
    np.testing.assert_allclose(out[0, 0], [3.0, 1.0], rtol=0, atol=1e-15)


def test_expand_degenerate_cases_bitwise():
    site = _site(1)
    base = site.attend()
    empty = (np.zeros((2, 0, 3)), np.zeros((2, 0, 3)))
    full = (RngState(9).normal((2, 5, 3)), RngState(10).normal((2, 5, 3)))
    assert np.array_equal(expand_attention(site, empty, np.ones(4, bool)), base)
    assert np.array_equal(expand_attention(site, full, np.zeros(4, bool)), base)
    gate = np.array([True, False, True, False])
    out = expand_attention(site, full, gate)
    assert np.array_equal(out[:, ~gate], base[:, ~gate])
    assert not np.array_equal(out[:, gate], base[:, gate])
    assert out.shape == base.shape


def test_expand_rejects_mismatched_cache():
    site = _site(2)
    with pytest.raises(DimensionError):
        expand_attention(site, (np.ones((2, 3, 4)), np.ones((2, 3, 4))), np.ones(4, bool))
    with pytest.raises(DimensionError):
        expand_attention(site, (np.ones((2, 3, 3)), np.ones((2, 3, 3))), np.ones(3, bool))


def test_expanded_rows_normalised_and_in_hull():
    site = _site(3, n_q=6)
    k_ref, v_ref = RngState(4).normal((2, 7, 3)) * 2, RngState(5).normal((2, 7, 3))
    gate = np.ones(6, bool)
    out = expand_attention(site, (k_ref, v_ref), gate)
    for h in range(2):
        keys = np.concatenate([site.k[h], k_ref[h]])
        s = site.q[h] @ keys.T / np.sqrt(3)
        p = np.exp(s - s.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        assert np.max(np.abs(p.sum(1) - 1)) <= 1e-12
        vals = np.concatenate([site.v[h], v_ref[h]])
        np.testing.assert_allclose(out[h], p @ vals, rtol=1e-12, atol=1e-14)
        assert np.all(out[h] <= vals.max(0) + 1e-12) and np.all(out[h] >= vals.min(0) - 1e-12)


def test_conditioning_queries_never_expanded():
    site = _site(6, n_q=5, n_cond=2)
    full = (RngState(7).normal((2, 3, 3)), RngState(8).normal((2, 3, 3)))
    out = expand_attention(site, full, np.ones(3, bool))
    assert np.array_equal(out[:, :2], site.attend()[:, :2])


def test_make_hooks_contract(setup):
    cache, gate = setup[4], setup[5]
    cfg = _cfg([0, 5], gate, gate)
    hooks = make_fusion_hooks(cache, cfg, 2)
    assert [h.layer_id for h in hooks] == [0, 5]
    assert hooks[1].entry is cache.entries[(5, 2)]
    assert make_fusion_hooks(cache, _cfg([0], gate, gate, enabled=False), 2) == []
    with pytest.raises(CacheMissError):
        make_fusion_hooks(cache, _cfg([1], gate, gate), 2)
    with pytest.raises(RangeError):
        make_fusion_hooks(cache, cfg, N + 1)


def test_fusion_config_validation():
    g = np.ones(CFG.n_tokens, bool)
    with pytest.raises(ConfigError):
        _cfg([8], g, g).validate(CFG, N)
    with pytest.raises(RangeError):
        FusionConfig([0], N + 1, g, g).validate(CFG, N)
    with pytest.raises(DimensionError):
        _cfg([0], g[:3], g).validate(CFG, N)
    with pytest.raises(RangeError):
        FusionConfig([0], -1, g, g)


def test_all_false_query_gate_is_end_to_end_noop(setup):
    _, vm, _, traj_src, cache, gate = setup
    cfg = _cfg([0, 2, 5, 7], np.zeros(CFG.n_tokens, bool), gate)
    hooked = replay_then_denoise(traj_src, N, vm, hooks=lambda i: make_fusion_hooks(cache, cfg, i))
    assert np.array_equal(hooked, replay_then_denoise(traj_src, N, vm))


def test_zero_token_cache_is_end_to_end_noop(setup):
    _, vm, traj_ref, traj_src, _, _ = setup
    empty = capture_reference_kv(traj_ref, vm, [0, 7], np.zeros(CFG.n_tokens, bool))
    cfg = _cfg([0, 7], np.ones(CFG.n_tokens, bool), np.zeros(CFG.n_tokens, bool))
    hooked = replay_then_denoise(traj_src, N, vm, hooks=lambda i: make_fusion_hooks(empty, cfg, i))
    assert np.array_equal(hooked, replay_then_denoise(traj_src, N, vm))


def test_gating_off_expands_every_image_query(setup):
    gate = np.zeros(CFG.n_tokens, bool)
    cfg = _cfg([0], gate, gate, gate_queries=False)
    assert cfg.effective_query_gate().all()
