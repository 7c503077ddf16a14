import numpy as np
import pytest

from rf_transfer.dit import (AttentionTensors, ConditionBundle, ModelConfig, ModelWeights, VelocityModel,
                             default_selected_layers, enumerate_attention_sites, forward_velocity,
                             patchify, unpatchify)
from rf_transfer.errors import ConfigError, DimensionError, RangeError
from rf_transfer.numerics import RngState

SMALL = ModelConfig(d_model=32, n_heads=2, latent_hw=8)


@pytest.fixture(scope="module")
def weights():
    return ModelWeights.init(SMALL, 0)


def _z(seed=1, cfg=SMALL):
    return RngState(seed).normal(cfg.latent_shape)


class Capture:
    def __init__(self, layer_id):
        self.layer_id, self.seen = layer_id, []

    def __call__(self, site):
        self.seen.append((site.q.copy(), site.k.copy(), site.v.copy()))
        return None


class Replace:
    def __init__(self, layer_id, fn):
        self.layer_id, self.fn = layer_id, fn

    def __call__(self, site):
        return self.fn(site)


# ---- config and patching --------------------------------------------------

@pytest.mark.parametrize("kw", [dict(d_model=30, n_heads=4), dict(latent_hw=15), dict(n_double=3),
                                dict(n_single=2), dict(d_model=16, n_heads=4)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_patchify_raster_order_small():
    x = np.arange(4.0).reshape(1, 2, 2)
    np.testing.assert_array_equal(patchify(x, 1), [[0], [1], [2], [3]])


def test_patchify_index_oracle():
    x = np.arange(2 * 4 * 4.0).reshape(2, 4, 4)
    tok = patchify(x, 2)
    assert tok.shape == (4, 8)
    for n in range(4):
        py, px = divmod(n, 2)
        want = [x[c, 2 * py + dy, 2 * px + dx] for c in range(2) for dy in range(2) for dx in range(2)]
        np.testing.assert_array_equal(tok[n], want)
    np.testing.assert_array_equal(patchify(x[:1], 2)[0], [0, 1, 4, 5])


def test_patchify_roundtrip_and_errors():
    x = _z(2)
    assert np.array_equal(unpatchify(patchify(x, 2), 2, 3, 8, 8), x)
    with pytest.raises(DimensionError):
        patchify(np.ones((1, 5, 4)), 2)


def test_sites_and_default_selection():
    c = ModelConfig()
    sites = enumerate_attention_sites(c)
    assert [s[2] for s in sites] == list(range(8))
    assert sites[0] == ("double", 0, 0) and sites[4] == ("single", 0, 4)
    assert default_selected_layers(c) == list(range(8))
    big = ModelConfig(n_double=6, n_single=6)
    assert set(default_selected_layers(big)) == {0, 1, 4, 5, 6, 7, 10, 11}


# ---- weights ---------------------------------------------------------------

def test_weights_deterministic_and_roundtrip(tmp_path, weights):
    again = ModelWeights.init(SMALL, 0)
    assert all(np.array_equal(weights[n], again[n]) for n in weights.arrays)
    other = ModelWeights.init(SMALL, 1)
    assert not np.array_equal(weights["double.0.img.qkv"], other["double.0.img.qkv"])
    weights.save(tmp_path / "w.bin")
    back = ModelWeights.load(tmp_path / "w.bin")
    assert back.config == SMALL
    assert all(np.array_equal(weights[n], back[n]) for n in weights.arrays)


def test_weights_are_read_only(weights):
    with pytest.raises(ValueError):
        weights["embed.w"][0, 0] = 1.0


def test_weight_shape_validation(weights):
    arrays = dict(weights.arrays)
    arrays["ctx.w"] = np.ones((3, 3))
    with pytest.raises(DimensionError):
        ModelWeights(SMALL, arrays)
    arrays.pop("ctx.w")
    with pytest.raises(ConfigError):
        ModelWeights(SMALL, arrays)


# ---- forward pass ----------------------------------------------------------

def test_forward_deterministic_and_shape(weights):
    cond = ConditionBundle.empty(SMALL).at(0.3)
    z = _z()
    a, b = forward_velocity(z, cond, weights), forward_velocity(z, cond, weights)
    assert a.shape == z.shape and np.array_equal(a, b)


def test_capture_hooks_are_transparent(weights):
    cond = ConditionBundle.empty(SMALL).at(0.6)
    z = _z()
    hooks = [Capture(i) for i in range(SMALL.n_sites)]
    assert np.array_equal(forward_velocity(z, cond, weights, hooks), forward_velocity(z, cond, weights))
    assert all(len(h.seen) == 1 for h in hooks)
    q, k, v = hooks[0].seen[0]
    assert q.shape == (SMALL.n_heads, SMALL.n_tokens, SMALL.head_dim)


def test_replacing_hook_with_plain_attention_is_identity(weights):
    cond = ConditionBundle.empty(SMALL).at(0.6)
    z = _z()
    hooks = [Replace(3, lambda s: s.attend())]
    assert np.array_equal(forward_velocity(z, cond, weights, hooks), forward_velocity(z, cond, weights))


def test_hook_errors(weights):
    cond = ConditionBundle.empty(SMALL).at(0.5)
    with pytest.raises(DimensionError):
        forward_velocity(_z(), cond, weights, [Replace(0, lambda s: s.q[:, :2])])
    with pytest.raises(ConfigError):
        forward_velocity(_z(), cond, weights, [Replace(0, lambda s: s.attend())] * 2)


def test_appearance_tokens_enter_and_token_count_conserved(weights):
    z = _z()
    tokens = RngState(4).normal((5, SMALL.d_model))
    cond = ConditionBundle(np.zeros((8, 8)), np.zeros((8, 8)), tokens, 0.5)
    cap = Capture(6)
    v = forward_velocity(z, cond, weights, [cap])
    assert not np.array_equal(v, forward_velocity(z, ConditionBundle.empty(SMALL).at(0.5), weights))
    q, _, _ = cap.seen[0]
    assert q.shape[1] == SMALL.n_tokens + 5


def test_depth_and_region_change_velocity(weights):
    z = _z()
    base = forward_velocity(z, ConditionBundle.empty(SMALL).at(0.5), weights)
    depth = np.linspace(0, 1, 64).reshape(8, 8)
    with_depth = forward_velocity(z, ConditionBundle(depth, np.zeros((8, 8)), np.zeros((0, 32)), 0.5), weights)
    assert not np.array_equal(base, with_depth)


def test_velocity_is_lipschitz_on_probes(weights):
    cond = ConditionBundle.empty(SMALL).at(0.4)
    z = _z()
    v0 = forward_velocity(z, cond, weights)
    ratios = []
    for s in range(5):
        d = RngState(100 + s).normal(z.shape) * 1e-6
        ratios.append(np.linalg.norm(forward_velocity(z + d, cond, weights) - v0) / np.linalg.norm(d))
    assert max(ratios) < 50


def test_shape_errors(weights):
    cond = ConditionBundle.empty(SMALL)
    with pytest.raises(DimensionError):
        forward_velocity(np.ones((3, 4, 4)), cond, weights)
    with pytest.raises(RangeError):
        ConditionBundle(np.full((8, 8), 1.5), np.zeros((8, 8)), np.zeros((0, 32)))
    with pytest.raises(DimensionError):
        ConditionBundle(np.zeros((8, 8)), np.zeros((4, 4)), np.zeros((0, 32)))


def test_content_head_ignores_conditioning_tokens():
    r = RngState(5)
    q, k, v = r.normal((2, 5, 4)), r.normal((2, 5, 4)), r.normal((2, 5, 4))
    site = AttentionTensors(0, q, k, v, n_cond=2)
    k0, v0 = site.context(0)
    assert k0.shape[0] == 3 and np.array_equal(v0, v[0, 2:])
    assert site.context(1)[0].shape[0] == 5


def test_velocity_model_adds_prior_and_counts(weights):
    cond = ConditionBundle.empty(SMALL)
    vm = VelocityModel(weights, cond)
    with_prior = VelocityModel(weights, cond, prior=lambda z, t: np.ones_like(z))
    z = _z()
    np.testing.assert_allclose(with_prior(z, 0.2) - vm(z, 0.2), np.ones_like(z), atol=1e-15)
    assert vm.calls == 1
