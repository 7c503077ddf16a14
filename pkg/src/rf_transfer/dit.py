"""Toy FLUX-shaped velocity network.

Topology: patchify [latent, depth, region] -> double-stream blocks (image
tokens and conditioning tokens keep separate weights, attend jointly) ->
single-stream blocks (one token sequence) -> per-token velocity head.

Every block has exactly one attention site. Sites are numbered globally:
double-stream blocks ``0 .. n_double-1``, then single-stream blocks
``n_double .. n_double+n_single-1``.

Head 0 of every site is a content head: its value vectors start with the raw
patch content of each image token and it attends over image tokens only. The
velocity head pulls each token toward the average content-head readout, so
values injected from another image have a visible, directional effect even
with untrained weights.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Protocol, Sequence

import numpy as np

from . import containers
from .errors import ConfigError, DimensionError, RangeError
from .numerics import RngState, attention, attention_expanded, gelu, layer_norm

WEIGHTS_MAGIC = b"RFWT"


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    patch: int = 2
    n_double: int = 4
    n_single: int = 4
    latent_hw: int = 16
    channels: int = 3
    cond_channels: int = 2
    mlp_ratio: int = 2
    content_gain: float = 1.0
    residual_gain: float = 0.5
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.latent_hw % self.patch:
            raise ConfigError(f"latent_hw={self.latent_hw} not divisible by patch={self.patch}")
        if self.n_double < 4 or self.n_single < 4:
            raise ConfigError("need at least 4 double-stream and 4 single-stream blocks")
        if self.content_dim > self.head_dim:
            raise ConfigError(
                f"content head needs channels*patch^2={self.content_dim} <= head_dim={self.head_dim}"
            )

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def content_dim(self) -> int:
        return self.channels * self.patch**2

    @property
    def n_tokens(self) -> int:
        return (self.latent_hw // self.patch) ** 2

    @property
    def n_sites(self) -> int:
        return self.n_double + self.n_single

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.latent_hw, self.latent_hw)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def patchify(latent: np.ndarray, patch: int) -> np.ndarray:
    """(C, H, W) -> (N, C*patch^2), patches in raster order, channel-major inside a token."""
    if latent.ndim != 3:
        raise DimensionError(f"patchify expects (C, H, W), got {latent.shape}")
    c, h, w = latent.shape
    if h % patch or w % patch:
        raise DimensionError(f"latent {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = latent.reshape(c, gh, patch, gw, patch).transpose(1, 3, 0, 2, 4)
    return np.ascontiguousarray(x.reshape(gh * gw, c * patch * patch))


def unpatchify(tokens: np.ndarray, patch: int, channels: int, h: int, w: int) -> np.ndarray:
    gh, gw = h // patch, w // patch
    if tokens.shape != (gh * gw, channels * patch * patch):
        raise DimensionError(f"cannot unpatchify {tokens.shape} into ({channels}, {h}, {w})")
    x = tokens.reshape(gh, gw, channels, patch, patch).transpose(2, 0, 3, 1, 4)
    return np.ascontiguousarray(x.reshape(channels, h, w))


def enumerate_attention_sites(config: ModelConfig) -> list[tuple[str, int, int]]:
    sites = [("double", i, i) for i in range(config.n_double)]
    sites += [("single", j, config.n_double + j) for j in range(config.n_single)]
    return sites


def default_selected_layers(config: ModelConfig) -> list[int]:
    """First two and last two sites of each stream."""
    sel = set()
    for stream, count, offset in (("double", config.n_double, 0), ("single", config.n_single, config.n_double)):
        sel.update(offset + i for i in (0, 1, count - 2, count - 1))
    return sorted(sel)


class ModelWeights:
    """Named float64 arrays plus the config they belong to. Treat as immutable."""

    def __init__(self, config: ModelConfig, arrays: dict[str, np.ndarray]):
        self.config = config
        self.arrays = {}
        for name, arr in arrays.items():
            frozen = np.array(arr, dtype=np.float64)  # private read-only copy: safe to share across threads
            frozen.setflags(write=False)
            self.arrays[name] = frozen
        arrays = self.arrays
        expected = _weight_shapes(config)
        for name, shape in expected.items():
            if name not in arrays:
                raise ConfigError(f"missing weight {name!r}")
            if arrays[name].shape != shape:
                raise DimensionError(f"weight {name!r} has shape {arrays[name].shape}, expected {shape}")
        extra = set(arrays) - set(expected)
        if extra:
            raise ConfigError(f"unexpected weights: {sorted(extra)}")

    def __getitem__(self, name):
        return self.arrays[name]

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "ModelWeights":
        rng = RngState(seed)
        arrays = {}
        for name, shape in _weight_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf.endswith("_g"):
                arrays[name] = np.ones(shape)
            elif leaf.endswith("_b") or leaf == "b" or leaf.startswith("b"):
                arrays[name] = np.zeros(shape)
            else:
                arrays[name] = rng.normal(shape) / math.sqrt(shape[0])
        return cls(config, arrays)

    def save(self, path) -> None:
        names = sorted(self.arrays)
        containers.save(path, WEIGHTS_MAGIC, {"kind": "weights", "config": asdict(self.config)},
                        {n: self.arrays[n] for n in names})

    @classmethod
    def load(cls, path) -> "ModelWeights":
        meta, arrays = containers.load(path, WEIGHTS_MAGIC)
        return cls(ModelConfig.from_dict(meta["config"]), arrays)


def _block_shapes(prefix, d, r):
    return {
        f"{prefix}.ln1_g": (d,), f"{prefix}.ln1_b": (d,),
        f"{prefix}.qkv": (d, 3 * d), f"{prefix}.o": (d, d),
        f"{prefix}.ln2_g": (d,), f"{prefix}.ln2_b": (d,),
        f"{prefix}.mlp1": (d, r * d), f"{prefix}.mlp2": (r * d, d),
    }


def _weight_shapes(c: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, r = c.d_model, c.mlp_ratio
    shapes = {
        "embed.w": ((c.channels + c.cond_channels) * c.patch**2, d), "embed.b": (d,),
        "time.w1": (d, d), "time.b1": (d,), "time.w2": (d, d), "time.b2": (d,),
        "ctx.w": (d, d), "ctx.b": (d,),
        "final.ln_g": (d,), "final.ln_b": (d,), "final.w": (d, c.content_dim),
    }
    for i in range(c.n_double):
        shapes.update(_block_shapes(f"double.{i}.img", d, r))
        shapes.update(_block_shapes(f"double.{i}.ctx", d, r))
    for j in range(c.n_single):
        shapes.update(_block_shapes(f"single.{j}", d, r))
    return shapes


@dataclass
class ConditionBundle:
    """Per-step conditioning: geometric channels, appearance tokens, timestep."""

    depth: np.ndarray
    region: np.ndarray
    appearance_tokens: np.ndarray
    timestep: float = 1.0

    def __post_init__(self):
        for name in ("depth", "region"):
            arr = getattr(self, name)
            if arr.ndim != 2:
                raise DimensionError(f"{name} must be 2-D, got {arr.shape}")
            if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
                raise RangeError(f"{name} values must lie in [0, 1]")
        if self.depth.shape != self.region.shape:
            raise DimensionError("depth and region geometry differ")
        if self.appearance_tokens.ndim != 2:
            raise DimensionError("appearance_tokens must be (N_ctx, d_model)")

    def at(self, t: float) -> "ConditionBundle":
        return ConditionBundle(self.depth, self.region, self.appearance_tokens, float(t))

    @classmethod
    def empty(cls, config: ModelConfig) -> "ConditionBundle":
        hw = config.latent_hw
        return cls(np.zeros((hw, hw)), np.zeros((hw, hw)), np.zeros((0, config.d_model)))


@dataclass
class AttentionTensors:
    """One attention site's per-head tensors, shape (heads, tokens, head_dim).

    The first ``n_cond`` tokens are conditioning tokens; the rest are image
    tokens. With ``content_head`` set, head 0 attends over image tokens only.
    """

    layer_id: int
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    n_cond: int = 0
    content_head: bool = True

    @property
    def n_tokens(self) -> int:
        return self.q.shape[1]

    def context(self, head: int) -> tuple[np.ndarray, np.ndarray]:
        if head == 0 and self.content_head and self.n_cond:
            return self.k[0, self.n_cond:], self.v[0, self.n_cond:]
        return self.k[head], self.v[head]

    def attend(self, k_ext=None, v_ext=None, gate=None) -> np.ndarray:
        """Multi-head attention; optionally expand the context of gated queries."""
        heads, _, hd = self.q.shape
        scale = 1.0 / math.sqrt(hd)
        out = np.empty_like(self.q)
        for h in range(heads):
            kh, vh = self.context(h)
            if k_ext is None:
                out[h] = attention(self.q[h], kh, vh, scale)
            else:
                out[h] = attention_expanded(self.q[h], kh, vh, k_ext[h], v_ext[h], gate, scale)
        return out


class Hook(Protocol):
    layer_id: int

    def __call__(self, site: AttentionTensors) -> np.ndarray | None: ...


def _time_features(t: float, d: int) -> np.ndarray:
    # at most ~3 cycles over t in [0, 1]; higher frequencies make the ODE stiff
    half = d // 2
    freqs = 2.0 ** np.linspace(-3.0, 1.5, half)
    ang = 2.0 * math.pi * t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


def _mlp(x, w, prefix, eps):
    a = layer_norm(x, w[f"{prefix}.ln2_g"], w[f"{prefix}.ln2_b"], eps)
    return gelu(a @ w[f"{prefix}.mlp1"]) @ w[f"{prefix}.mlp2"]


def _split_heads(x, heads):
    t, d = x.shape
    return np.ascontiguousarray(x.reshape(t, heads, d // heads).transpose(1, 0, 2))


def _merge_heads(x):
    h, t, hd = x.shape
    return x.transpose(1, 0, 2).reshape(t, h * hd)


def _run_site(site: AttentionTensors, hooks: Sequence[Hook]) -> np.ndarray:
    out = None
    for hook in hooks:
        if hook.layer_id != site.layer_id:
            continue
        res = hook(site)
        if res is not None:
            if out is not None:
                raise ConfigError(f"more than one hook replaced attention at layer {site.layer_id}")
            if res.shape != site.q.shape:
                raise DimensionError(
                    f"hook output {res.shape} at layer {site.layer_id} does not match queries {site.q.shape}"
                )
            out = res
    return site.attend() if out is None else out


def forward_velocity(z: np.ndarray, cond: ConditionBundle, weights: ModelWeights,
                     hooks: Sequence[Hook] = ()) -> np.ndarray:
    """Velocity at latent ``z`` and time ``cond.timestep``; same shape as ``z``."""
    c = weights.config
    w = weights.arrays
    if z.shape != c.latent_shape:
        raise DimensionError(f"latent shape {z.shape} does not match config {c.latent_shape}")
    if cond.depth.shape != (c.latent_hw, c.latent_hw):
        raise DimensionError(f"condition geometry {cond.depth.shape} does not match latent")
    if cond.appearance_tokens.shape[1] != c.d_model:
        raise DimensionError("appearance token width does not match d_model")
    eps, heads, P = c.ln_eps, c.n_heads, c.content_dim

    content = patchify(z, c.patch)
    x_in = np.concatenate([z, cond.depth[None], cond.region[None]], axis=0)
    h_img = patchify(x_in, c.patch) @ w["embed.w"] + w["embed.b"]
    temb = gelu(_time_features(cond.timestep, c.d_model) @ w["time.w1"] + w["time.b1"])
    temb = temb @ w["time.w2"] + w["time.b2"]
    h_img = h_img + temb
    h_ctx = cond.appearance_tokens @ w["ctx.w"] + w["ctx.b"] + temb
    n_cond = h_ctx.shape[0]
    readout = np.zeros_like(content)

    def site_tensors(layer_id, qkv):
        q, k, v = (_split_heads(a, heads) for a in np.split(qkv, 3, axis=1))
        v[0, n_cond:, :P] = content
        return AttentionTensors(layer_id, q, k, v, n_cond)

    for i in range(c.n_double):
        pi, pc = f"double.{i}.img", f"double.{i}.ctx"
        qkv = np.concatenate([
            layer_norm(h_ctx, w[f"{pc}.ln1_g"], w[f"{pc}.ln1_b"], eps) @ w[f"{pc}.qkv"],
            layer_norm(h_img, w[f"{pi}.ln1_g"], w[f"{pi}.ln1_b"], eps) @ w[f"{pi}.qkv"],
        ])
        out = _run_site(site_tensors(i, qkv), hooks)
        readout += out[0, n_cond:, :P]
        o = _merge_heads(out)
        h_ctx = h_ctx + o[:n_cond] @ w[f"{pc}.o"]
        h_img = h_img + o[n_cond:] @ w[f"{pi}.o"]
        h_ctx = h_ctx + _mlp(h_ctx, w, pc, eps)
        h_img = h_img + _mlp(h_img, w, pi, eps)

    hs = np.concatenate([h_ctx, h_img])
    for j in range(c.n_single):
        p = f"single.{j}"
        qkv = layer_norm(hs, w[f"{p}.ln1_g"], w[f"{p}.ln1_b"], eps) @ w[f"{p}.qkv"]
        out = _run_site(site_tensors(c.n_double + j, qkv), hooks)
        readout += out[0, n_cond:, :P]
        hs = hs + _merge_heads(out) @ w[f"{p}.o"]
        hs = hs + _mlp(hs, w, p, eps)

    h_img = hs[n_cond:]
    head = layer_norm(h_img, w["final.ln_g"], w["final.ln_b"], eps) @ w["final.w"]
    v_tok = c.residual_gain * head + c.content_gain * (content - readout / c.n_sites)
    return unpatchify(v_tok, c.patch, c.channels, c.latent_hw, c.latent_hw)


@dataclass
class VelocityModel:
    """Binds weights and a condition bundle into a solver-ready ``v_fn(z, t, hooks=())``.

    ``prior`` optionally adds an analytic velocity field (e.g. a mixture flow).
    """

    weights: ModelWeights
    cond: ConditionBundle
    prior: Callable | None = None
    calls: int = field(default=0, compare=False)

    def __call__(self, z, t, hooks=()):
        self.calls += 1
        v = forward_velocity(z, self.cond.at(t), self.weights, hooks)
        if self.prior is not None:
            v = v + self.prior(z, t)
        return v

    def with_cond(self, cond: ConditionBundle) -> "VelocityModel":
        return VelocityModel(self.weights, cond, self.prior)
