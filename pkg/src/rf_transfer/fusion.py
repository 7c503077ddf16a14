"""Attention context expansion.

Reference K/V are captured at selected attention sites while the network is
evaluated along the reference's inversion trajectory. During source
synthesis, step ``i`` pairs with reference entry ``i`` (both streams share one
timestep grid) and gated source queries attend over ``[K_src ; K_ref]``,
``[V_src ; V_ref]``. Queries themselves are never modified.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import containers
from .dit import AttentionTensors, VelocityModel, enumerate_attention_sites
from .errors import CacheMissError, ConfigError, DimensionError, RangeError
from .solvers import Trajectory

KV_MAGIC = b"RFKV"


@dataclass
class FusionConfig:
    selected_layers: list[int]
    k: int
    query_gate: np.ndarray
    kv_gate: np.ndarray
    enabled: bool = True
    gate_queries: bool = True

    def __post_init__(self):
        self.selected_layers = sorted(int(x) for x in self.selected_layers)
        self.query_gate = np.asarray(self.query_gate, dtype=bool)
        self.kv_gate = np.asarray(self.kv_gate, dtype=bool)
        if self.k < 0:
            raise RangeError(f"replay cutoff k={self.k} is negative")

    def validate(self, config, n_steps: int) -> None:
        valid = {s[2] for s in enumerate_attention_sites(config)}
        bad = [x for x in self.selected_layers if x not in valid]
        if bad:
            raise ConfigError(f"layers {bad} are not attention sites (valid: 0..{len(valid) - 1})")
        if not 0 <= self.k <= n_steps:
            raise RangeError(f"replay cutoff k={self.k} outside [0, {n_steps}]")
        for name in ("query_gate", "kv_gate"):
            if getattr(self, name).shape != (config.n_tokens,):
                raise DimensionError(f"{name} must have one flag per image token ({config.n_tokens})")

    def effective_query_gate(self) -> np.ndarray:
        return self.query_gate if self.gate_queries else np.ones_like(self.query_gate)


@dataclass
class KVCache:
    """Reference K/V keyed by (layer_id, step_index); arrays are (heads, tokens, head_dim)."""

    entries: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]]
    token_mask: np.ndarray
    n_steps: int
    frozen: bool = field(default=False, repr=False)

    @property
    def layers(self) -> list[int]:
        return sorted({layer for layer, _ in self.entries})

    @property
    def n_ref_tokens(self) -> int:
        return int(self.token_mask.sum())

    def get(self, layer_id: int, step: int):
        try:
            return self.entries[(layer_id, step)]
        except KeyError:
            raise CacheMissError(f"no cached K/V for layer {layer_id} at step {step}") from None

    def freeze(self) -> "KVCache":
        for k_arr, v_arr in self.entries.values():
            k_arr.setflags(write=False)
            v_arr.setflags(write=False)
        self.frozen = True
        return self

    def stats(self) -> dict:
        return {"entries": len(self.entries), "layers": self.layers,
                "ref_tokens": self.n_ref_tokens, "steps": self.n_steps + 1}

    def save(self, path) -> None:
        arrays = {"token_mask": self.token_mask.astype(np.float64)}
        for layer, step in sorted(self.entries):
            k_arr, v_arr = self.entries[(layer, step)]
            arrays[f"K/{layer}/{step}"] = k_arr
            arrays[f"V/{layer}/{step}"] = v_arr
        containers.save(path, KV_MAGIC, {"kind": "kvcache", "n_steps": self.n_steps}, arrays)

    @classmethod
    def load(cls, path) -> "KVCache":
        meta, arrays = containers.load(Path(path), KV_MAGIC)
        mask = arrays.pop("token_mask") > 0.5
        entries = {}
        for name, arr in arrays.items():
            kind, layer, step = name.split("/")
            key = (int(layer), int(step))
            pair = entries.setdefault(key, [None, None])
            pair[0 if kind == "K" else 1] = arr
        for key, (k_arr, v_arr) in entries.items():
            if k_arr is None or v_arr is None or k_arr.shape != v_arr.shape:
                raise ConfigError(f"incomplete or mismatched K/V entry {key}")
        return cls({k: tuple(v) for k, v in entries.items()}, mask, int(meta["n_steps"])).freeze()


class CaptureHook:
    """Read-only hook storing the image-token K/V rows selected by ``token_mask``."""

    def __init__(self, layer_id: int, token_mask: np.ndarray, sink: dict, step: int):
        self.layer_id = layer_id
        self.token_mask = token_mask
        self.sink = sink
        self.step = step

    def __call__(self, site: AttentionTensors):
        k_img = site.k[:, site.n_cond:]
        v_img = site.v[:, site.n_cond:]
        self.sink[(self.layer_id, self.step)] = (
            np.ascontiguousarray(k_img[:, self.token_mask]),
            np.ascontiguousarray(v_img[:, self.token_mask]),
        )
        return None


def capture_reference_kv(traj_ref: Trajectory, model: VelocityModel, selected_layers,
                         kv_gate) -> KVCache:
    """Evaluate ``model`` at every reference trajectory state, keeping K/V at selected sites."""
    valid = {s[2] for s in enumerate_attention_sites(model.weights.config)}
    bad = [x for x in selected_layers if x not in valid]
    if bad:
        raise ConfigError(f"layers {bad} are not attention sites")
    kv_gate = np.asarray(kv_gate, dtype=bool)
    entries: dict = {}
    for i in range(traj_ref.n + 1):
        hooks = [CaptureHook(layer, kv_gate, entries, i) for layer in selected_layers]
        model(traj_ref.latents[i], float(traj_ref.grid[i]), hooks=hooks)
    return KVCache(entries, kv_gate.copy(), traj_ref.n).freeze()


def expand_attention(site: AttentionTensors, cache_entry, query_gate) -> np.ndarray:
    """Attention over ``[K_src ; K_ref]`` for gated image queries, plain attention otherwise."""
    if cache_entry is None:
        return site.attend()
    k_ref, v_ref = cache_entry
    heads, _, hd = site.q.shape
    if k_ref.shape[0] != heads or k_ref.shape[2] != hd or v_ref.shape != k_ref.shape:
        raise DimensionError(
            f"cached K/V {k_ref.shape} incompatible with site tensors {site.q.shape}"
        )
    query_gate = np.asarray(query_gate, dtype=bool)
    if query_gate.shape != (site.n_tokens - site.n_cond,):
        raise DimensionError(f"query gate length {query_gate.shape[0]} != image tokens")
    if k_ref.shape[1] == 0 or not query_gate.any():
        return site.attend()
    gate = np.concatenate([np.zeros(site.n_cond, dtype=bool), query_gate])
    return site.attend(k_ref, v_ref, gate)


class InjectHook:
    def __init__(self, layer_id: int, entry, query_gate: np.ndarray):
        self.layer_id = layer_id
        self.entry = entry
        self.query_gate = query_gate

    def __call__(self, site: AttentionTensors) -> np.ndarray:
        return expand_attention(site, self.entry, self.query_gate)


def make_fusion_hooks(cache: KVCache, cfg: FusionConfig, step_index: int) -> list[InjectHook]:
    if not cfg.enabled:
        return []
    if not 0 <= step_index <= cache.n_steps:
        raise RangeError(f"step {step_index} outside cache grid [0, {cache.n_steps}]")
    gate = cfg.effective_query_gate()
    return [InjectHook(layer, cache.get(layer, step_index), gate) for layer in cfg.selected_layers]
