"""End-to-end appearance transfer.

Stages: invert source and reference, capture reference K/V, encode the
reference appearance, then replay the source trajectory down to step ``k``
and denoise the remaining ``k`` steps with the expanded attention context.

With query gating on, the edit region is also confined at the latent level:
after every free step, pixels outside ``m_src`` are taken from a
reference-free run of the same replay. A global-attention network otherwise
lets edited tokens influence background tokens in later layers.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np

from .appearance import DEFAULT_EPS, DEFAULT_TAU, Mask, build_condition, token_gate, weighted_embed
from .dit import ModelWeights, VelocityModel, default_selected_layers
from .errors import DimensionError, RangeError, StageError, TransferError
from .fusion import FusionConfig, KVCache, capture_reference_kv, make_fusion_hooks
from .metrics import compute_metrics
from .numerics import RngState
from .solvers import SolverSpec, Trajectory, invert, relative_error, replay_then_denoise, sample

INSIDE_THRESHOLD = 0.5


@dataclass
class TransferJob:
    source: np.ndarray
    reference: np.ndarray
    m_src: np.ndarray
    m_ref: np.ndarray
    depth: np.ndarray
    ref_depth: np.ndarray | None = None
    solver: SolverSpec = field(default_factory=SolverSpec)
    k: int | None = None
    selected_layers: list[int] | None = None
    fusion_enabled: bool = True
    gate_queries: bool = True
    use_appearance: bool = True
    eps_floor: float = DEFAULT_EPS
    tau: float = DEFAULT_TAU
    seed: int = 0
    parallel: bool = False

    def __post_init__(self):
        if self.k is None:
            self.k = self.solver.steps // 2
        if self.ref_depth is None:
            self.ref_depth = np.zeros_like(self.m_ref)

    @property
    def uses_reference(self) -> bool:
        return self.fusion_enabled or self.use_appearance

    def validate(self, weights: ModelWeights) -> None:
        shape = weights.config.latent_shape
        for name in ("source", "reference"):
            arr = getattr(self, name)
            if arr.shape != shape:
                raise DimensionError(f"{name} shape {arr.shape} does not match model latent {shape}")
            if not np.all(np.isfinite(arr)):
                raise RangeError(f"{name} contains non-finite values")
        for name in ("m_src", "m_ref", "depth", "ref_depth"):
            arr = getattr(self, name)
            if arr.shape != shape[1:]:
                raise DimensionError(f"{name} shape {arr.shape} does not match image {shape[1:]}")
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise RangeError(f"{name} values must lie in [0, 1]")
        if not 0 <= self.k <= self.solver.steps:
            raise RangeError(f"replay cutoff k={self.k} outside [0, {self.solver.steps}]")
        if self.uses_reference:
            Mask(self.m_ref, "reference_foreground").require_nonempty()

    def fusion_config(self, weights: ModelWeights) -> FusionConfig:
        c = weights.config
        layers = default_selected_layers(c) if self.selected_layers is None else self.selected_layers
        cfg = FusionConfig(
            selected_layers=layers,
            k=self.k,
            query_gate=token_gate(self.m_src, c.patch, self.tau),
            kv_gate=token_gate(self.m_ref, c.patch, self.tau),
            enabled=self.fusion_enabled,
            gate_queries=self.gate_queries,
        )
        cfg.validate(c, self.solver.steps)
        return cfg


@dataclass
class TransferResult:
    output: np.ndarray
    report: dict
    traj_src: Trajectory
    traj_ref: Trajectory | None
    cache: KVCache | None
    raw: np.ndarray


class _Stages:
    def __init__(self):
        self.ms: dict[str, float] = {}

    @contextmanager
    def __call__(self, name):
        t0 = time.perf_counter()
        try:
            yield
        except StageError:
            raise
        except TransferError as exc:
            raise StageError(name, exc) from exc
        finally:
            self.ms[name] = round((time.perf_counter() - t0) * 1e3, 3)


def _models(job: TransferJob, weights: ModelWeights, prior):
    d = weights.config.d_model
    vm_src = VelocityModel(weights, build_condition(None, job.depth, job.m_src, d_model=d), prior)
    vm_ref = VelocityModel(weights, build_condition(None, job.ref_depth, job.m_ref, d_model=d), prior)
    return vm_src, vm_ref


def _composite(m_src, background_states):
    inside = (np.asarray(m_src) >= INSIDE_THRESHOLD)[None]

    def post_step(j, z):
        return np.where(inside, z, background_states[j])

    return post_step


def run_transfer(job: TransferJob, weights: ModelWeights, prior=None, *,
                 traj_src: Trajectory | None = None, traj_ref: Trajectory | None = None,
                 cache: KVCache | None = None) -> TransferResult:
    """Run the full transfer. Precomputed trajectories / cache are reused when given."""
    stages = _Stages()
    with stages("validate"):
        job.validate(weights)
        cfg = job.fusion_config(weights)
        vm_src, vm_ref = _models(job, weights, prior)

    need_ref = job.fusion_enabled and cache is None and traj_ref is None
    with stages("invert"):
        tasks = {}
        if traj_src is None:
            tasks["src"] = lambda: invert(job.source, vm_src, job.solver)
        if need_ref:
            tasks["ref"] = lambda: invert(job.reference, vm_ref, job.solver)
        if job.parallel and len(tasks) > 1:
            with ThreadPoolExecutor(max_workers=2) as pool:
                futures = {name: pool.submit(fn) for name, fn in tasks.items()}
                done = {name: f.result() for name, f in futures.items()}
        else:
            done = {name: fn() for name, fn in tasks.items()}
        traj_src = done.get("src", traj_src)
        traj_ref = done.get("ref", traj_ref)
        if traj_src.n != job.solver.steps or (traj_ref is not None and traj_ref.n != traj_src.n):
            raise StageError("invert", RangeError("trajectory step counts do not match the solver"))

    with stages("capture_kv"):
        if job.fusion_enabled and cache is None:
            cache = capture_reference_kv(traj_ref, vm_ref, cfg.selected_layers, cfg.kv_gate)
        if cache is not None and cache.n_steps != traj_src.n:
            raise RangeError(f"KV cache has {cache.n_steps} steps, solver has {traj_src.n}")

    with stages("encode_appearance"):
        c_ref = weighted_embed(job.reference, job.m_ref, weights, job.eps_floor) if job.use_appearance else None
        vm_edit = vm_src.with_cond(build_condition(c_ref, job.depth, job.m_src, d_model=weights.config.d_model))

    with stages("denoise"):
        if not job.uses_reference:
            out, states = replay_then_denoise(traj_src, job.k, vm_src, return_states=True)
        else:
            post_step = None
            if job.gate_queries:
                _, bg = replay_then_denoise(traj_src, job.k, vm_src, return_states=True)
                post_step = _composite(job.m_src, bg)
            hooks = (lambda i: make_fusion_hooks(cache, cfg, i)) if job.fusion_enabled else None
            out, states = replay_then_denoise(traj_src, job.k, vm_edit, hooks=hooks,
                                              post_step=post_step, return_states=True)

    with stages("decode"):
        output = np.clip(out, 0.0, 1.0)
        metrics = compute_metrics(output, job.source, job.reference, job.m_src, job.m_ref,
                                  weights.config.patch, job.tau)

    report = {
        "stage_timings_ms": stages.ms,
        **metrics.to_dict(),
        "k": int(job.k),
        "n": int(job.solver.steps),
        "solver": job.solver.method,
        "fusion": bool(job.fusion_enabled),
        "gate_queries": bool(job.gate_queries),
        "appearance": bool(job.use_appearance),
        "selected_layers": cfg.selected_layers,
        "cache": cache.stats() if cache is not None else None,
        "step_norms": [float(np.linalg.norm(s)) for s in states],
    }
    return TransferResult(output, report, traj_src, traj_ref, cache, out)


@dataclass
class ReconstructResult:
    output: np.ndarray
    report: dict
    trajectory: Trajectory


def run_reconstruct(source, solver: SolverSpec, weights: ModelWeights | None = None, *,
                    depth=None, region=None, prior=None, v_fn=None) -> ReconstructResult:
    """Invert then sample with the same solver; report the round-trip error.

    ``v_fn`` overrides the network (e.g. an analytic flow).
    """
    source = np.asarray(source, dtype=np.float64)
    if v_fn is None:
        hw = source.shape[1:]
        depth = np.zeros(hw) if depth is None else depth
        region = np.zeros(hw) if region is None else region
        v_fn = VelocityModel(weights, build_condition(None, depth, region, d_model=weights.config.d_model), prior)
    traj = invert(source, v_fn, solver)
    out, states = sample(traj.latents[-1], v_fn, solver, return_states=True)
    drift = [relative_error(states[i], traj.latents[i]) for i in range(traj.n + 1)]
    report = {
        "recon_err": relative_error(out, source),
        "per_step_drift": drift,
        "n": solver.steps,
        "solver": solver.method,
    }
    return ReconstructResult(out, report, traj)


def run_ablation(job: TransferJob, weights: ModelWeights, prior=None) -> dict:
    """Mechanism ablation.

    ``d``: conditions only (fresh noise, no replay, no K/V expansion);
    ``e``: plus replay of the source trajectory;
    ``f``: plus attention context expansion.
    """
    full = run_transfer(job, weights, prior)
    no_kv = run_transfer(replace(job, fusion_enabled=False), weights, prior, traj_src=full.traj_src)

    vm_src, _ = _models(job, weights, prior)
    c_ref = weighted_embed(job.reference, job.m_ref, weights, job.eps_floor) if job.use_appearance else None
    vm_edit = vm_src.with_cond(build_condition(c_ref, job.depth, job.m_src, d_model=weights.config.d_model))
    noise = RngState(job.seed).fork(0xD).normal(weights.config.latent_shape)
    post_step = None
    if job.gate_queries:
        _, bg = sample(noise, vm_src, job.solver, return_states=True)
        post_step = _composite(job.m_src, bg)
    base = np.clip(sample(noise, vm_edit, job.solver, post_step=post_step), 0.0, 1.0)

    outputs = {"d": base, "e": no_kv.output, "f": full.output}
    stages = {
        name: compute_metrics(img, job.source, job.reference, job.m_src, job.m_ref,
                              weights.config.patch, job.tau).to_dict()
        for name, img in outputs.items()
    }

    def delta(key, a, b):
        x, y = stages[a][key], stages[b][key]
        return None if x is None or y is None else y - x

    return {
        "stages": stages,
        "deltas": {
            "e_minus_d_masked_err_out": delta("masked_err_out", "d", "e"),
            "f_minus_e_mean_color_dist": delta("mean_color_dist", "e", "f"),
            "f_minus_e_patch_var_dist": delta("patch_var_dist", "e", "f"),
        },
        "k": int(job.k),
        "n": int(job.solver.steps),
        "solver": job.solver.method,
        "outputs": outputs,
    }
