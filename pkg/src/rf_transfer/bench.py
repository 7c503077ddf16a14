"""Solver convergence benchmark: endpoint error of inversion against an oracle."""
from __future__ import annotations

import time

import numpy as np

from .analytic import GaussianFlow, MixtureFlow
from .appearance import build_condition
from .dit import ModelWeights, VelocityModel
from .errors import ConfigError
from .numerics import RngState
from .scenes import SceneSpec, gen_scene
from .solvers import METHODS, SolverSpec, fitted_order, invert, relative_error

FLOWS = ("gaussian", "mixture", "dit")


def _problem(flow: str, a: float, seed: int, weights: ModelWeights | None, ref_steps: int, scene=None):
    """Return (v_fn, start latent, oracle endpoint, oracle name)."""
    if flow == "gaussian":
        f = GaussianFlow(a)
        z0 = RngState(seed).normal(8)
        return f, z0, f.exact_map(z0, 0.0, 1.0), "exact map"
    if flow == "mixture":
        means = [gen_scene(SceneSpec(g, (8, 8), color=(0.9, 0.5, 0.1), color2=(0.1, 0.3, 0.6)))[0]
                 for g in ("stripes", "dots", "flat")]
        f = MixtureFlow(means, sigma=0.1)
        z0 = means[seed % 3] + 0.1 * RngState(seed).normal(means[0].shape)
    elif flow == "dit":
        if weights is None:
            raise ConfigError("dit flow needs model weights")
        c = weights.config
        if scene is None:
            scene = gen_scene(SceneSpec("blob", (c.latent_hw,) * 2, color=(0.8, 0.2, 0.2),
                                        color2=(0.1, 0.1, 0.1)), seed)
        z0, mask, depth = scene
        f = VelocityModel(weights, build_condition(None, depth, mask, d_model=c.d_model))
    else:
        raise ConfigError(f"unknown flow {flow!r}; choose from {FLOWS}")
    ref = invert(z0, f, SolverSpec("euler", ref_steps)).latents[-1]
    return f, z0, ref, f"euler n={ref_steps}"


def bench_solver(flow: str = "gaussian", a: float = 2.0, steps=(16, 32, 64, 128), seed: int = 0,
                 weights: ModelWeights | None = None, ref_steps: int = 4096, scene=None) -> dict:
    steps = sorted(int(n) for n in steps)
    if len(steps) < 2 or steps[0] < 1:
        raise ConfigError("need at least two positive step counts")
    t0 = time.perf_counter()
    v_fn, z0, ref, oracle = _problem(flow, a, seed, weights, ref_steps, scene)
    t_ref = time.perf_counter() - t0
    rows = {}
    for method in METHODS:
        errs = [relative_error(invert(z0, v_fn, SolverSpec(method, n)).latents[-1], ref) for n in steps]
        pair = [float(np.log2(errs[i] / errs[i + 1]) / np.log2(steps[i + 1] / steps[i]))
                for i in range(len(steps) - 1)]
        rows[method] = {"errors": errs, "order": fitted_order(steps, errs), "pairwise_orders": pair}
    return {
        "flow": flow,
        "a": a if flow == "gaussian" else None,
        "oracle": oracle,
        "steps": steps,
        "methods": rows,
        "reference_seconds": t_ref,
        "seconds": time.perf_counter() - t0,
    }


def format_table(result: dict) -> str:
    steps = result["steps"]
    lines = [f"flow={result['flow']} oracle={result['oracle']}",
             "method".ljust(16) + "".join(f"n={n}".rjust(12) for n in steps) + "order".rjust(9)]
    for method, row in result["methods"].items():
        lines.append(method.ljust(16) + "".join(f"{e:12.3e}" for e in row["errors"])
                     + f"{row['order']:9.3f}")
    return "\n".join(lines)
