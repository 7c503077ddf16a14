"""Fast invariant checks across every component, run by ``rf-transfer selftest``."""
from __future__ import annotations

import io
import math
import tempfile
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import imageio, numerics
from .analytic import GaussianFlow, MixtureFlow, gaussian_coef, gaussian_exact_map
from .appearance import weighted_embed
from .dit import (AttentionTensors, ConditionBundle, ModelConfig, ModelWeights, VelocityModel,
                  forward_velocity, patchify, unpatchify)
from .fusion import KVCache, expand_attention
from .pipeline import TransferJob, run_transfer
from .scenes import SceneSpec, gen_scene, random_transfer_scenes
from .solvers import SolverSpec, Trajectory, fitted_order, invert, relative_error, replay_then_denoise, sample

CHECKS = []


def check(fn):
    CHECKS.append(fn)
    return fn


def _small():
    cfg = ModelConfig(d_model=32, n_heads=2, latent_hw=8)
    return ModelWeights.init(cfg, 0)


@check
def numerics_softmax_rows_sum_to_one():
    x = numerics.RngState(1).normal((7, 13)) * 30
    p = numerics.softmax_lastdim(x)
    return np.max(np.abs(p.sum(-1) - 1)) <= 1e-12


@check
def numerics_expanded_attention_degenerates():
    r = numerics.RngState(2)
    q, k, v = (r.fork(i).normal((6, 4)) for i in range(3))
    base = numerics.attention(q, k, v)
    empty = numerics.attention_expanded(q, k, v, np.zeros((0, 4)), np.zeros((0, 4)), np.ones(6, bool))
    off = numerics.attention_expanded(q, k, v, k * 2, v * 2, np.zeros(6, bool))
    return np.array_equal(base, empty) and np.array_equal(base, off)


@check
def numerics_backends_agree():
    r = numerics.RngState(3)
    q, k, v = (r.fork(i).normal((9, 8)) for i in range(3))
    outs = [numerics.get_kernels(name).attention(q, k, v, 0.35) for name in ("numpy", "numba")]
    return np.max(np.abs(outs[0] - outs[1])) <= 1e-12


@check
def numerics_rng_deterministic():
    a = numerics.RngState(42).normal(100)
    b = numerics.RngState(42).normal(100)
    return np.array_equal(a, b) and not np.array_equal(a, numerics.RngState(43).normal(100))


@check
def analytic_exact_map_endpoint():
    z = np.arange(1.0, 5.0)
    return np.allclose(gaussian_exact_map(z, 0.0, 1.0, 2.0), z / 2, rtol=0, atol=1e-15)


@check
def analytic_coef_integral():
    # integral of c over [0, 1] equals ln(1/a)
    ts = np.linspace(0, 1, 20001)
    c = np.array([gaussian_coef(t, 2.0) for t in ts])
    integral = float(np.sum((c[1:] + c[:-1]) * np.diff(ts)) / 2)
    return abs(integral - math.log(0.5)) < 1e-6


@check
def analytic_responsibilities_normalised():
    means = numerics.RngState(4).normal((3, 2, 4, 4))
    flow = MixtureFlow(means, sigma=0.1)
    z = numerics.RngState(5).normal((2, 4, 4))
    return all(abs(flow.responsibilities(z, t).sum() - 1) <= 1e-12 for t in (0.0, 0.3, 0.9))


@check
def solvers_orders():
    flow = GaussianFlow(2.0)
    z0 = np.ones(3)
    exact = z0 / 2
    steps = [16, 32, 64, 128]
    errs = {m: [relative_error(invert(z0, flow, SolverSpec(m, n)).latents[-1], exact) for n in steps]
            for m in ("euler", "midpoint_reuse")}
    return abs(fitted_order(steps, errs["euler"]) - 1) <= 0.15 and fitted_order(steps, errs["midpoint_reuse"]) >= 1.8


@check
def solvers_replay_degenerate():
    flow = GaussianFlow(1.5)
    z0 = numerics.RngState(6).normal(5)
    spec = SolverSpec("midpoint_reuse", 8)
    traj = invert(z0, flow, spec)
    return (np.array_equal(replay_then_denoise(traj, 0, flow), z0)
            and np.array_equal(replay_then_denoise(traj, 8, flow), sample(traj.latents[-1], flow, spec)))


@check
def dit_patchify_roundtrip_and_determinism():
    w = _small()
    c = w.config
    z = numerics.RngState(7).normal(c.latent_shape)
    rt = unpatchify(patchify(z, c.patch), c.patch, c.channels, c.latent_hw, c.latent_hw)
    cond = ConditionBundle.empty(c)
    a = forward_velocity(z, cond.at(0.4), w)
    b = forward_velocity(z, cond.at(0.4), w, hooks=[_Probe(0)])
    return np.array_equal(rt, z) and np.array_equal(a, b)


class _Probe:
    def __init__(self, layer_id):
        self.layer_id = layer_id

    def __call__(self, site):
        return None


@check
def appearance_eps_zero_invariance():
    w = _small()
    c = w.config
    img = numerics.RngState(8).uniform(c.latent_shape)
    mask = np.zeros((c.latent_hw, c.latent_hw))
    mask[:4, :4] = 1.0
    edited = img.copy()
    edited[:, 4:, :] = 0.123
    a = weighted_embed(img, mask, w, 0.0).pooled
    b = weighted_embed(edited, mask, w, 0.0).pooled
    return np.array_equal(a, b)


@check
def fusion_expansion_normalised_and_degenerate():
    r = numerics.RngState(9)
    q, k, v = (r.fork(i).normal((2, 6, 4)) for i in range(3))
    site = AttentionTensors(0, q, k, v, n_cond=0, content_head=False)
    empty = (np.zeros((2, 0, 4)), np.zeros((2, 0, 4)))
    same = np.array_equal(expand_attention(site, empty, np.ones(6, bool)), site.attend())
    k_ref, v_ref = r.fork(5).normal((2, 3, 4)), r.fork(6).normal((2, 3, 4))
    out = expand_attention(site, (k_ref, v_ref), np.ones(6, bool))
    allv = np.concatenate([v, v_ref], axis=1)
    hull = np.all(out <= allv.max(axis=1, keepdims=True) + 1e-12) and np.all(
        out >= allv.min(axis=1, keepdims=True) - 1e-12)
    return same and hull


@check
def formats_roundtrip():
    img = gen_scene(SceneSpec("stripes", (8, 8), color=(0.2, 0.4, 0.6)), 0)[0]
    ok = np.array_equal(imageio.decode(imageio.encode_ppm(img)), img)
    traj = Trajectory(numerics.RngState(10).normal((3, 2, 2)), np.array([0.0, 0.5, 1.0]), "euler")
    cache = KVCache({(0, 0): (np.ones((1, 2, 3)), np.zeros((1, 2, 3)))}, np.array([True, False, True]), 0)
    with tempfile.TemporaryDirectory() as d:
        traj.save(Path(d) / "t.traj")
        cache.save(Path(d) / "c.kvc")
        t2 = Trajectory.load(Path(d) / "t.traj")
        c2 = KVCache.load(Path(d) / "c.kvc")
    ok &= np.array_equal(t2.latents, traj.latents) and t2.solver_tag == "euler"
    ok &= np.array_equal(c2.entries[(0, 0)][0], cache.entries[(0, 0)][0])
    return bool(ok)


def _job(w, seed, steps=4, **kw):
    a, b = random_transfer_scenes(seed, w.config.latent_hw)
    a = replace(a, center=(3.5, 3.5), radius=3.0)
    b = replace(b, center=(3.5, 3.5), radius=3.0)
    (src, ms, ds), (ref, mr, dr) = gen_scene(a, seed), gen_scene(b, seed + 1)
    return TransferJob(src, ref, ms, mr, ds, dr, SolverSpec(steps=steps), seed=seed, **kw)


@check
def pipeline_k0_returns_source():
    w = _small()
    job = _job(w, 0, k=0, fusion_enabled=False)
    return np.array_equal(run_transfer(job, w).output, job.source)


@check
def pipeline_confinement():
    w = _small()
    job = _job(w, 1)
    out1 = run_transfer(job, w)
    other = _job(w, 2)
    out2 = run_transfer(replace(job, reference=other.reference, m_ref=other.m_ref), w,
                        traj_src=out1.traj_src)
    off = run_transfer(replace(job, fusion_enabled=False, use_appearance=False), w, traj_src=out1.traj_src)
    outside = job.m_src < 0.5
    d1 = np.max(np.abs(out1.output - out2.output)[:, outside])
    d2 = np.max(np.abs(out1.output - off.output)[:, outside])
    return d1 <= 1e-9 and d2 <= 1e-9


def run_selftest(stream=None) -> bool:
    """Run every check, print one line each, return overall success."""
    out = stream or io.StringIO()
    ok_all = True
    for fn in CHECKS:
        t0 = time.perf_counter()
        try:
            ok = bool(fn())
            detail = ""
        except Exception as exc:  # a crashing check is a failed check
            ok, detail = False, f" ({type(exc).__name__}: {exc})"
        ok_all &= ok
        ms = (time.perf_counter() - t0) * 1e3
        print(f"{'PASS' if ok else 'FAIL'} {fn.__name__} [{ms:.0f} ms]{detail}", file=out)
    return ok_all
