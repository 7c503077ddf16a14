"""Rectified-flow integration: Euler and midpoint-with-velocity-reuse steppers,
inversion (data -> noise), sampling (noise -> data) and trajectory replay.

Timestep convention: trajectory entry ``i`` sits at ``grid[i]``, with
``grid[0] = 0`` the data side and ``grid[n] = 1`` the noise side.

Velocity functions are called as ``v_fn(z, t)``, or ``v_fn(z, t, hooks=...)``
when a step has hooks. ``hooks`` arguments may be a sequence (used at every
step) or a callable ``step_index -> sequence``; the step index is the grid
index the step starts from.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial
from pathlib import Path

import numpy as np

from . import containers
from .errors import ConfigError, DivergenceError, NumericError, RangeError

METHODS = ("euler", "midpoint_reuse")
DIVERGENCE_LIMIT = 1e6
TRAJ_MAGIC = b"RFTJ"


@dataclass
class SolverSpec:
    method: str = "midpoint_reuse"
    steps: int = 32
    grid: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown solver method {self.method!r}; choose from {METHODS}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigError(f"steps must be a positive integer, got {self.steps}")
        self.steps = int(self.steps)
        if self.grid is None:
            self.grid = np.linspace(0.0, 1.0, self.steps + 1)
        grid = np.asarray(self.grid, dtype=np.float64)
        if grid.shape != (self.steps + 1,):
            raise ConfigError(f"grid needs {self.steps + 1} points, got {grid.shape}")
        if grid[0] != 0.0 or grid[-1] != 1.0 or np.any(np.diff(grid) <= 0):
            raise ConfigError("grid must increase strictly from exactly 0 to exactly 1")
        self.grid = grid


@dataclass
class Trajectory:
    """States ``latents[0] ... latents[n]``; ``latents[0]`` is the data-side latent."""

    latents: np.ndarray
    grid: np.ndarray
    solver_tag: str

    @property
    def n(self) -> int:
        return len(self.grid) - 1

    @property
    def spec(self) -> SolverSpec:
        return SolverSpec(self.solver_tag, self.n, self.grid)

    def save(self, path) -> None:
        containers.save(
            path,
            TRAJ_MAGIC,
            {"kind": "trajectory", "solver": self.solver_tag, "n": self.n},
            {"grid": self.grid, "latents": self.latents},
        )

    @classmethod
    def load(cls, path) -> "Trajectory":
        meta, arrays = containers.load(Path(path), TRAJ_MAGIC)
        traj = cls(arrays["latents"], arrays["grid"], meta["solver"])
        if traj.latents.shape[0] != traj.n + 1:
            raise ConfigError("trajectory length does not match its grid")
        return traj


def interpolate(x, eps, t: float):
    if not 0.0 <= t <= 1.0:
        raise RangeError(f"interpolation time t={t} outside [0, 1]")
    if np.shape(x) != np.shape(eps):
        raise ValueError(f"shape mismatch {np.shape(x)} vs {np.shape(eps)}")
    if t == 0.0:
        return np.array(x, dtype=np.float64, copy=True)
    if t == 1.0:
        return np.array(eps, dtype=np.float64, copy=True)
    return (1.0 - t) * x + t * eps


def _velocity(v_fn, z, t):
    v = v_fn(z, t)
    if not np.all(np.isfinite(v)):
        raise NumericError(f"non-finite velocity at t={t:.6g}")
    return v


def step_euler(z, t, h, v_fn):
    return z + h * _velocity(v_fn, z, t)


def step_midpoint_reuse(z, t, h, v_fn, cache=None):
    """Midpoint step whose probe velocity is the previous step's midpoint velocity.

    Returns ``(z_next, v_mid)``; pass ``v_mid`` back as ``cache`` on the next
    step so each step after the first costs one velocity evaluation.
    """
    probe = _velocity(v_fn, z, t) if cache is None else cache
    v_mid = _velocity(v_fn, z + (0.5 * h) * probe, t + 0.5 * h)
    return z + h * v_mid, v_mid


def _hooks_at(hooks, i):
    if hooks is None:
        return ()
    return hooks(i) if callable(hooks) else hooks


def _integrate(z, v_fn, grid, order, method, hooks=None, post_step=None, record=None):
    """Step along ``grid`` visiting the indices in ``order`` (consecutive)."""
    cache = None
    for i, j in zip(order[:-1], order[1:]):
        t, h = grid[i], grid[j] - grid[i]
        step_hooks = _hooks_at(hooks, i)
        f = partial(v_fn, hooks=step_hooks) if step_hooks else v_fn
        try:
            if method == "euler":
                z = step_euler(z, t, h, f)
            else:
                z, cache = step_midpoint_reuse(z, t, h, f, cache)
        except NumericError as exc:
            raise type(exc)(f"step {i}->{j}: {exc}") from None
        if post_step is not None:
            z = post_step(j, z)
        if np.max(np.abs(z)) > DIVERGENCE_LIMIT:
            raise DivergenceError(f"state norm exceeded {DIVERGENCE_LIMIT:g} at step {i}->{j}")
        if record is not None:
            record[j] = z
    return z


def invert(latent0, v_fn, spec: SolverSpec, hooks=None) -> Trajectory:
    """Integrate from t=0 (data) to t=1 (noise), recording every state."""
    z = np.asarray(latent0, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("inversion input is not finite")
    n = spec.steps
    latents = np.empty((n + 1,) + z.shape)
    latents[0] = z
    _integrate(z.copy(), v_fn, spec.grid, list(range(n + 1)), spec.method, hooks, record=latents)
    return Trajectory(latents, spec.grid.copy(), spec.method)


def sample(z_n, v_fn, spec: SolverSpec, hooks=None, post_step=None, return_states=False):
    """Integrate from t=1 (noise) to t=0 (data)."""
    z = np.asarray(z_n, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("sampling input is not finite")
    n = spec.steps
    states = np.empty((n + 1,) + z.shape) if return_states else None
    if states is not None:
        states[n] = z
    out = _integrate(z.copy(), v_fn, spec.grid, list(range(n, -1, -1)), spec.method, hooks,
                     post_step, states)
    return (out, states) if return_states else out


def replay_then_denoise(traj: Trajectory, k: int, v_fn, hooks=None, method=None,
                        post_step=None, return_states=False):
    """Blended-noise initialisation: reuse ``traj`` verbatim for indices n..k,
    then integrate freely from ``traj.latents[k]`` down to t=0.

    ``k = 0`` returns ``traj.latents[0]``; ``k = n`` is plain sampling from
    the recorded noise.
    """
    n = traj.n
    if int(k) != k or not 0 <= k <= n:
        raise RangeError(f"replay cutoff k={k} outside [0, {n}]")
    k = int(k)
    method = method or traj.solver_tag
    states = np.empty_like(traj.latents) if return_states else None
    if states is not None:
        states[k:] = traj.latents[k:]
    if k == 0:
        out = traj.latents[0].copy()
    else:
        out = _integrate(traj.latents[k].copy(), v_fn, traj.grid, list(range(k, -1, -1)),
                         method, hooks, post_step, states)
    return (out, states) if return_states else out


def relative_error(a, b) -> float:
    den = float(np.linalg.norm(b))
    return float(np.linalg.norm(a - b)) / (den if den > 0 else 1.0)


def fitted_order(steps, errors) -> float:
    """Least-squares slope of -log(err) against log(n)."""
    x = np.log(np.asarray(steps, dtype=np.float64))
    y = np.log(np.asarray(errors, dtype=np.float64))
    return float(-np.polyfit(x, y, 1)[0])
