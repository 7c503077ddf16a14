"""Closed-form rectified-flow velocity fields.

Convention: ``z_t = (1 - t) x + t eps`` with ``eps ~ N(0, I)``; the marginal
velocity is ``E[eps - x | z_t]``.

For data ``x ~ N(m, a^2 I)`` the pair (x, z_t) is jointly Gaussian with
``Var z_t = s(t) = (1-t)^2 a^2 + t^2``, ``Cov(x, z_t) = (1-t) a^2`` and
``Cov(eps, z_t) = t``, which gives

    E[eps - x | z_t] = (t - (1-t) a^2) / s(t) * (z_t - (1-t) m) - m.

With ``m = 0`` the field is ``c(t) z`` where ``c = s'/(2 s)``, so the flow
map is ``z(t1) = z(t0) sqrt(s(t1)/s(t0))``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, RangeError


def _check_t(t):
    if not (0.0 <= t <= 1.0):
        raise RangeError(f"t={t} outside [0, 1]")


def gaussian_s(t: float, a: float) -> float:
    return (1.0 - t) ** 2 * a * a + t * t


def gaussian_coef(t: float, a: float) -> float:
    return (t - (1.0 - t) * a * a) / gaussian_s(t, a)


def gaussian_velocity(z, t: float, a: float):
    _check_t(t)
    return gaussian_coef(t, a) * z


def gaussian_exact_map(z0, t0: float, t1: float, a: float):
    _check_t(t0)
    _check_t(t1)
    if t0 == t1:
        return np.array(z0, dtype=np.float64, copy=True)
    return z0 * np.sqrt(gaussian_s(t1, a) / gaussian_s(t0, a))


@dataclass(frozen=True)
class GaussianFlow:
    a: float

    def __post_init__(self):
        if not self.a > 0:
            raise ConfigError(f"GaussianFlow needs a > 0, got {self.a}")

    def velocity(self, z, t, hooks=()):
        return gaussian_velocity(z, t, self.a)

    __call__ = velocity

    def exact_map(self, z0, t0, t1):
        return gaussian_exact_map(z0, t0, t1, self.a)


class MixtureFlow:
    """Isotropic Gaussian mixture ``sum_c pi_c N(mu_c, sigma^2 I)`` over latents."""

    def __init__(self, means, weights=None, sigma: float = 0.1):
        means = np.asarray(means, dtype=np.float64)
        if means.ndim < 2 or means.shape[0] < 1:
            raise ConfigError("MixtureFlow needs at least one component mean")
        n = means.shape[0]
        weights = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
        if weights.shape != (n,) or np.any(weights <= 0):
            raise ConfigError("mixture weights must be positive, one per component")
        if abs(weights.sum() - 1.0) > 1e-9:
            raise ConfigError(f"mixture weights sum to {weights.sum()}, expected 1")
        if not sigma > 0:
            raise ConfigError(f"mixture sigma must be > 0, got {sigma}")
        self.means = means
        self.weights = weights
        self.sigma = float(sigma)

    @property
    def latent_shape(self):
        return self.means.shape[1:]

    def _s(self, t):
        return (1.0 - t) ** 2 * self.sigma**2 + t * t

    def responsibilities(self, z, t):
        _check_t(t)
        s = self._s(t)
        if s <= 0.0:
            raise RangeError(f"degenerate mixture variance at t={t}")
        d = z[None] - (1.0 - t) * self.means
        sq = (d * d).reshape(len(self.weights), -1).sum(axis=1)
        logr = np.log(self.weights) - sq / (2.0 * s)
        logr -= logr.max()
        r = np.exp(logr)
        return r / r.sum()

    def velocity(self, z, t, hooks=()):
        _check_t(t)
        s = self._s(t)
        if s <= 0.0:
            raise RangeError(f"degenerate mixture variance at t={t}")
        r = self.responsibilities(z, t)
        coef = (t - (1.0 - t) * self.sigma**2) / s
        # sum_c r_c [coef (z - (1-t) mu_c) - mu_c]
        mu_bar = np.tensordot(r, self.means, axes=1)
        return coef * (z - (1.0 - t) * mu_bar) - mu_bar

    __call__ = velocity


def mixture_velocity(z, t, flow: MixtureFlow):
    return flow.velocity(z, t)
