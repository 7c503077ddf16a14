"""Procedural synthetic scenes: image + foreground mask + pseudo-depth.

All outputs are quantised to the 8-bit grid so they survive a PPM/PGM round
trip unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError
from .numerics import RngState

GENERATORS = ("stripes", "dots", "flat", "gradient", "blob")
FILLS = ("flat", "stripes", "dots")


def quantize(x):
    return np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0


@dataclass(frozen=True)
class SceneSpec:
    generator: str = "flat"
    size: tuple[int, int] = (16, 16)
    color: tuple[float, float, float] = (1.0, 1.0, 1.0)
    color2: tuple[float, float, float] = (0.0, 0.0, 0.0)
    period: int = 4
    center: tuple[float, float] = (7.5, 7.5)
    radius: float = 5.0
    fill: str = "flat"
    fill_color: tuple[float, float, float] = (0.0, 0.0, 0.0)
    noise: float = 0.0

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ConfigError(f"unknown scene generator {self.generator!r}; choose from {GENERATORS}")
        if self.fill not in FILLS:
            raise ConfigError(f"unknown blob fill {self.fill!r}; choose from {FILLS}")
        if self.period < 2 or self.period % 2:
            raise ConfigError(f"period must be an even integer >= 2, got {self.period}")
        if self.radius < 0 or self.noise < 0:
            raise ConfigError("radius and noise must be non-negative")


def _paint(on, c1, c2):
    c1 = np.asarray(c1, dtype=np.float64)[:, None, None]
    c2 = np.asarray(c2, dtype=np.float64)[:, None, None]
    return np.where(on[None], c1, c2)


def _pattern(kind, yy, xx, period):
    if kind == "stripes":
        return (xx // (period // 2)) % 2 == 0
    if kind == "dots":
        cy = (yy // period + 0.5) * period - 0.5
        cx = (xx // period + 0.5) * period - 0.5
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= (period / 4.0) ** 2
    return np.ones_like(yy, dtype=bool)


def gen_scene(spec: SceneSpec, seed: int = 0):
    """Return ``(image[3,H,W], mask[H,W], depth[H,W])``, all in [0, 1]."""
    h, w = spec.size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ramp_x = xx / max(w - 1, 1)
    ramp_y = yy / max(h - 1, 1)
    ones = np.ones((h, w))
    g = spec.generator
    if g == "flat":
        img, mask, depth = _paint(ones > 0, spec.color, spec.color2), ones, 0.5 * ones
    elif g == "stripes":
        img = _paint(_pattern("stripes", yy, xx, spec.period), spec.color, spec.color2)
        mask, depth = ones, ramp_x
    elif g == "dots":
        on = _pattern("dots", yy, xx, spec.period)
        img, mask, depth = _paint(on, spec.color, spec.color2), on.astype(np.float64), ramp_y
    elif g == "gradient":
        c1 = np.asarray(spec.color)[:, None, None]
        c2 = np.asarray(spec.color2)[:, None, None]
        img, mask, depth = c2 + (c1 - c2) * ramp_x[None], ones, 1.0 - ramp_x
    else:  # blob
        r2 = (yy - spec.center[0]) ** 2 + (xx - spec.center[1]) ** 2
        disk = r2 < spec.radius**2
        inner = _paint(_pattern(spec.fill, yy, xx, spec.period), spec.color, spec.fill_color)
        img = np.where(disk[None], inner, np.asarray(spec.color2)[:, None, None])
        mask = disk.astype(np.float64)
        rad = spec.radius if spec.radius > 0 else 1.0
        depth = np.where(disk, 0.5 + 0.5 * np.sqrt(np.clip(1.0 - r2 / rad**2, 0.0, 1.0)), 0.2)
    if spec.noise > 0:
        img = img + spec.noise * RngState(seed).normal(img.shape)
    return quantize(img), quantize(mask), quantize(depth)


def _color(rng):
    return tuple(float(c) for c in quantize(rng.uniform(3)))


def random_transfer_scenes(seed: int, size: int = 16) -> tuple[SceneSpec, SceneSpec]:
    """A (source, reference) pair: a flat-coloured blob and a textured blob."""
    rng = RngState(seed).fork(0x5CE9E)
    u = rng.uniform(8)
    half = (size - 1) / 2.0
    src = SceneSpec(
        "blob", (size, size), color=_color(rng), color2=_color(rng),
        center=(half + (u[0] - 0.5) * 3, half + (u[1] - 0.5) * 3), radius=4.0 + 2.0 * u[2],
    )
    ref = SceneSpec(
        "blob", (size, size), color=_color(rng), color2=_color(rng),
        center=(half + (u[3] - 0.5) * 3, half + (u[4] - 0.5) * 3), radius=4.0 + 2.0 * u[5],
        fill="stripes" if u[6] < 0.5 else "dots", fill_color=_color(rng), period=4,
    )
    return src, ref


def with_params(spec: SceneSpec, **kw) -> SceneSpec:
    return replace(spec, **kw)
