"""Mask-weighted appearance encoding.

Each reference patch embedding is scaled by ``w_j = eps + (1 - eps) * coverage_j``
before anything mixes patches, so patches outside the foreground mask reach
the model only at the floor weight ``eps``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dit import ConditionBundle, ModelWeights, patchify
from .errors import DimensionError, RangeError

DEFAULT_EPS = 0.05
DEFAULT_TAU = 0.5


@dataclass
class Mask:
    values: np.ndarray
    role: str = "source_edit_region"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DimensionError(f"mask must be 2-D, got {self.values.shape}")
        if self.values.size and (self.values.min() < 0.0 or self.values.max() > 1.0):
            raise RangeError("mask values must lie in [0, 1]")

    @property
    def empty(self) -> bool:
        return not np.any(self.values > 0)

    def require_nonempty(self) -> "Mask":
        if self.empty:
            raise RangeError(f"{self.role} mask is empty")
        return self


def _values(mask) -> np.ndarray:
    return mask.values if isinstance(mask, Mask) else np.asarray(mask, dtype=np.float64)


@dataclass
class PatchWeights:
    w: np.ndarray
    coverage: np.ndarray
    eps: float
    grid: tuple[int, int]


def patch_coverage(mask, patch: int, eps: float = DEFAULT_EPS) -> PatchWeights:
    m = _values(mask)
    if m.ndim != 2:
        raise DimensionError(f"mask must be 2-D, got {m.shape}")
    h, w = m.shape
    if h % patch or w % patch:
        raise DimensionError(f"mask {h}x{w} not divisible by patch {patch}")
    if not 0.0 <= eps <= 1.0:
        raise RangeError(f"eps floor {eps} outside [0, 1]")
    cov = m.reshape(h // patch, patch, w // patch, patch).mean(axis=(1, 3)).ravel()
    return PatchWeights(eps + (1.0 - eps) * cov, cov, eps, (h // patch, w // patch))


def token_gate(mask, patch: int, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Per-patch booleans: coverage >= tau."""
    return patch_coverage(mask, patch, 0.0).coverage >= tau


@dataclass
class AppearanceEmbedding:
    tokens: np.ndarray  # (N, d_model)
    pooled: np.ndarray  # (d_model,)
    weights: PatchWeights


def patch_embeddings(image: np.ndarray, weights: ModelWeights) -> np.ndarray:
    """Unweighted patch projections, reusing the model's patch-embed matrix."""
    c = weights.config
    if image.shape != c.latent_shape:
        raise DimensionError(f"image shape {image.shape} does not match model {c.latent_shape}")
    return patchify(image, c.patch) @ weights["embed.w"][: c.content_dim] + weights["embed.b"]


def weighted_embed(image: np.ndarray, mask, weights: ModelWeights,
                   eps: float = DEFAULT_EPS) -> AppearanceEmbedding:
    c = weights.config
    m = _values(mask)
    if m.shape != image.shape[1:]:
        raise DimensionError(f"mask {m.shape} does not match image {image.shape[1:]}")
    pw = patch_coverage(m, c.patch, eps)
    p = patch_embeddings(image, weights)
    tokens = pw.w[:, None] * p
    total = pw.w.sum()
    if total <= 0.0:
        # only reachable with eps = 0 and an empty mask
        raise RangeError("appearance weights sum to zero (empty mask with eps=0)")
    pooled = tokens.sum(axis=0) / total
    return AppearanceEmbedding(tokens, pooled, pw)


def build_condition(c_ref: AppearanceEmbedding | None, depth, region, t: float = 1.0,
                    d_model: int | None = None) -> ConditionBundle:
    depth = np.asarray(depth, dtype=np.float64)
    region = _values(region)
    if depth.shape != region.shape:
        raise DimensionError(f"depth {depth.shape} and region {region.shape} geometry differ")
    if c_ref is None:
        if d_model is None:
            raise ValueError("d_model is required when there are no appearance tokens")
        tokens = np.zeros((0, d_model))
    else:
        tokens = c_ref.tokens
    return ConditionBundle(depth, region, tokens, float(t))
