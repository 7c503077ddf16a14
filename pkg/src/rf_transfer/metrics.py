"""Desk-scale transfer metrics (simple image statistics, no learned models)."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .dit import patchify
from .errors import DimensionError

VAR_BINS = np.linspace(0.0, 0.25, 17)  # pixel variance of [0, 1] data is at most 1/4


@dataclass
class MetricsReport:
    recon_err: float
    masked_err_out: float | None
    masked_err_in: float | None
    mean_color_dist: float | None
    patch_var_dist: float | None

    def to_dict(self) -> dict:
        return asdict(self)


def masked_mean_color(image, mask):
    wsum = mask.sum()
    if wsum <= 0:
        return None
    return (image * mask[None]).reshape(image.shape[0], -1).sum(axis=1) / wsum


def masked_mse(a, b, weight):
    wsum = weight.sum()
    if wsum <= 0:
        return None
    return float(((a - b) ** 2 * weight[None]).sum() / (a.shape[0] * wsum))


def _patch_variances(image, mask, patch, tau):
    tokens = patchify(image, patch)
    cov = patchify(mask[None], patch).mean(axis=1)
    return tokens[cov >= tau].var(axis=1)


def _var_hist(v):
    hist, _ = np.histogram(np.clip(v, 0.0, 0.25), bins=VAR_BINS)
    return hist / hist.sum()


def compute_metrics(output, source, reference, m_src, m_ref, patch: int = 2,
                    tau: float = 0.5) -> MetricsReport:
    for name, arr in (("source", source), ("reference", reference)):
        if arr.shape != output.shape:
            raise DimensionError(f"{name} shape {arr.shape} differs from output {output.shape}")
    if m_src.shape != output.shape[1:] or m_ref.shape != output.shape[1:]:
        raise DimensionError("mask geometry differs from image geometry")
    den = float(np.linalg.norm(source))
    diff = float(np.linalg.norm(output - source))
    recon = diff / den if den > 0 else diff

    mc_out = masked_mean_color(output, m_src)
    mc_ref = masked_mean_color(reference, m_ref)
    color = None if mc_out is None or mc_ref is None else float(np.linalg.norm(mc_out - mc_ref))

    v_out = _patch_variances(output, m_src, patch, tau)
    v_ref = _patch_variances(reference, m_ref, patch, tau)
    pvd = None
    if len(v_out) and len(v_ref):
        pvd = float(0.5 * np.abs(_var_hist(v_out) - _var_hist(v_ref)).sum())

    return MetricsReport(
        recon_err=recon,
        masked_err_out=masked_mse(output, source, 1.0 - m_src),
        masked_err_in=masked_mse(output, source, m_src),
        mean_color_dist=color,
        patch_var_dist=pvd,
    )
