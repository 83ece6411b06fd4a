"""Fusion quality metrics: EN, SD, SF, AG, VIF, Qabf.

All metrics operate on luminance. EN and SD are computed on 8-bit quantized
luminance (round-half-even); SF and AG use unquantized luminance scaled by
255 to match the magnitudes conventionally reported for these metrics. VIF
is the pixel-domain variant over four Gaussian pyramid scales with noise
variance 2 on the 0..255 scale, summed over the two sources. Qabf is the
edge preservation measure built from Sobel strength/orientation agreement.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate
from scipy.signal import convolve2d

from .core import ContractError, Image, ImagePair, luminance

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()

# Edge preservation sigmoid constants (strength then orientation).
QABF_GAMMA_G = 0.9994
QABF_KAPPA_G = -15.0
QABF_SIGMA_G = 0.5
QABF_GAMMA_A = 0.9879
QABF_KAPPA_A = -22.0
QABF_SIGMA_A = 0.8

VIF_NOISE_VAR = 2.0
VIF_MIN_SIDE = 32


@dataclass(frozen=True)
class MetricsReport:
    """The six fusion metrics for one fused image against its source pair."""

    en: float
    sd: float
    sf: float
    ag: float
    vif: float
    qabf: float

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @staticmethod
    def columns() -> tuple[str, ...]:
        return tuple(f.name for f in fields(MetricsReport))


def quantize_8bit(gray: np.ndarray) -> np.ndarray:
    """[0, 1] luminance to integer levels 0..255 (round-half-even)."""
    return np.round(gray * 255.0).astype(np.int64)


def entropy(img: Image) -> float:
    """Shannon entropy in bits of the 256-level luminance histogram."""
    levels = quantize_8bit(luminance(img))
    counts = np.bincount(levels.ravel(), minlength=256)
    p = counts[counts > 0] / levels.size
    return float(-(p * np.log2(p)).sum())


def std_dev(img: Image) -> float:
    """Population standard deviation of 8-bit quantized luminance."""
    return float(np.std(quantize_8bit(luminance(img)).astype(np.float64)))


def spatial_frequency(img: Image) -> float:
    """sqrt(RF^2 + CF^2) from neighbor differences of 0..255-scaled luminance."""
    g = luminance(img) * 255.0
    rf_sq = np.mean(np.diff(g, axis=0) ** 2) if g.shape[0] > 1 else 0.0
    cf_sq = np.mean(np.diff(g, axis=1) ** 2) if g.shape[1] > 1 else 0.0
    return float(np.sqrt(rf_sq + cf_sq))


def average_gradient(img: Image) -> float:
    """Mean of sqrt((dx^2 + dy^2) / 2) over forward differences, 0..255 scale."""
    g = luminance(img) * 255.0
    dx = g[:-1, 1:] - g[:-1, :-1]
    dy = g[1:, :-1] - g[:-1, :-1]
    return float(np.mean(np.sqrt((dx**2 + dy**2) / 2.0)))


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _vif_single(ref: np.ndarray, dist: np.ndarray, noise_var: float = VIF_NOISE_VAR) -> float:
    """Pixel-domain visual information fidelity of `dist` against `ref`."""
    eps = 1e-10
    num = 0.0
    den = 0.0
    for scale in range(1, 5):
        size = 2 ** (4 - scale + 1) + 1
        win = _gaussian_kernel(size, size / 5.0)
        if scale > 1:
            ref = convolve2d(ref, win, mode="valid")[::2, ::2]
            dist = convolve2d(dist, win, mode="valid")[::2, ::2]
        if min(ref.shape) < size:
            continue
        mu1 = convolve2d(ref, win, mode="valid")
        mu2 = convolve2d(dist, win, mode="valid")
        mu1_sq, mu2_sq, mu1_mu2 = mu1 * mu1, mu2 * mu2, mu1 * mu2
        sigma1_sq = convolve2d(ref * ref, win, mode="valid") - mu1_sq
        sigma2_sq = convolve2d(dist * dist, win, mode="valid") - mu2_sq
        sigma12 = convolve2d(ref * dist, win, mode="valid") - mu1_mu2
        sigma1_sq = np.maximum(sigma1_sq, 0.0)
        sigma2_sq = np.maximum(sigma2_sq, 0.0)

        g = sigma12 / (sigma1_sq + eps)
        sv_sq = sigma2_sq - g * sigma12
        g[sigma1_sq < eps] = 0.0
        sv_sq[sigma1_sq < eps] = sigma2_sq[sigma1_sq < eps]
        sigma1_sq = np.where(sigma1_sq < eps, 0.0, sigma1_sq)
        sv_sq[sigma2_sq < eps] = 0.0
        g[sigma2_sq < eps] = 0.0
        sv_sq[g < 0.0] = sigma2_sq[g < 0.0]
        g[g < 0.0] = 0.0
        sv_sq = np.maximum(sv_sq, eps)

        num += np.sum(np.log10(1.0 + g * g * sigma1_sq / (sv_sq + noise_var)))
        den += np.sum(np.log10(1.0 + sigma1_sq / noise_var))
    if den == 0.0:
        return 0.0
    return float(num / den)


def vif(fused: Image, src_a: Image, src_b: Image) -> float:
    """Sum of single-reference VIF against each source; identity scores 2."""
    if min(fused.height, fused.width) < VIF_MIN_SIDE:
        raise ContractError(f"VIF requires images of at least {VIF_MIN_SIDE}px per side")
    dist = luminance(fused) * 255.0
    total = 0.0
    for src in (src_a, src_b):
        if src.shape[:2] != fused.shape[:2]:
            raise ContractError("VIF inputs must share dimensions")
        total += _vif_single(luminance(src) * 255.0, dist)
    return total


def _sobel_edges(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Edge strength and orientation via 3x3 Sobel correlation.

    Replicate padding, so constant images carry no edges anywhere (the
    degenerate all-flat case then scores 0 by the zero-total-weight rule).
    """
    gx = correlate(gray, SOBEL_X, mode="nearest")
    gy = correlate(gray, SOBEL_Y, mode="nearest")
    strength = np.hypot(gx, gy)
    safe_gx = np.where(gx == 0.0, 1.0, gx)
    orientation = np.where(gx == 0.0, np.pi / 2.0, np.arctan(gy / safe_gx))
    return strength, orientation


def _edge_preservation(g_src, a_src, g_fused, a_fused) -> np.ndarray:
    hi = np.maximum(g_src, g_fused)
    lo = np.minimum(g_src, g_fused)
    rel_strength = np.divide(lo, hi, out=np.zeros_like(hi), where=hi > 0.0)
    rel_orient = 1.0 - np.abs(a_src - a_fused) / (np.pi / 2.0)
    q_g = QABF_GAMMA_G / (1.0 + np.exp(QABF_KAPPA_G * (rel_strength - QABF_SIGMA_G)))
    q_a = QABF_GAMMA_A / (1.0 + np.exp(QABF_KAPPA_A * (rel_orient - QABF_SIGMA_A)))
    return q_g * q_a


def qabf(fused: Image, src_a: Image, src_b: Image) -> float:
    """Edge information transfer from the sources into the fused image.

    Per-pixel preservation scores are weighted by the source edge strengths;
    if neither source has any edges the score is 0 by convention.
    """
    if src_a.shape[:2] != fused.shape[:2] or src_b.shape[:2] != fused.shape[:2]:
        raise ContractError("Qabf inputs must share dimensions")
    gf, af = _sobel_edges(luminance(fused) * 255.0)
    ga, aa = _sobel_edges(luminance(src_a) * 255.0)
    gb, ab = _sobel_edges(luminance(src_b) * 255.0)
    q_af = _edge_preservation(ga, aa, gf, af)
    q_bf = _edge_preservation(gb, ab, gf, af)
    weight_total = float(np.sum(ga + gb))
    if weight_total == 0.0:
        return 0.0
    return float(np.sum(q_af * ga + q_bf * gb) / weight_total)


def evaluate(fused: Image, pair: ImagePair) -> MetricsReport:
    """All six metrics for one fused image against its source pair."""
    if fused.shape[:2] != pair.shape[:2]:
        raise ContractError("fused image and source pair must share dimensions")
    return MetricsReport(
        en=entropy(fused),
        sd=std_dev(fused),
        sf=spatial_frequency(fused),
        ag=average_gradient(fused),
        vif=vif(fused, pair.a, pair.b),
        qabf=qabf(fused, pair.a, pair.b),
    )


def mean_report(reports: list[MetricsReport]) -> MetricsReport:
    if not reports:
        raise ContractError("cannot average an empty report list")
    cols = MetricsReport.columns()
    return MetricsReport(**{c: float(np.mean([getattr(r, c) for r in reports])) for c in cols})


def write_reports_csv(rows: list[tuple[str, MetricsReport]], path: str | Path) -> None:
    """CSV with header image,en,sd,sf,ag,vif,qabf and a final MEAN row."""
    cols = MetricsReport.columns()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("image",) + cols)
        for name, report in rows:
            writer.writerow([name] + [repr(getattr(report, c)) for c in cols])
        if rows:
            mean = mean_report([r for _, r in rows])
            writer.writerow(["MEAN"] + [repr(getattr(mean, c)) for c in cols])


def write_reports_json(rows: list[tuple[str, MetricsReport]], path: str | Path) -> None:
    payload = {name: report.as_dict() for name, report in rows}
    if rows:
        payload["MEAN"] = mean_report([r for _, r in rows]).as_dict()
    Path(path).write_text(json.dumps(payload, indent=2), encoding="utf-8")
