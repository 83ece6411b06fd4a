"""Saliency-driven visual enrichment.

One source pair becomes N aligned crop pairs: a crop around the strongest
saliency response plus peripheral crops pushed outward along the four
diagonals. The default saliency provider is training-free spectral-residual
saliency on luminance; precomputed maps can be loaded from sidecar files.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import gaussian_filter, uniform_filter

from .core import Config, ContractError, Image, ImagePair, luminance, load_image


@dataclass(frozen=True)
class SaliencyMap:
    """Per-pixel saliency in [0, 1], normalized so the max is 1 unless all zero."""

    values: np.ndarray

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise ContractError(f"saliency map must be 2-D, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ContractError("saliency map contains non-finite values")
        if vals.min() < 0.0 or vals.max() > 1.0:
            raise ContractError("saliency values must lie in [0, 1]")
        vals = vals.copy()
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class CropWindow:
    """A size x size square window at (top, left), fully inside the image."""

    top: int
    left: int
    size: int

    def slices(self) -> tuple[slice, slice]:
        return slice(self.top, self.top + self.size), slice(self.left, self.left + self.size)


@dataclass(frozen=True)
class EnrichedPairSet:
    """N aligned crop pairs plus the windows they were read from."""

    variants: tuple[ImagePair, ...]
    windows: tuple[CropWindow, ...]

    def __post_init__(self) -> None:
        if len(self.variants) != len(self.windows):
            raise ContractError("variants and windows must have equal length")

    def __len__(self) -> int:
        return len(self.variants)


def compute_saliency(img: Image, smooth_sigma: float = 2.5) -> SaliencyMap:
    """Spectral-residual saliency of the luminance plane.

    The residual of the log amplitude spectrum against its 3x3 local average
    is transformed back to image space, squared, and Gaussian smoothed. The
    result is scaled to max 1; a constant image yields an all-zero map.
    """
    lum = luminance(img)
    if lum.max() == lum.min():
        return SaliencyMap(np.zeros_like(lum))
    spectrum = np.fft.fft2(lum)
    amplitude = np.abs(spectrum)
    phase = np.angle(spectrum)
    # Floor relative to the mean amplitude: synthetic images have exact
    # spectral nulls whose log would otherwise dominate the residual.
    log_amp = np.log(amplitude + 1e-2 * amplitude.mean())
    residual = log_amp - uniform_filter(log_amp, size=3, mode="wrap")
    raw = np.abs(np.fft.ifft2(np.exp(residual + 1j * phase))) ** 2
    raw = gaussian_filter(raw, sigma=smooth_sigma)
    peak = raw.max()
    if peak <= 0.0:
        return SaliencyMap(np.zeros_like(raw))
    return SaliencyMap(raw / peak)


def load_saliency_map(path: str | Path, expected_shape: tuple[int, int]) -> SaliencyMap:
    """Read a precomputed 8-bit grayscale saliency sidecar and renormalize it."""
    img = load_image(path)
    vals = luminance(img)
    if vals.shape != tuple(expected_shape):
        raise ContractError(
            f"saliency map shape {vals.shape} does not match image shape {tuple(expected_shape)}"
        )
    peak = vals.max()
    if peak > 0.0:
        vals = vals / peak
    return SaliencyMap(vals)


def window_sums(values: np.ndarray, size: int) -> np.ndarray:
    """Sum of every size x size window; entry (t, l) covers rows/cols [t, t+size)."""
    return sliding_window_view(values, (size, size)).sum(axis=(2, 3))


def select_center_window(saliency: SaliencyMap, size: int) -> CropWindow:
    """Window maximizing total saliency, ties broken by smallest top then left."""
    h, w = saliency.shape
    if size > min(h, w):
        raise ContractError(f"window size {size} exceeds map dimensions {saliency.shape}")
    sums = window_sums(saliency.values, size)
    flat = int(np.argmax(sums))  # row-major argmax = lexicographic (top, left) tie-break
    top, left = divmod(flat, sums.shape[1])
    return CropWindow(top, left, size)


def _clamp_window(top: int, left: int, size: int, h: int, w: int) -> CropWindow:
    return CropWindow(int(np.clip(top, 0, h - size)), int(np.clip(left, 0, w - size)), size)


def _crop_pair(pair: ImagePair, win: CropWindow) -> ImagePair:
    rs, cs = win.slices()
    return ImagePair(
        Image(pair.a.pixels[rs, cs], pair.a.color_space),
        Image(pair.b.pixels[rs, cs], pair.b.color_space),
    )


# Peripheral offsets in fixed order: up-left, up-right, down-left, down-right.
_DIAGONALS = ((-1, -1), (-1, 1), (1, -1), (1, 1))


def center_periphery_partition(
    pair: ImagePair,
    saliency: SaliencyMap | None,
    cfg: Config,
    rng: np.random.Generator | None = None,
) -> EnrichedPairSet:
    """Produce cfg.variants aligned crop pairs from one source pair.

    Saliency mode places variant 1 on the max-saliency window and variants
    2..N half a crop outward along the diagonals, clamped into bounds
    (at most 5 windows). Random mode draws all N windows uniformly from the
    valid placements using `rng` (defaults to a generator seeded with
    cfg.seed). The same window is applied to both images of the pair.
    """
    h, w, _ = pair.shape
    size = cfg.crop_size
    n = cfg.variants
    if size > min(h, w):
        raise ContractError(f"crop_size {size} exceeds image dimensions ({h}, {w})")

    if cfg.ve_mode == "random":
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        tops = rng.integers(0, h - size + 1, size=n)
        lefts = rng.integers(0, w - size + 1, size=n)
        windows = tuple(CropWindow(int(t), int(l), size) for t, l in zip(tops, lefts))
    else:
        if n > len(_DIAGONALS) + 1:
            raise ContractError(f"saliency mode supports at most 5 variants, got {n}")
        if n >= 2 and size > min(h, w) // 2:
            raise ContractError(
                f"crop_size {size} must be at most min(H, W)/2 for peripheral windows"
            )
        if saliency is None:
            raise ContractError("saliency mode requires a saliency map")
        if saliency.shape != (h, w):
            raise ContractError(
                f"saliency shape {saliency.shape} does not match image shape ({h}, {w})"
            )
        center = select_center_window(saliency, size)
        offset = size // 2
        windows = [center]
        for dr, dc in _DIAGONALS[: n - 1]:
            windows.append(_clamp_window(center.top + dr * offset, center.left + dc * offset, size, h, w))
        windows = tuple(windows)

    variants = tuple(_crop_pair(pair, win) for win in windows)
    return EnrichedPairSet(variants, windows)
