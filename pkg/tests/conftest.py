"""Shared fixtures and helpers for the test suite."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from scipy.ndimage import gaussian_filter

from mtif.core import Image, ImagePair, save_image

settings.register_profile(
    "mtif", deadline=None, max_examples=25,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("mtif")


def random_image(rng: np.random.Generator, h: int = 16, w: int = 16, c: int = 1,
                 low: float = 0.0, high: float = 1.0) -> Image:
    px = rng.uniform(low, high, size=(h, w, c))
    return Image(px, "GRAY" if c == 1 else "RGB")


def smooth_image(rng: np.random.Generator, h: int = 64, w: int = 64, c: int = 3,
                 sigma: float = 3.0) -> Image:
    """Natural-ish test image: smoothed noise stretched into [0.05, 0.95]."""
    px = rng.standard_normal((h, w, c))
    for ch in range(c):
        px[:, :, ch] = gaussian_filter(px[:, :, ch], sigma)
    lo, hi = px.min(), px.max()
    px = 0.05 + 0.9 * (px - lo) / (hi - lo)
    return Image(px, "GRAY" if c == 1 else "RGB")


def exposure_pair(rng: np.random.Generator, h: int = 64, w: int = 64, c: int = 3) -> ImagePair:
    """Synthetic under/over-exposed rendition of one smooth scene."""
    scene = smooth_image(rng, h, w, c).pixels
    under = np.clip(scene * 0.45, 0.0, 1.0)
    over = np.clip(0.35 + scene * 0.65, 0.0, 1.0)
    space = "GRAY" if c == 1 else "RGB"
    return ImagePair(Image(under, space), Image(over, space))


def write_toy_dataset(root: Path, n_pairs: int, rng: np.random.Generator,
                      h: int = 64, w: int = 64, c: int = 3) -> Path:
    """Dataset directory in the documented layout, with description caches."""
    root.mkdir(parents=True, exist_ok=True)
    for i in range(n_pairs):
        pair_id = f"pair{i:03d}"
        pair_dir = root / pair_id
        pair_dir.mkdir(exist_ok=True)
        pair = exposure_pair(rng, h, w, c)
        save_image(pair.a, pair_dir / "a.png")
        save_image(pair.b, pair_dir / "b.png")
        (pair_dir / f"{pair_id}.text.json").write_text(json.dumps({
            "detail": f"fine texture and grain of scene {i}",
            "structure": f"layout and shapes of scene {i}",
            "semantic": f"overall content of scene {i}",
        }), encoding="utf-8")
    return root


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion at the end of the run."""
    results = []
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance" in nodeid and getattr(rep, "when", "call") in ("call", "setup"):
                if status != "passed" or rep.when == "call":
                    results.append((nodeid.split("::")[-1], status.upper()))
    if results:
        terminalreporter.write_sep("-", "acceptance criteria")
        for name, status in sorted(set(results)):
            terminalreporter.write_line(f"{name}: {status}")
