"""Core domain types and elementary pixel operations.

All images travel through the pipeline as float arrays in [0, 1] with shape
(H, W, C), C in {1, 3}. Metrics that conventionally report on the 0..255
scale rescale at the metric boundary, not here. Types are immutable after
construction and safe to share across threads.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image as PILImage


class MtifError(Exception):
    """Base class for all package errors."""


class ContractError(MtifError):
    """An operation was called with arguments violating its contract."""


class ConfigError(MtifError):
    """Configuration file is malformed or violates an invariant."""


class FormatError(MtifError):
    """Image file has an unsupported encoding or bit depth."""


class SchemaError(MtifError):
    """A sidecar file does not match its documented schema."""


LUMA_WEIGHTS = (0.299, 0.587, 0.114)  # BT.601

MIN_SIDE = 8


@dataclass(frozen=True)
class Image:
    """A dense (H, W, C) pixel array in [0, 1], C in {1, 3}."""

    pixels: np.ndarray
    color_space: str = "RGB"

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ContractError(f"expected (H, W, C) with C in {{1, 3}}, got shape {px.shape}")
        if px.shape[0] < MIN_SIDE or px.shape[1] < MIN_SIDE:
            raise ContractError(f"image sides must be >= {MIN_SIDE}, got {px.shape[:2]}")
        if not np.all(np.isfinite(px)):
            raise ContractError("image contains non-finite values")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ContractError("pixel values must lie in [0, 1]")
        expected = "GRAY" if px.shape[2] == 1 else "RGB"
        if self.color_space not in ("RGB", "GRAY"):
            raise ContractError(f"unknown color space {self.color_space!r}")
        if self.color_space != expected:
            raise ContractError(f"color space {self.color_space!r} inconsistent with C={px.shape[2]}")
        px = px.copy()
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class ImagePair:
    """Two aligned images of identical dimensions."""

    a: Image
    b: Image

    def __post_init__(self) -> None:
        if self.a.shape != self.b.shape:
            raise ContractError(f"pair shapes differ: {self.a.shape} vs {self.b.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.a.shape


def load_image(path: str | Path) -> Image:
    """Load an 8-bit PNG/JPEG as an Image scaled to [0, 1], channel order RGB."""
    path = Path(path)
    with PILImage.open(path) as im:
        if im.mode in ("I", "I;16", "I;16B", "I;16L", "I;16N", "F"):
            raise FormatError(f"{path}: unsupported bit depth (mode {im.mode})")
        if im.mode in ("RGBA", "P", "CMYK", "YCbCr"):
            im = im.convert("RGB")
        elif im.mode == "LA":
            im = im.convert("L")
        if im.mode not in ("L", "RGB"):
            raise FormatError(f"{path}: unsupported mode {im.mode}")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    space = "GRAY" if arr.ndim == 2 else "RGB"
    return Image(arr, space)


def save_image(img: Image, path: str | Path) -> None:
    """Write an Image as an 8-bit PNG/JPEG (by extension); quantizes with rounding."""
    arr = np.round(img.pixels * 255.0).astype(np.uint8)
    if arr.shape[2] == 1:
        pil = PILImage.fromarray(arr[:, :, 0], mode="L")
    else:
        pil = PILImage.fromarray(arr, mode="RGB")
    pil.save(Path(path))


def to_grayscale(img: Image) -> Image:
    """BT.601 luminance; single-channel input is returned unchanged."""
    if img.channels == 1:
        return img
    r, g, b = LUMA_WEIGHTS
    lum = r * img.pixels[:, :, 0] + g * img.pixels[:, :, 1] + b * img.pixels[:, :, 2]
    return Image(np.clip(lum, 0.0, 1.0)[:, :, None], "GRAY")


def luminance(img: Image) -> np.ndarray:
    """Grayscale pixel plane as a 2-D array in [0, 1]."""
    return to_grayscale(img).pixels[:, :, 0]


def elementwise_max(pair: ImagePair) -> Image:
    """Per-element maximum of the two images."""
    return Image(np.maximum(pair.a.pixels, pair.b.pixels), pair.a.color_space)


_TASKS = ("MEF", "MFF")
_TASK_DEFAULTS = {
    "MEF": {"beta2": 100.0, "epochs": 100},
    "MFF": {"beta2": 300.0, "epochs": 45},
}


@dataclass(frozen=True)
class Config:
    """Training and pipeline configuration with per-task defaults.

    Omitted `beta2`/`epochs` resolve per task: MEF uses loss weights
    {10, 1, 1, 100} and 100 epochs, MFF uses {10, 1, 1, 300} and 45 epochs.
    """

    task: str = "MEF"
    alpha1: float = 10.0
    alpha2: float = 1.0
    beta1: float = 1.0
    beta2: float | None = None
    levels: int = 3
    variants: int = 5
    learning_rate: float = 8e-5
    lr_min: float = 1e-6
    epochs: int | None = None
    batch_pairs: int = 2
    crop_size: int = 64
    channel_widths: tuple[int, ...] = (32, 64, 128)
    embed_dim: int = 256
    heads: int = 4
    use_tg: bool = True
    use_ml: bool = True
    use_ve: bool = True
    ve_mode: str = "saliency"
    tgvm_mode: str = "visual_query"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.task not in _TASKS:
            raise ConfigError(f"task must be one of {_TASKS}, got {self.task!r}")
        if self.beta2 is None:
            object.__setattr__(self, "beta2", _TASK_DEFAULTS[self.task]["beta2"])
        if self.epochs is None:
            object.__setattr__(self, "epochs", _TASK_DEFAULTS[self.task]["epochs"])
        object.__setattr__(self, "channel_widths", tuple(int(w) for w in self.channel_widths))
        for name in ("alpha1", "alpha2", "beta1", "beta2"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be nonnegative")
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if self.variants < 1:
            raise ConfigError("variants must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.lr_min < 0 or self.lr_min > self.learning_rate:
            raise ConfigError("lr_min must lie in [0, learning_rate]")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_pairs < 1:
            raise ConfigError("batch_pairs must be >= 1")
        if self.crop_size < 32 or self.crop_size % 2 != 0:
            raise ConfigError("crop_size must be even and >= 32")
        if len(self.channel_widths) != self.levels:
            raise ConfigError("channel_widths must list one width per level")
        if self.heads < 1 or any(w % self.heads != 0 for w in self.channel_widths):
            raise ConfigError("heads must divide every channel width")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be >= 1")
        if self.ve_mode not in ("saliency", "random"):
            raise ConfigError(f"ve_mode must be 'saliency' or 'random', got {self.ve_mode!r}")
        if self.tgvm_mode not in ("visual_query", "text_query"):
            raise ConfigError(f"tgvm_mode must be 'visual_query' or 'text_query', got {self.tgvm_mode!r}")

    def with_overrides(self, **kwargs) -> "Config":
        return replace(self, **kwargs)


_BOOL_KEYS = {"use_tg", "use_ml", "use_ve"}
_INT_KEYS = {"levels", "variants", "epochs", "batch_pairs", "crop_size", "embed_dim", "heads", "seed"}
_FLOAT_KEYS = {"alpha1", "alpha2", "beta1", "beta2", "learning_rate", "lr_min"}
_STR_KEYS = {"task", "ve_mode", "tgvm_mode"}
_LIST_KEYS = {"channel_widths"}
_ALL_KEYS = _BOOL_KEYS | _INT_KEYS | _FLOAT_KEYS | _STR_KEYS | _LIST_KEYS


def _parse_value(key: str, raw: str):
    try:
        if key in _BOOL_KEYS:
            lowered = raw.strip().lower()
            if lowered in ("true", "yes", "on", "1"):
                return True
            if lowered in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
        if key in _LIST_KEYS:
            return tuple(int(part) for part in raw.replace(",", " ").split())
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"cannot parse {key} = {raw!r}") from exc


def load_config(path: str | Path, task: str | None = None) -> Config:
    """Parse a key = value config file with optional [mef]/[mff] override sections.

    Sections: [run] holds common settings, [mef]/[mff] hold per-task overrides
    applied when that task is selected. `task` argument wins over the file.
    Unknown sections or keys raise ConfigError. An empty file yields the
    per-task defaults.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    for section in parser.sections():
        if section not in ("run", "mef", "mff"):
            raise ConfigError(f"{path}: unknown section [{section}]")

    def section_items(name: str) -> dict:
        if not parser.has_section(name):
            return {}
        out = {}
        for key, raw in parser.items(name):
            if key not in _ALL_KEYS:
                raise ConfigError(f"{path}: unknown key {key!r} in [{name}]")
            out[key] = _parse_value(key, raw)
        return out

    run = section_items("run")
    resolved_task = task or run.pop("task", None) or "MEF"
    if resolved_task not in _TASKS:
        raise ConfigError(f"task must be one of {_TASKS}, got {resolved_task!r}")
    overrides = dict(run)
    per_task = section_items(resolved_task.lower())
    per_task.pop("task", None)
    overrides.update(per_task)
    return Config(task=resolved_task, **overrides)
