"""Multi-grained textual descriptions and their embeddings.

Descriptions are ingested from offline sidecar caches (one per source pair)
with exactly three grains: detail, structure, semantic. Grain l feeds level l
of the fusion network, in that order. Encoding is pluggable: a deterministic
hash-based stub keeps tests hermetic, or precomputed embedding files supply
features from a real text encoder.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import ContractError, SchemaError

GRAIN_NAMES = ("detail", "structure", "semantic")

STUB_TOKEN_CAP = 32


@dataclass(frozen=True)
class GrainedDescriptions:
    """Three non-empty descriptions of one pair, coarse to fine semantics."""

    detail: str
    structure: str
    semantic: str

    def __post_init__(self) -> None:
        for name in GRAIN_NAMES:
            value = getattr(self, name)
            if not isinstance(value, str) or not value.strip():
                raise SchemaError(f"description grain {name!r} must be a non-empty string")

    def grains(self) -> tuple[str, str, str]:
        return (self.detail, self.structure, self.semantic)


@dataclass(frozen=True)
class TextFeatureSet:
    """One embedding matrix (tokens x width) per granularity level."""

    levels: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        if len(self.levels) < 1:
            raise ContractError("feature set must contain at least one level")
        frozen = []
        for i, mat in enumerate(self.levels):
            arr = np.asarray(mat)
            if arr.ndim != 2 or arr.shape[0] < 1:
                raise ContractError(f"level {i + 1} embedding must be (tokens >= 1, width)")
            if not np.all(np.isfinite(arr)):
                raise ContractError(f"level {i + 1} embedding contains non-finite values")
            arr = arr.copy()
            arr.flags.writeable = False
            frozen.append(arr)
        widths = {arr.shape[1] for arr in frozen}
        if len(widths) != 1:
            raise ContractError(f"all levels must share one embedding width, got {sorted(widths)}")
        object.__setattr__(self, "levels", tuple(frozen))

    @property
    def width(self) -> int:
        return self.levels[0].shape[1]

    def __len__(self) -> int:
        return len(self.levels)


def load_description_cache(path: str | Path) -> GrainedDescriptions:
    """Read a `<pair-stem>.text.json` sidecar holding the three grains."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"description cache not found: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(payload, dict):
        raise SchemaError(f"{path}: expected a JSON object")
    missing = [k for k in GRAIN_NAMES if k not in payload]
    if missing:
        raise SchemaError(f"{path}: missing keys {missing}")
    extra = [k for k in payload if k not in GRAIN_NAMES]
    if extra:
        raise SchemaError(f"{path}: unknown keys {extra}")
    try:
        return GrainedDescriptions(**{k: payload[k] for k in GRAIN_NAMES})
    except SchemaError as exc:
        raise SchemaError(f"{path}: {exc}") from exc


def save_description_cache(desc: GrainedDescriptions, path: str | Path) -> None:
    payload = {name: getattr(desc, name) for name in GRAIN_NAMES}
    Path(path).write_text(json.dumps(payload, ensure_ascii=False, indent=2), encoding="utf-8")


def stub_embed(text: str, embed_dim: int, seed: int) -> np.ndarray:
    """Deterministic stand-in embedding: one unit-norm row per token.

    Tokens are whitespace-split words capped at 32. Each row is drawn from a
    generator seeded by a stable hash of (seed, token), so identical tokens
    embed identically across runs and platforms.
    """
    tokens = text.split()
    if not tokens:
        raise ContractError("cannot embed empty text")
    tokens = tokens[:STUB_TOKEN_CAP]
    rows = np.empty((len(tokens), embed_dim), dtype=np.float64)
    for i, token in enumerate(tokens):
        digest = hashlib.sha256(f"{seed}|{token}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        vec = rng.standard_normal(embed_dim)
        rows[i] = vec / np.linalg.norm(vec)
    return rows


@dataclass(frozen=True)
class StubTextEncoder:
    """Hermetic hash-based encoder producing embed_dim-wide features."""

    embed_dim: int = 256
    seed: int = 0

    name = "stub"

    def encode(self, desc: GrainedDescriptions) -> TextFeatureSet:
        return TextFeatureSet(tuple(stub_embed(g, self.embed_dim, self.seed) for g in desc.grains()))


EMBED_ARRAY_KEYS = ("level1", "level2", "level3")


@dataclass(frozen=True)
class PrecomputedTextEncoder:
    """Loads per-pair embedding sidecars written by `save_embeddings`."""

    path: Path

    name = "precomputed"

    def encode(self, desc: GrainedDescriptions) -> TextFeatureSet:
        path = Path(self.path)
        if not path.exists():
            raise FileNotFoundError(f"embedding sidecar not found: {path}")
        with np.load(path) as data:
            missing = [k for k in EMBED_ARRAY_KEYS if k not in data]
            if missing:
                raise SchemaError(f"{path}: missing arrays {missing}")
            return TextFeatureSet(tuple(data[k] for k in EMBED_ARRAY_KEYS))


def save_embeddings(features: TextFeatureSet, path: str | Path) -> None:
    """Write a `<pair-stem>.emb.npz` sidecar; round-trips bit-exactly."""
    if len(features) != len(EMBED_ARRAY_KEYS):
        raise ContractError(f"expected {len(EMBED_ARRAY_KEYS)} levels, got {len(features)}")
    arrays = {k: features.levels[i].astype(np.float32) for i, k in enumerate(EMBED_ARRAY_KEYS)}
    np.savez(Path(path), **arrays)


def encode_text(desc: GrainedDescriptions, provider) -> TextFeatureSet:
    """Encode the three grains into per-level matrices; grain l maps to level l."""
    features = provider.encode(desc)
    if len(features) != len(GRAIN_NAMES):
        raise ContractError(f"provider produced {len(features)} levels, expected {len(GRAIN_NAMES)}")
    return features
