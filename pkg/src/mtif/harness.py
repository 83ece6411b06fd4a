"""Dataset ingestion, training loop, checkpointing, inference, evaluation.

Dataset layout: `root/<pair-id>/` holds `a.png`, `b.png`, a
`<pair-id>.text.json` description cache, optionally `a.saliency.png`
(precomputed saliency sidecar) and `<pair-id>.emb.npz` (precomputed text
embeddings). Training is fully seeded: enrichment randomness is derived per
(seed, epoch, pair index), so runs and resumes reproduce exactly. The env
var MTIF_SEED overrides the configured seed.

Each step processes up to `batch_pairs` source pairs; the enriched variants
of one pair always share that pair's step and text features. Checkpoints are
written atomically once per epoch.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

from .core import Config, ContractError, Image, ImagePair, MtifError, load_image
from .enrich import SaliencyMap, center_periphery_partition, compute_saliency, load_saliency_map
from .fusenet import (
    CHECKPOINT_FORMAT,
    CheckpointError,
    FusionNet,
    config_from_dict,
    image_to_tensor,
    load_model_checkpoint,
    tensor_to_image,
    text_to_tensors,
)
from .losses import LossBreakdown, average_breakdowns, total_loss
from .metrics import evaluate, write_reports_csv, write_reports_json
from .textguide import (
    GrainedDescriptions,
    PrecomputedTextEncoder,
    StubTextEncoder,
    TextFeatureSet,
    encode_text,
    load_description_cache,
)

logger = logging.getLogger(__name__)

SEED_ENV_VAR = "MTIF_SEED"

TRAIN_LOG_NAME = "train_log.jsonl"


class ManifestError(MtifError):
    """Dataset directory fails validation in strict mode."""


class TrainingDiverged(MtifError):
    """A training step produced a non-finite loss."""


@dataclass(frozen=True)
class ManifestEntry:
    pair_id: str
    a_path: Path
    b_path: Path
    text_path: Path
    saliency_path: Path | None = None
    embeddings_path: Path | None = None

    def load_pair(self) -> ImagePair:
        return ImagePair(load_image(self.a_path), load_image(self.b_path))


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    task: str
    split: str
    entries: tuple[ManifestEntry, ...]
    problems: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.entries)


def _find_image(directory: Path, stem: str) -> Path | None:
    for ext in (".png", ".jpg", ".jpeg"):
        candidate = directory / f"{stem}{ext}"
        if candidate.exists():
            return candidate
    return None


def _image_size(path: Path) -> tuple[int, int]:
    with PILImage.open(path) as im:
        return im.size  # (W, H)


def build_manifest(root: str | Path, task: str = "MEF", split: str = "train",
                   strict: bool = False) -> DatasetManifest:
    """Scan a dataset directory into a deterministic, lexicographic manifest.

    Pairs failing validation (missing files, mismatched dimensions, broken
    description caches) are excluded and listed in `problems`; strict mode
    raises instead.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    entries: list[ManifestEntry] = []
    problems: list[str] = []
    for pair_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        pair_id = pair_dir.name
        a_path = _find_image(pair_dir, "a")
        b_path = _find_image(pair_dir, "b")
        text_path = pair_dir / f"{pair_id}.text.json"
        if a_path is None or b_path is None:
            problems.append(f"{pair_id}: missing a/b image")
            continue
        if not text_path.exists():
            problems.append(f"{pair_id}: missing description cache {text_path.name}")
            continue
        try:
            if _image_size(a_path) != _image_size(b_path):
                problems.append(f"{pair_id}: pair dimensions differ")
                continue
        except OSError as exc:
            problems.append(f"{pair_id}: unreadable image ({exc})")
            continue
        try:
            load_description_cache(text_path)
        except MtifError as exc:
            problems.append(f"{pair_id}: {exc}")
            continue
        saliency = pair_dir / "a.saliency.png"
        emb = pair_dir / f"{pair_id}.emb.npz"
        entries.append(ManifestEntry(
            pair_id=pair_id,
            a_path=a_path,
            b_path=b_path,
            text_path=text_path,
            saliency_path=saliency if saliency.exists() else None,
            embeddings_path=emb if emb.exists() else None,
        ))
    if not entries:
        problems.append(f"{root}: no valid pairs found")
        logger.warning("dataset %s contains no valid pairs", root)
    if strict and problems and entries:
        raise ManifestError("; ".join(problems))
    if strict and not entries:
        raise ManifestError(f"{root}: no valid pairs found")
    return DatasetManifest(root=root, task=task, split=split,
                           entries=tuple(entries), problems=tuple(problems))


def seed_from_env(cfg: Config) -> Config:
    """Apply the MTIF_SEED env override, if set."""
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None:
        return cfg
    try:
        return cfg.with_overrides(seed=int(raw))
    except ValueError as exc:
        raise ContractError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}") from exc


@dataclass
class TrainState:
    """Everything needed to continue training from where it stopped."""

    model: FusionNet
    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.LRScheduler
    cfg: Config
    epoch: int = 0
    step: int = 0
    loss_history: list[dict] = field(default_factory=list)


def save_train_checkpoint(state: TrainState, path: str | Path) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(state.cfg),
        "architecture": state.model.architecture(),
        "model_state": state.model.state_dict(),
        "optimizer_state": state.optimizer.state_dict(),
        "scheduler_state": state.scheduler.state_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "seed": state.cfg.seed,
        "loss_history": state.loss_history,
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)  # atomic on POSIX


def load_train_checkpoint(path: str | Path) -> TrainState:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    cfg = config_from_dict(payload["config"])
    arch = payload["architecture"]
    model = FusionNet(cfg, in_channels=arch["in_channels"], text_width=arch["text_width"])
    if model.architecture() != arch:
        raise CheckpointError(f"{path}: stored architecture does not match its config")
    model.load_state_dict(payload["model_state"])
    optimizer = _build_optimizer(model, cfg)
    optimizer.load_state_dict(payload["optimizer_state"])
    scheduler = _build_scheduler(optimizer, cfg)
    scheduler.load_state_dict(payload["scheduler_state"])
    return TrainState(
        model=model,
        optimizer=optimizer,
        scheduler=scheduler,
        cfg=cfg,
        epoch=payload["epoch"],
        step=payload["step"],
        loss_history=list(payload["loss_history"]),
    )


def _build_optimizer(model: FusionNet, cfg: Config) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate,
                            betas=(0.9, 0.999), eps=1e-8)


def _build_scheduler(optimizer, cfg: Config):
    return torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=cfg.epochs, eta_min=cfg.lr_min)


def _resize_pair(pair: ImagePair, size: int) -> ImagePair:
    def resize(img: Image) -> Image:
        t = image_to_tensor(img, torch.float64).unsqueeze(0)
        out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
        return tensor_to_image(out.clamp(0.0, 1.0), img.color_space)

    return ImagePair(resize(pair.a), resize(pair.b))


def pair_saliency(pair: ImagePair, saliency_path: Path | None = None) -> SaliencyMap:
    """Sidecar saliency when present, else spectral residual of the pair mean."""
    if saliency_path is not None:
        return load_saliency_map(saliency_path, pair.shape[:2])
    mean = Image((pair.a.pixels + pair.b.pixels) / 2.0, pair.a.color_space)
    return compute_saliency(mean)


def make_training_variants(pair: ImagePair, entry: ManifestEntry, cfg: Config,
                           epoch: int, pair_index: int,
                           saliency: SaliencyMap | None = None) -> list[ImagePair]:
    """Enriched crop pairs for one source pair (or a resized pair without VE)."""
    if not cfg.use_ve:
        return [_resize_pair(pair, cfg.crop_size)]
    if cfg.ve_mode == "random":
        rng = np.random.default_rng([cfg.seed, 0x5EED, epoch, pair_index])
        enriched = center_periphery_partition(pair, None, cfg, rng=rng)
    else:
        if saliency is None:
            saliency = pair_saliency(pair, entry.saliency_path)
        enriched = center_periphery_partition(pair, saliency, cfg)
    return list(enriched.variants)


def _load_text_features(entry: ManifestEntry, cfg: Config) -> TextFeatureSet:
    desc = load_description_cache(entry.text_path)
    if entry.embeddings_path is not None:
        provider = PrecomputedTextEncoder(entry.embeddings_path)
    else:
        provider = StubTextEncoder(embed_dim=cfg.embed_dim, seed=cfg.seed)
    return encode_text(desc, provider)


def _variants_to_tensors(variants: list[ImagePair], dtype) -> tuple[torch.Tensor, torch.Tensor]:
    a = torch.stack([image_to_tensor(v.a, dtype) for v in variants])
    b = torch.stack([image_to_tensor(v.b, dtype) for v in variants])
    return a, b


def train(cfg: Config, manifest: DatasetManifest, out_dir: str | Path,
          resume_from: str | Path | None = None,
          stop_after_epoch: int | None = None,
          val_manifest: DatasetManifest | None = None,
          val_every: int = 5,
          checkpoint_every: int = 1) -> TrainState:
    """Run the seeded training loop, checkpointing once per epoch.

    `stop_after_epoch` ends the run early at an epoch boundary while keeping
    the cosine schedule pinned to cfg.epochs, so a stopped run resumed from
    its checkpoint reproduces an uninterrupted run exactly.
    `checkpoint_every` thins the per-epoch checkpoints for long toy runs;
    the final epoch is always written.
    """
    cfg = seed_from_env(cfg)
    if len(manifest) == 0:
        raise ContractError("manifest is empty; nothing to train on")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    entries = manifest.entries
    text_features = [_load_text_features(e, cfg) for e in entries]
    widths = {tf.width for tf in text_features}
    if len(widths) != 1:
        raise ContractError(f"all pairs must share one text embedding width, got {sorted(widths)}")
    text_width = widths.pop()
    pairs = [e.load_pair() for e in entries]
    channel_counts = {p.shape[2] for p in pairs}
    if len(channel_counts) != 1:
        raise ContractError(f"all pairs must share one channel count, got {sorted(channel_counts)}")
    in_channels = channel_counts.pop()
    saliencies = None
    if cfg.use_ve and cfg.ve_mode == "saliency":
        saliencies = [pair_saliency(p, e.saliency_path) for p, e in zip(pairs, entries)]

    if resume_from is not None:
        state = load_train_checkpoint(resume_from)
        if state.cfg != cfg:
            raise CheckpointError("checkpoint config does not match the requested config")
    else:
        torch.manual_seed(cfg.seed)
        model = FusionNet(cfg, in_channels=in_channels, text_width=text_width)
        optimizer = _build_optimizer(model, cfg)
        state = TrainState(
            model=model,
            optimizer=optimizer,
            scheduler=_build_scheduler(optimizer, cfg),
            cfg=cfg,
        )

    dtype = next(state.model.parameters()).dtype
    last_epoch = cfg.epochs if stop_after_epoch is None else min(cfg.epochs, stop_after_epoch)
    log_path = out_dir / TRAIN_LOG_NAME
    log_mode = "a" if resume_from is not None else "w"

    with open(log_path, log_mode, encoding="utf-8") as log_file:
        for epoch in range(state.epoch, last_epoch):
            order = np.random.default_rng([cfg.seed, 0xC0FFEE, epoch]).permutation(len(entries))
            for start in range(0, len(order), cfg.batch_pairs):
                chunk = order[start:start + cfg.batch_pairs]
                parts: list[LossBreakdown] = []
                batches = []
                for idx in chunk:
                    idx = int(idx)
                    variants = make_training_variants(
                        pairs[idx], entries[idx], cfg, epoch, idx,
                        saliency=None if saliencies is None else saliencies[idx])
                    a, b = _variants_to_tensors(variants, dtype)
                    texts = text_to_tensors(text_features[idx], a.shape[0], dtype)
                    outputs = state.model(a, b, texts)
                    parts.append(total_loss(outputs, a, b, cfg))
                    batches.append((entries[idx].pair_id, a, b))
                breakdown = average_breakdowns(parts)
                if not breakdown.is_finite():
                    dump = out_dir / f"diverged_step_{state.step}.npz"
                    np.savez(dump, **{
                        f"{pid}_{side}": t.detach().cpu().numpy()
                        for pid, a, b in batches for side, t in (("a", a), ("b", b))
                    })
                    raise TrainingDiverged(
                        f"non-finite loss at step {state.step}; offending batch dumped to {dump}")
                state.optimizer.zero_grad()
                breakdown.total.backward()
                state.optimizer.step()
                state.step += 1
                record = {"step": state.step, "epoch": epoch,
                          "lr": state.optimizer.param_groups[0]["lr"], **breakdown.as_dict()}
                log_file.write(json.dumps(record) + "\n")
                state.loss_history.append(record)
            state.scheduler.step()
            state.epoch = epoch + 1
            if state.epoch % checkpoint_every == 0 or state.epoch == last_epoch:
                save_train_checkpoint(state, out_dir / f"checkpoint_epoch_{state.epoch:04d}.pt")
                save_train_checkpoint(state, out_dir / "checkpoint_latest.pt")
            if val_manifest is not None and state.epoch % val_every == 0:
                _validate(state, val_manifest, out_dir)
    return state


def _validate(state: TrainState, val_manifest: DatasetManifest, out_dir: Path) -> None:
    rows = []
    for entry in val_manifest.entries:
        pair = entry.load_pair()
        texts = _load_text_features(entry, state.cfg)
        fused = fuse_with_model(state.model, pair, texts)
        rows.append((entry.pair_id, evaluate(fused, pair)))
    if not rows:
        return
    mean = {k: float(np.mean([r.as_dict()[k] for _, r in rows])) for k in rows[0][1].as_dict()}
    with open(out_dir / "val_metrics.jsonl", "a", encoding="utf-8") as fh:
        fh.write(json.dumps({"epoch": state.epoch, **mean}) + "\n")


def fuse_with_model(model: FusionNet, pair: ImagePair, texts: TextFeatureSet) -> Image:
    """Fuse one pair at full resolution; inputs are padded to /4 and cropped back."""
    model.eval()
    dtype = next(model.parameters()).dtype
    h, w, _ = pair.shape
    pad_h = (-h) % 4
    pad_w = (-w) % 4
    with torch.no_grad():
        a = image_to_tensor(pair.a, dtype).unsqueeze(0)
        b = image_to_tensor(pair.b, dtype).unsqueeze(0)
        if pad_h or pad_w:
            a = F.pad(a, (0, pad_w, 0, pad_h), mode="replicate")
            b = F.pad(b, (0, pad_w, 0, pad_h), mode="replicate")
        outputs = model(a, b, text_to_tensors(texts, 1, dtype))
        fused = outputs.fused[:, :, :h, :w]
    return tensor_to_image(fused, pair.a.color_space)


def fuse_pair(checkpoint: str | Path, pair: ImagePair, texts: TextFeatureSet,
              expect_cfg: Config | None = None) -> Image:
    """Load a checkpoint and fuse one pair deterministically."""
    model, _ = load_model_checkpoint(checkpoint, expect_cfg=expect_cfg)
    return fuse_with_model(model, pair, texts)


def evaluate_dir(fused_dir: str | Path, manifest: DatasetManifest,
                 report_csv: str | Path, report_json: str | Path | None = None,
                 lenient: bool = True):
    """Score one fused image per manifest entry and write CSV (+ JSON) reports.

    Returns (rows, skipped) where rows pair each image name with its
    MetricsReport and skipped lists entries without a fused image.
    """
    fused_dir = Path(fused_dir)
    rows = []
    skipped = []
    for entry in manifest.entries:
        fused_path = _find_image(fused_dir, entry.pair_id)
        if fused_path is None:
            if not lenient:
                raise FileNotFoundError(f"no fused image for {entry.pair_id} in {fused_dir}")
            skipped.append(entry.pair_id)
            continue
        fused = load_image(fused_path)
        rows.append((entry.pair_id, evaluate(fused, entry.load_pair())))
    write_reports_csv(rows, report_csv)
    if report_json is not None:
        write_reports_json(rows, report_json)
    return rows, skipped
