"""Manifest ingestion, the training loop, inference, and evaluation driver."""

import json

import numpy as np
import pytest
import torch

from mtif.core import Config, ContractError, Image, ImagePair, save_image
from mtif.fusenet import CheckpointError, FusionNet, save_model_checkpoint
from mtif.harness import (
    ManifestError,
    TrainingDiverged,
    build_manifest,
    evaluate_dir,
    fuse_pair,
    fuse_with_model,
    load_train_checkpoint,
    make_training_variants,
    seed_from_env,
    train,
)
from mtif.textguide import StubTextEncoder, encode_text, load_description_cache

from conftest import exposure_pair, smooth_image, write_toy_dataset

FAST = dict(crop_size=32, channel_widths=(8, 16, 32), embed_dim=32, heads=4, seed=0)


def fast_cfg(**overrides):
    return Config(task="MEF", **{**FAST, **overrides})


class TestBuildManifest:
    def test_empty_dir(self, tmp_path):
        manifest = build_manifest(tmp_path)
        assert len(manifest) == 0
        assert any("no valid pairs" in p for p in manifest.problems)

    def test_lexicographic_entries(self, tmp_path, rng):
        write_toy_dataset(tmp_path / "data", 3, rng)
        manifest = build_manifest(tmp_path / "data")
        assert [e.pair_id for e in manifest.entries] == ["pair000", "pair001", "pair002"]
        assert manifest.problems == ()

    def test_mismatched_dimensions_rejected(self, tmp_path, rng):
        write_toy_dataset(tmp_path / "data", 2, rng)
        bad = tmp_path / "data" / "pair000"
        save_image(smooth_image(rng, 32, 64, 3), bad / "b.png")
        manifest = build_manifest(tmp_path / "data")
        assert [e.pair_id for e in manifest.entries] == ["pair001"]
        assert any("pair000" in p and "dimensions" in p for p in manifest.problems)

    def test_missing_text_sidecar(self, tmp_path, rng):
        write_toy_dataset(tmp_path / "data", 1, rng)
        (tmp_path / "data" / "pair000" / "pair000.text.json").unlink()
        manifest = build_manifest(tmp_path / "data")
        assert len(manifest) == 0
        assert any("description cache" in p for p in manifest.problems)

    def test_strict_mode_raises(self, tmp_path, rng):
        write_toy_dataset(tmp_path / "data", 2, rng)
        save_image(smooth_image(rng, 32, 64, 3), tmp_path / "data" / "pair000" / "b.png")
        with pytest.raises(ManifestError):
            build_manifest(tmp_path / "data", strict=True)

    def test_sidecars_discovered(self, tmp_path, rng):
        write_toy_dataset(tmp_path / "data", 1, rng)
        pair_dir = tmp_path / "data" / "pair000"
        save_image(smooth_image(rng, 64, 64, 1), pair_dir / "a.saliency.png")
        manifest = build_manifest(tmp_path / "data")
        assert manifest.entries[0].saliency_path is not None


class TestSeedOverride:
    def test_env_override(self, monkeypatch):
        monkeypatch.setenv("MTIF_SEED", "77")
        assert seed_from_env(Config(seed=0)).seed == 77

    def test_no_env(self, monkeypatch):
        monkeypatch.delenv("MTIF_SEED", raising=False)
        assert seed_from_env(Config(seed=3)).seed == 3

    def test_bad_value(self, monkeypatch):
        monkeypatch.setenv("MTIF_SEED", "xyz")
        with pytest.raises(ContractError):
            seed_from_env(Config())


class TestTrainingVariants:
    def test_without_ve_single_resized_pair(self, rng):
        cfg = fast_cfg(use_ve=False)
        pair = exposure_pair(rng, 96, 80, 3)
        entry = build_entry_stub()
        variants = make_training_variants(pair, entry, cfg, 0, 0)
        assert len(variants) == 1
        assert variants[0].shape == (32, 32, 3)

    def test_random_mode_varies_by_epoch(self, rng):
        cfg = fast_cfg(ve_mode="random")
        pair = exposure_pair(rng, 96, 96, 3)
        entry = build_entry_stub()
        first = make_training_variants(pair, entry, cfg, 0, 0)
        second = make_training_variants(pair, entry, cfg, 1, 0)
        assert not all(np.array_equal(x.a.pixels, y.a.pixels) for x, y in zip(first, second))

    def test_saliency_mode_count(self, rng):
        cfg = fast_cfg()
        pair = exposure_pair(rng, 96, 96, 3)
        entry = build_entry_stub()
        variants = make_training_variants(pair, entry, cfg, 0, 0)
        assert len(variants) == 5


def build_entry_stub():
    from mtif.harness import ManifestEntry
    from pathlib import Path

    return ManifestEntry("stub", Path("a.png"), Path("b.png"), Path("t.json"))


class TestTrain:
    def test_smoke_run_and_artifacts(self, tmp_path, rng):
        write_toy_dataset(tmp_path / "data", 2, rng)
        manifest = build_manifest(tmp_path / "data")
        cfg = fast_cfg(epochs=2)
        state = train(cfg, manifest, tmp_path / "out")
        assert state.epoch == 2
        assert state.step == 2  # 2 pairs, batch of 2 -> one step per epoch
        assert (tmp_path / "out" / "checkpoint_epoch_0002.pt").exists()
        assert (tmp_path / "out" / "checkpoint_latest.pt").exists()
        log_lines = (tmp_path / "out" / "train_log.jsonl").read_text().splitlines()
        assert len(log_lines) == 2
        record = json.loads(log_lines[0])
        assert {"step", "epoch", "total", "feat_total", "base_total"} <= set(record)

    def test_seeded_determinism(self, tmp_path, rng):
        write_toy_dataset(tmp_path / "data", 2, rng)
        manifest = build_manifest(tmp_path / "data")
        cfg = fast_cfg(epochs=3)
        one = train(cfg, manifest, tmp_path / "run1")
        two = train(cfg, manifest, tmp_path / "run2")
        assert [r["total"] for r in one.loss_history] == [r["total"] for r in two.loss_history]

    def test_empty_manifest_rejected(self, tmp_path):
        (tmp_path / "data").mkdir()
        manifest = build_manifest(tmp_path / "data")
        with pytest.raises(ContractError):
            train(fast_cfg(), manifest, tmp_path / "out")

    def test_resume_equivalence(self, tmp_path, rng):
        write_toy_dataset(tmp_path / "data", 2, rng)
        manifest = build_manifest(tmp_path / "data")
        cfg = fast_cfg(epochs=4)
        straight = train(cfg, manifest, tmp_path / "straight")
        train(cfg, manifest, tmp_path / "split", stop_after_epoch=2)
        resumed = train(cfg, manifest, tmp_path / "split",
                        resume_from=tmp_path / "split" / "checkpoint_latest.pt")
        a = [r["total"] for r in straight.loss_history]
        b = [r["total"] for r in resumed.loss_history]
        assert len(a) == len(b) == 4
        assert np.allclose(a, b, atol=1e-6)

    def test_resume_rejects_other_config(self, tmp_path, rng):
        write_toy_dataset(tmp_path / "data", 2, rng)
        manifest = build_manifest(tmp_path / "data")
        cfg = fast_cfg(epochs=2)
        train(cfg, manifest, tmp_path / "out", stop_after_epoch=1)
        other = cfg.with_overrides(learning_rate=1e-3)
        with pytest.raises(CheckpointError):
            train(other, manifest, tmp_path / "out",
                  resume_from=tmp_path / "out" / "checkpoint_latest.pt")

    def test_tg_ablation_diverges_from_baseline(self, tmp_path, rng):
        write_toy_dataset(tmp_path / "data", 2, rng)
        manifest = build_manifest(tmp_path / "data")
        base = train(fast_cfg(epochs=6), manifest, tmp_path / "base")
        ablated = train(fast_cfg(epochs=6, use_tg=False), manifest, tmp_path / "ablated")
        a = [r["total"] for r in base.loss_history]
        b = [r["total"] for r in ablated.loss_history]
        assert any(abs(x - y) > 1e-9 for x, y in zip(a, b))
        assert all(np.isfinite(a)) and all(np.isfinite(b))

    def test_divergence_aborts_with_dump(self, tmp_path, rng, monkeypatch):
        import mtif.harness as harness_mod

        write_toy_dataset(tmp_path / "data", 1, rng)
        manifest = build_manifest(tmp_path / "data")

        real_total_loss = harness_mod.total_loss

        def poisoned(outputs, a, b, cfg):
            breakdown = real_total_loss(outputs, a, b, cfg)
            breakdown.total = breakdown.total * torch.nan
            return breakdown

        monkeypatch.setattr(harness_mod, "total_loss", poisoned)
        with pytest.raises(TrainingDiverged):
            train(fast_cfg(epochs=1), manifest, tmp_path / "out")
        dumps = list((tmp_path / "out").glob("diverged_step_*.npz"))
        assert len(dumps) == 1
        with np.load(dumps[0]) as data:
            assert "pair000_a" in data

    def test_env_seed_changes_run(self, tmp_path, rng, monkeypatch):
        write_toy_dataset(tmp_path / "data", 2, rng)
        manifest = build_manifest(tmp_path / "data")
        cfg = fast_cfg(epochs=2, ve_mode="random")
        base = train(cfg, manifest, tmp_path / "a")
        monkeypatch.setenv("MTIF_SEED", "99")
        other = train(cfg, manifest, tmp_path / "b")
        assert base.cfg.seed == 0 and other.cfg.seed == 99
        assert [r["total"] for r in base.loss_history] != [r["total"] for r in other.loss_history]


class TestFusePair:
    @pytest.fixture
    def checkpoint(self, tmp_path):
        cfg = fast_cfg()
        torch.manual_seed(0)
        model = FusionNet(cfg, in_channels=3)
        path = tmp_path / "model.pt"
        save_model_checkpoint(model, cfg, path)
        return path, cfg

    def texts(self, cfg):
        desc = load_description_cache_stub()
        return encode_text(desc, StubTextEncoder(embed_dim=cfg.embed_dim, seed=cfg.seed))

    def test_deterministic(self, checkpoint, rng):
        path, cfg = checkpoint
        pair = exposure_pair(rng, 64, 64, 3)
        texts = self.texts(cfg)
        one = fuse_pair(path, pair, texts)
        two = fuse_pair(path, pair, texts)
        assert np.array_equal(one.pixels, two.pixels)

    def test_pad_and_crop_shape(self, checkpoint, rng):
        path, cfg = checkpoint
        pair = exposure_pair(rng, 65, 67, 3)
        fused = fuse_pair(path, pair, self.texts(cfg))
        assert fused.shape == (65, 67, 3)

    def test_untrained_output_text_independent(self, checkpoint, rng):
        path, cfg = checkpoint
        pair = exposure_pair(rng, 64, 64, 3)
        t1 = encode_text(load_description_cache_stub(), StubTextEncoder(cfg.embed_dim, seed=1))
        t2 = encode_text(load_description_cache_stub("other words entirely"),
                         StubTextEncoder(cfg.embed_dim, seed=2))
        assert np.array_equal(fuse_pair(path, pair, t1).pixels, fuse_pair(path, pair, t2).pixels)

    def test_architecture_mismatch_rejected(self, checkpoint, rng):
        path, cfg = checkpoint
        pair = exposure_pair(rng, 64, 64, 3)
        other = cfg.with_overrides(channel_widths=(16, 32, 64))
        with pytest.raises(CheckpointError):
            fuse_pair(path, pair, self.texts(cfg), expect_cfg=other)


def load_description_cache_stub(detail="gritty sand texture"):
    from mtif.textguide import GrainedDescriptions

    return GrainedDescriptions(detail, "dunes under a ridge", "a desert scene")


class TestEvaluateDir:
    def test_rows_and_skips(self, tmp_path, rng):
        write_toy_dataset(tmp_path / "data", 3, rng)
        manifest = build_manifest(tmp_path / "data")
        fused_dir = tmp_path / "fused"
        fused_dir.mkdir()
        for entry in manifest.entries[:2]:
            save_image(smooth_image(rng, 64, 64, 3), fused_dir / f"{entry.pair_id}.png")
        csv_path = tmp_path / "report.csv"
        json_path = tmp_path / "report.json"
        rows, skipped = evaluate_dir(fused_dir, manifest, csv_path, json_path)
        assert [name for name, _ in rows] == ["pair000", "pair001"]
        assert skipped == ["pair002"]
        lines = csv_path.read_text().splitlines()
        assert len(lines) == 1 + 2 + 1  # header, two rows, MEAN
        payload = json.loads(json_path.read_text())
        assert set(payload) == {"pair000", "pair001", "MEAN"}

    def test_strict_missing_raises(self, tmp_path, rng):
        write_toy_dataset(tmp_path / "data", 1, rng)
        manifest = build_manifest(tmp_path / "data")
        (tmp_path / "fused").mkdir()
        with pytest.raises(FileNotFoundError):
            evaluate_dir(tmp_path / "fused", manifest, tmp_path / "r.csv", lenient=False)


class TestTrainedFusion:
    def test_short_training_improves_fit(self, tmp_path, rng):
        # sanity: a briefly trained model fuses without degenerate output
        write_toy_dataset(tmp_path / "data", 1, rng)
        manifest = build_manifest(tmp_path / "data")
        cfg = fast_cfg(epochs=10, learning_rate=1e-3)
        state = train(cfg, manifest, tmp_path / "out", checkpoint_every=10)
        hist = [r["total"] for r in state.loss_history]
        assert hist[-1] < hist[0]
        pair = manifest.entries[0].load_pair()
        desc = load_description_cache(manifest.entries[0].text_path)
        texts = encode_text(desc, StubTextEncoder(cfg.embed_dim, cfg.seed))
        fused = fuse_with_model(state.model, pair, texts)
        assert fused.shape == pair.shape
        assert np.isfinite(fused.pixels).all()
