"""Saliency estimation and the center-periphery enrichment partition."""

import numpy as np
import pytest

from mtif.core import Config, ContractError, Image, ImagePair, save_image
from mtif.enrich import (
    SaliencyMap,
    center_periphery_partition,
    compute_saliency,
    load_saliency_map,
    select_center_window,
    window_sums,
)

from conftest import random_image, smooth_image
from oracles import best_window_oracle


def block_image(h, w, top, left, size=8):
    px = np.zeros((h, w, 1))
    px[top:top + size, left:left + size, 0] = 1.0
    return Image(px, "GRAY")


class TestComputeSaliency:
    def test_constant_image_gives_zero_map(self):
        img = Image(np.full((32, 32, 1), 0.4), "GRAY")
        assert np.all(compute_saliency(img).values == 0.0)

    def test_max_is_one_for_non_constant(self, rng):
        sal = compute_saliency(smooth_image(rng, 32, 32, 1))
        assert sal.values.max() == pytest.approx(1.0)

    def test_bright_block_detected(self, rng):
        for _ in range(10):
            top = int(rng.integers(0, 64 - 8 + 1))
            left = int(rng.integers(0, 64 - 8 + 1))
            sal = compute_saliency(block_image(64, 64, top, left))
            win = select_center_window(sal, 8)
            cy, cx = win.top + 4, win.left + 4
            assert top <= cy < top + 8 and left <= cx < left + 8

    def test_deterministic(self, rng):
        img = smooth_image(rng, 32, 32, 3)
        a = compute_saliency(img).values
        b = compute_saliency(img).values
        assert np.array_equal(a, b)

    def test_sidecar_round_trip(self, tmp_path, rng):
        img = smooth_image(rng, 32, 32, 1)
        sal = compute_saliency(img)
        save_image(Image(sal.values[:, :, None], "GRAY"), tmp_path / "a.saliency.png")
        loaded = load_saliency_map(tmp_path / "a.saliency.png", (32, 32))
        assert loaded.shape == (32, 32)
        assert loaded.values.max() == pytest.approx(1.0)

    def test_sidecar_wrong_shape(self, tmp_path, rng):
        img = smooth_image(rng, 32, 32, 1)
        save_image(img, tmp_path / "m.png")
        with pytest.raises(ContractError):
            load_saliency_map(tmp_path / "m.png", (64, 64))


class TestSelectCenterWindow:
    def test_peak_at_center(self):
        f = np.minimum(np.arange(64), 63 - np.arange(64)).astype(float)
        vals = np.outer(f, f)
        win = select_center_window(SaliencyMap(vals / vals.max()), 32)
        assert (win.top, win.left) == (16, 16)

    def test_peak_at_corner_clamps_to_origin(self):
        vals = np.zeros((16, 16))
        vals[0, 0] = 1.0
        win = select_center_window(SaliencyMap(vals), 8)
        assert (win.top, win.left) == (0, 0)

    def test_matches_exhaustive_oracle(self, rng):
        for _ in range(10):
            vals = rng.uniform(0, 1, (16, 16))
            vals /= vals.max()
            win = select_center_window(SaliencyMap(vals), 8)
            assert (win.top, win.left) == best_window_oracle(vals, 8)

    def test_tie_break_lexicographic(self):
        win = select_center_window(SaliencyMap(np.ones((16, 16))), 8)
        assert (win.top, win.left) == (0, 0)

    def test_size_too_large(self):
        with pytest.raises(ContractError):
            select_center_window(SaliencyMap(np.ones((16, 16))), 17)


def centered_peak_map(n):
    f = np.minimum(np.arange(n), (n - 1) - np.arange(n)).astype(float)
    vals = np.outer(f, f)
    return SaliencyMap(vals / vals.max())


class TestPartition:
    def make_pair(self, rng, h, w):
        a = smooth_image(rng, h, w, 3)
        b = smooth_image(rng, h, w, 3)
        return ImagePair(a, b)

    def test_five_aligned_variants(self, rng):
        cfg = Config(crop_size=32, variants=5)
        pair = self.make_pair(rng, 128, 128)
        sal = compute_saliency(pair.a)
        out = center_periphery_partition(pair, sal, cfg)
        assert len(out) == 5
        for variant, win in zip(out.variants, out.windows):
            rs, cs = win.slices()
            assert np.array_equal(variant.a.pixels, pair.a.pixels[rs, cs])
            assert np.array_equal(variant.b.pixels, pair.b.pixels[rs, cs])

    def test_centered_peak_geometry(self, rng):
        # image is 4x the crop on each side and the saliency peak is central,
        # so the four peripheral windows are distinct and each overlaps the
        # center window on exactly a quarter of its area
        s = 32
        cfg = Config(crop_size=s, variants=5)
        pair = self.make_pair(rng, 4 * s, 4 * s)
        sal = centered_peak_map(4 * s)
        out = center_periphery_partition(pair, sal, cfg)
        center = out.windows[0]
        assert (center.top, center.left) == (int(1.5 * s), int(1.5 * s))
        periph = out.windows[1:]
        assert len({(w.top, w.left) for w in periph}) == 4
        for win in periph:
            dr = min(center.top + s, win.top + s) - max(center.top, win.top)
            dc = min(center.left + s, win.left + s) - max(center.left, win.left)
            assert dr * dc == s * s // 4

    def test_random_mode_reproducible(self, rng):
        cfg = Config(crop_size=32, variants=5, ve_mode="random", seed=11)
        pair = self.make_pair(rng, 96, 96)
        first = center_periphery_partition(pair, None, cfg)
        second = center_periphery_partition(pair, None, cfg)
        assert first.windows == second.windows

    def test_random_mode_respects_given_stream(self, rng):
        cfg = Config(crop_size=32, variants=5, ve_mode="random")
        pair = self.make_pair(rng, 96, 96)
        one = center_periphery_partition(pair, None, cfg, rng=np.random.default_rng(1))
        two = center_periphery_partition(pair, None, cfg, rng=np.random.default_rng(2))
        assert one.windows != two.windows

    def test_fewer_variants_fixed_order(self, rng):
        s = 32
        pair = self.make_pair(rng, 4 * s, 4 * s)
        sal = centered_peak_map(4 * s)
        all5 = center_periphery_partition(pair, sal, Config(crop_size=s, variants=5))
        three = center_periphery_partition(pair, sal, Config(crop_size=s, variants=3))
        assert three.windows == all5.windows[:3]

    def test_too_many_variants_rejected(self, rng):
        pair = self.make_pair(rng, 128, 128)
        sal = compute_saliency(pair.a)
        with pytest.raises(ContractError):
            center_periphery_partition(pair, sal, Config(crop_size=32, variants=6))

    def test_crop_larger_than_image_rejected(self, rng):
        pair = self.make_pair(rng, 64, 64)
        sal = compute_saliency(pair.a)
        with pytest.raises(ContractError):
            center_periphery_partition(pair, sal, Config(crop_size=96, variants=1))

    def test_peripheral_requires_headroom(self, rng):
        pair = self.make_pair(rng, 64, 64)
        sal = compute_saliency(pair.a)
        with pytest.raises(ContractError):
            center_periphery_partition(pair, sal, Config(crop_size=48, variants=5))

    def test_alignment_same_image_pair(self, rng):
        img = smooth_image(rng, 128, 128, 3)
        pair = ImagePair(img, img)
        sal = compute_saliency(img)
        out = center_periphery_partition(pair, sal, Config(crop_size=32, variants=5))
        for variant in out.variants:
            assert np.array_equal(variant.a.pixels, variant.b.pixels)

    def test_center_window_contains_boxfilter_argmax(self, rng):
        for _ in range(5):
            vals = rng.uniform(0, 1, (64, 64))
            vals /= vals.max()
            sal = SaliencyMap(vals)
            win = select_center_window(sal, 32)
            sums = window_sums(vals, 32)
            t, l = np.unravel_index(np.argmax(sums), sums.shape)
            peak = (t + 16, l + 16)  # center convention for the filtered map
            assert win.top <= peak[0] < win.top + 32
            assert win.left <= peak[1] < win.left + 32

    def test_windows_inside_bounds(self, rng):
        cfg = Config(crop_size=32, variants=5)
        pair = self.make_pair(rng, 72, 90)
        sal = compute_saliency(pair.a)
        out = center_periphery_partition(pair, sal, cfg)
        for win in out.windows:
            assert 0 <= win.top <= 72 - 32
            assert 0 <= win.left <= 90 - 32
