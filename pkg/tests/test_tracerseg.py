import numpy as np
import pytest

from marmopipe.tracerseg import (
    SubtractedSignal,
    background_subtract,
    compose_label,
    disk_offsets,
    double_threshold,
    morph_close,
    morph_reconstruct,
    threshold_pipeline,
)

import oracles


class TestBackgroundSubtract:
    def test_equal_channels_cancel(self):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 2000, (16, 16)).astype(float)
        out = background_subtract(img, img, t=1.1)
        assert np.all(out.values == 0.0)

    def test_paper_example(self):
        out = background_subtract(np.full((2, 2), 500.0), np.full((2, 2), 100.0), t=1.1)
        assert np.allclose(out.values, 390.0)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        cg = rng.integers(0, 3000, (20, 20)).astype(float)
        cr = rng.integers(0, 3000, (20, 20)).astype(float)
        out = background_subtract(cg, cr, t=1.1)
        assert np.array_equal(out.values, oracles.subtract_oracle(cg, cr, 1.1))

    def test_extent_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            background_subtract(np.zeros((2, 2)), np.zeros((3, 3)))


class TestDoubleThreshold:
    def test_zero_signal(self):
        hi, lo = double_threshold(SubtractedSignal(np.zeros((4, 4)), 1.1))
        assert not hi.any() and not lo.any()

    def test_paper_thresholds(self):
        sig = SubtractedSignal(np.array([[50.0, 150.0, 400.0]]), 1.1)
        hi, lo = double_threshold(sig, hi=300.0, lo=100.0)
        assert lo.tolist() == [[False, True, True]]
        assert hi.tolist() == [[False, False, True]]

    def test_hi_subset_lo(self):
        rng = np.random.default_rng(2)
        sig = SubtractedSignal(rng.random((30, 30)) * 500, 1.1)
        hi, lo = double_threshold(sig)
        assert not (hi & ~lo).any()

    def test_bad_order(self):
        with pytest.raises(ValueError):
            double_threshold(SubtractedSignal(np.zeros((2, 2)), 1.1), hi=100, lo=100)


class TestMorphReconstruct:
    def test_empty_marker(self):
        mask = np.ones((5, 5), dtype=bool)
        out = morph_reconstruct(np.zeros((5, 5), dtype=bool), mask)
        assert not out.any()

    def test_touched_component_kept(self):
        mask = np.zeros((5, 9), dtype=bool)
        mask[1:4, 1:4] = True
        mask[1:4, 6:8] = True
        marker = np.zeros_like(mask)
        marker[2, 2] = True
        out = morph_reconstruct(marker, mask)
        assert out[1:4, 1:4].all()
        assert not out[:, 5:].any()

    def test_marker_not_subset(self):
        marker = np.ones((3, 3), dtype=bool)
        with pytest.raises(ValueError, match="subset"):
            morph_reconstruct(marker, np.zeros((3, 3), dtype=bool))

    def test_random_vs_bfs_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            mask = rng.random((24, 24)) > 0.55
            marker = mask & (rng.random((24, 24)) > 0.9)
            got = morph_reconstruct(marker, mask)
            want = oracles.reconstruct_oracle(marker, mask)
            assert np.array_equal(got, want)

    def test_bounds(self):
        rng = np.random.default_rng(4)
        mask = rng.random((16, 16)) > 0.5
        marker = mask & (rng.random((16, 16)) > 0.8)
        out = morph_reconstruct(marker, mask)
        assert not (out & ~mask).any()
        assert (marker <= out).all()


class TestMorphClose:
    def test_disk_29_pixels(self):
        assert len(disk_offsets(3)) == 29

    def test_solid_rectangle_unchanged(self):
        rect = np.zeros((20, 20), dtype=bool)
        rect[5:15, 4:16] = True
        assert np.array_equal(morph_close(rect, 3), rect)

    def test_gap_filled(self):
        # 3 px thick segments, 2 px gap: the oracle says the gap closes
        img = np.zeros((11, 20), dtype=bool)
        img[4:7, 2:9] = True
        img[4:7, 11:18] = True
        out = morph_close(img, 3)
        assert out[5, 9] and out[5, 10]
        assert np.array_equal(out, oracles.close_oracle(img, 3))

    def test_idempotent(self):
        rng = np.random.default_rng(5)
        img = rng.random((40, 40)) > 0.8
        once = morph_close(img, 3)
        twice = morph_close(once, 3)
        assert np.array_equal(once, twice)

    def test_matches_dilate_erode_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(8):
            img = rng.random((20, 20)) > 0.8
            assert np.array_equal(morph_close(img, 3), oracles.close_oracle(img, 3))

    def test_extensive(self):
        rng = np.random.default_rng(7)
        img = rng.random((30, 30)) > 0.85
        out = morph_close(img, 3)
        assert (img <= out).all()


class TestComposeLabel:
    def test_zero_saliency(self):
        sig = SubtractedSignal(np.full((4, 4), 100.0), 1.1)
        out = compose_label(np.zeros((4, 4)), sig)
        assert not out.mask.any()
        assert np.all(out.signal == 0.0)

    def test_full_saliency_passes_signal(self):
        rng = np.random.default_rng(8)
        vals = rng.random((6, 6)) * 100
        sig = SubtractedSignal(vals, 1.1)
        out = compose_label(np.ones((6, 6)), sig)
        assert out.mask.all()
        assert np.array_equal(out.signal, vals)

    def test_mixed_vs_loop(self):
        rng = np.random.default_rng(9)
        sal = rng.random((10, 10))
        vals = rng.random((10, 10)) * 400
        out = compose_label(sal, SubtractedSignal(vals, 1.1), theta=0.5)
        for y in range(10):
            for x in range(10):
                want = vals[y, x] if sal[y, x] > 0.5 else 0.0
                assert out.signal[y, x] == want


class TestThresholdPipeline:
    @staticmethod
    def oracle(cg, cr, t=1.1, hi=300.0, lo=100.0, radius=3):
        sub = oracles.subtract_oracle(cg, cr, t)
        hi_mask, lo_mask = sub > hi, sub > lo
        rec = oracles.reconstruct_oracle(hi_mask, lo_mask)
        closed = oracles.close_oracle(rec, radius)
        return closed, np.where(closed, sub, 0.0)

    def test_matches_composed_oracle(self):
        rng = np.random.default_rng(10)
        for _ in range(5):
            cg = rng.integers(0, 600, (24, 24)).astype(float)
            cr = rng.integers(0, 400, (24, 24)).astype(float)
            label = threshold_pipeline(cg, cr)
            want_mask, want_sig = self.oracle(cg, cr)
            assert np.array_equal(label.mask, want_mask)
            assert np.array_equal(label.signal, want_sig)

    def test_monotone_in_cg(self):
        rng = np.random.default_rng(11)
        cg = rng.integers(0, 600, (16, 16)).astype(float)
        cr = rng.integers(0, 300, (16, 16)).astype(float)
        sub = background_subtract(cg, cr)
        hi0, lo0 = double_threshold(sub)
        cg2 = cg.copy()
        cg2[5, 5] += 500
        hi1, lo1 = double_threshold(background_subtract(cg2, cr))
        assert (hi0 <= hi1).all() and (lo0 <= lo1).all()

    def test_translation_covariant(self):
        rng = np.random.default_rng(12)
        cg = np.zeros((40, 40))
        cr = np.zeros((40, 40))
        cg[10:20, 10:20] = rng.integers(0, 600, (10, 10))
        cr[10:20, 10:20] = rng.integers(0, 300, (10, 10))
        a = threshold_pipeline(cg, cr)
        b = threshold_pipeline(np.roll(cg, (4, 4), (0, 1)), np.roll(cr, (4, 4), (0, 1)))
        assert np.array_equal(np.roll(a.mask, (4, 4), (0, 1))[8:-8, 8:-8], b.mask[8:-8, 8:-8])

    def test_mask_signal_consistent(self):
        rng = np.random.default_rng(13)
        cg = rng.integers(0, 800, (20, 20)).astype(float)
        cr = rng.integers(0, 300, (20, 20)).astype(float)
        label = threshold_pipeline(cg, cr)
        assert not label.signal[~label.mask].any()
