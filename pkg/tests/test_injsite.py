import numpy as np
import pytest

from marmopipe.imgcore import Stack3D
from marmopipe.injsite import (
    CellPointCloud,
    detect_cells,
    hessian_cell_filter,
    largest_component,
    roi_from_mask,
    rough_localize,
)

import oracles


def stack_of(data, voxel=(50.0, 50.0, 50.0), channel="CB"):
    return Stack3D(np.asarray(data, dtype=np.float64), voxel, channel=channel, dtype="u16")


class TestRoughLocalize:
    def test_all_zero_gives_empty(self):
        mask = rough_localize(stack_of(np.zeros((8, 8, 8))))
        assert mask.empty
        assert mask.mask.data.shape == (8, 8, 8)

    def test_cube_matches_oracle(self):
        vol = np.zeros((24, 24, 24))
        vol[9:15, 9:15, 9:15] = 10000.0
        got = rough_localize(stack_of(vol)).mask.data > 0
        want = oracles.rough_localize_oracle(vol, (50.0, 50.0, 50.0), 4500.0, 150.0)
        assert np.array_equal(got, want)
        assert want[11, 11, 11]  # central region survives
        # nothing survives further than 2 sigma (6 voxels) from the cube
        dilated = np.zeros_like(vol, dtype=bool)
        dilated[3:21, 3:21, 3:21] = True
        assert not (want & ~dilated).any()

    def test_larger_blob_wins(self):
        vol = np.zeros((20, 40, 20))
        vol[6:14, 4:12, 6:14] = 9000.0    # 8x8x8
        vol[8:12, 28:32, 8:12] = 9000.0   # 4x4x4, far away
        mask = rough_localize(stack_of(vol)).mask.data > 0
        assert mask[:, 4:14, :].any()
        assert not mask[:, 24:36, :].any()

    def test_random_volumes_match_oracle(self):
        rng = np.random.default_rng(0)
        for k in range(10):
            vol = (rng.random((16, 16, 16)) > 0.7) * 8000.0
            got = rough_localize(stack_of(vol), sigma_um=50.0).mask.data > 0
            want = oracles.rough_localize_oracle(vol, (50.0,) * 3, 4500.0, 50.0)
            assert np.array_equal(got, want), f"case {k}"

    def test_scale_invariance_of_relative_threshold(self):
        rng = np.random.default_rng(1)
        vol = (rng.random((12, 12, 12)) > 0.6) * 6000.0
        a = rough_localize(stack_of(vol)).mask.data
        b = rough_localize(stack_of(vol * 1.7)).mask.data
        assert np.array_equal(a, b)


class TestLargestComponent:
    def test_single_component_identity(self):
        vol = np.zeros((6, 6, 6))
        vol[2:4, 2:4, 2:4] = 1.0
        out = largest_component(stack_of(vol))
        assert np.array_equal(out.data, vol)

    def test_size_tie_break_and_selection(self):
        vol = np.zeros((4, 12, 4))
        vol[1, 1:6, 1] = 1.0   # size 5
        vol[2, 7:11, 1:3]= 1.0 # hmm-free: 4*2=8... adjust below
        vol[2, 7, 3] = 1.0     # size 9
        out = largest_component(stack_of(vol))
        assert out.data.sum() == 9.0

    def test_empty_in_empty_out(self):
        out = largest_component(stack_of(np.zeros((3, 3, 3))))
        assert not out.data.any()

    def test_random_vs_flood_fill(self):
        rng = np.random.default_rng(2)
        for _ in range(15):
            vol = rng.random((10, 10, 10)) > 0.72
            got = largest_component(stack_of(vol.astype(float))).data > 0
            want = oracles.largest_component_oracle(vol)
            assert np.array_equal(got, want)


class TestHessianFilter:
    def test_constant_zero_response(self):
        out = hessian_cell_filter(np.full((32, 32), 11.0), (2.0,))
        assert np.allclose(out, 0.0, atol=1e-9)

    def test_blob_matches_analytic(self):
        # isotropic Gaussian blob, amplitude A, width s: after blur sigma,
        # center curvature is A * s^2 / (s^2 + sigma^2)^2 in both directions
        a, s, sigma = 1000.0, 6.0, 4.0
        yy, xx = np.mgrid[0:65, 0:65].astype(float)
        img = a * np.exp(-((yy - 32) ** 2 + (xx - 32) ** 2) / (2 * s * s))
        resp = hessian_cell_filter(img, (sigma,))
        want = a * s * s / (s * s + sigma * sigma) ** 2
        assert abs(resp[32, 32] - want) / want < 0.02

    def test_ridge_suppressed(self):
        a, s, sigma = 1000.0, 6.0, 4.0
        yy, xx = np.mgrid[0:65, 0:65].astype(float)
        blob = a * np.exp(-((yy - 32) ** 2 + (xx - 32) ** 2) / (2 * s * s))
        ridge = a * np.exp(-((xx - 32) ** 2) / (2 * s * s))
        blob_resp = hessian_cell_filter(blob, (sigma,))[32, 32]
        ridge_resp = hessian_cell_filter(ridge, (sigma,))[32, 32]
        assert ridge_resp < 0.05 * blob_resp

    def test_rotation_covariant(self):
        a, s = 1000.0, 5.0
        yy, xx = np.mgrid[0:65, 0:65].astype(float)
        u, v = yy - 32, xx - 32
        elong = a * np.exp(-(u ** 2 / (2 * s * s) + v ** 2 / (2 * (2 * s) ** 2)))
        c, d = np.cos(np.pi / 4), np.sin(np.pi / 4)
        ur, vr = c * u - d * v, d * u + c * v
        rotated = a * np.exp(-(ur ** 2 / (2 * s * s) + vr ** 2 / (2 * (2 * s) ** 2)))
        r0 = hessian_cell_filter(elong, (4.0,))[32, 32]
        r1 = hessian_cell_filter(rotated, (4.0,))[32, 32]
        assert abs(r1 - r0) / r0 < 0.03

    def test_max_over_scales(self):
        rng = np.random.default_rng(3)
        img = rng.random((32, 32)) * 100
        multi = hessian_cell_filter(img, (2.0, 3.0, 4.0))
        singles = [hessian_cell_filter(img, (s,)) for s in (2.0, 3.0, 4.0)]
        assert np.array_equal(multi, np.maximum.reduce(singles))

    def test_bad_scale(self):
        with pytest.raises(ValueError):
            hessian_cell_filter(np.zeros((8, 8)), (0.0,))
        with pytest.raises(ValueError):
            hessian_cell_filter(np.zeros((8, 8)), ())


class TestDetectCells:
    def test_empty_saliency(self):
        assert len(detect_cells(np.zeros((2, 8, 8)))) == 0

    def test_single_pixel(self):
        sal = np.zeros((1, 8, 8))
        sal[0, 3, 5] = 0.9
        cloud = detect_cells(sal)
        assert len(cloud) == 1
        assert tuple(cloud.points[0]) == (5, 3, 0)
        assert cloud.scores[0] == 0.9

    def test_plateau_yields_nothing(self):
        sal = np.zeros((1, 8, 8))
        sal[0, 2:5, 2:5] = 0.8
        cloud = detect_cells(sal)
        assert len(cloud) == 0
        # exhaustive check: no pixel is strictly greater than all neighbors
        padded = np.pad(sal[0], 1, constant_values=-np.inf)
        for y in range(8):
            for x in range(8):
                strict = all(
                    sal[0, y, x] > padded[1 + y + dy, 1 + x + dx]
                    for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)
                )
                assert not (strict and sal[0, y, x] > 0.5)

    def test_threshold_strict(self):
        sal = np.zeros((1, 8, 8))
        sal[0, 4, 4] = 0.5
        assert len(detect_cells(sal, t_high=0.5)) == 0

    def test_detections_are_strict_maxima(self):
        rng = np.random.default_rng(4)
        sal = rng.random((3, 24, 24))
        cloud = detect_cells(sal, t_high=0.5)
        for (x, y, z), score in zip(cloud.points, cloud.scores):
            assert score > 0.5
            patch = sal[z, max(0, y - 1):y + 2, max(0, x - 1):x + 2]
            assert sal[z, y, x] == patch.max()
            assert (patch == patch.max()).sum() == 1

    def test_multi_slice_z(self):
        sal = np.zeros((4, 8, 8))
        sal[2, 6, 1] = 0.7
        cloud = detect_cells(sal)
        assert tuple(cloud.points[0]) == (1, 6, 2)

    def test_save_load_round_trip(self, tmp_path):
        cloud = CellPointCloud(
            points=np.array([[1, 2, 3], [4, 5, 6]]),
            scores=np.array([0.75, 0.5]),
        )
        cloud.save(tmp_path / "cells.txt")
        back = CellPointCloud.load(tmp_path / "cells.txt")
        assert np.array_equal(back.points, cloud.points)
        assert np.array_equal(back.scores, cloud.scores)


class TestRoiFromMask:
    def make_mask(self, voxels, dims=(12, 16, 16)):
        vol = np.zeros(dims)
        for x, y, z in voxels:
            vol[z, y, x] = 1.0
        from marmopipe.injsite import InjectionMask
        return InjectionMask(mask=stack_of(vol), t_raw=4500.0, t_low=0.5)

    def test_block_arithmetic(self):
        mask = self.make_mask([(10, 10, 5)])
        roi = roi_from_mask(mask, pad_px=0)
        s = 50.0 / 1.34
        assert roi.rects[5][0] == round(10 * s) == 373
        assert roi.rects[5][2] == round(11 * s)

    def test_full_volume_mask(self):
        vol = np.ones((3, 4, 4))
        from marmopipe.injsite import InjectionMask
        roi = roi_from_mask(InjectionMask(mask=stack_of(vol), t_raw=0, t_low=0), pad_px=0)
        assert sorted(roi.rects) == [0, 1, 2]
        assert roi.rects[0] == (0, 0, round(4 * 50 / 1.34), round(4 * 50 / 1.34))

    def test_z_range(self):
        mask = self.make_mask([(3, 3, 5), (4, 4, 6), (2, 2, 8)])
        roi = roi_from_mask(mask)
        assert roi.z_range == (5, 8)
        assert sorted(roi.rects) == [5, 6, 8]

    def test_empty_mask(self):
        from marmopipe.injsite import InjectionMask
        with pytest.raises(ValueError, match="empty"):
            roi_from_mask(InjectionMask(mask=stack_of(np.zeros((2, 2, 2))), t_raw=0, t_low=0))

    def test_padding_and_clip(self):
        mask = self.make_mask([(0, 0, 1)])
        roi = roi_from_mask(mask, pad_px=8)
        assert roi.rects[1][:2] == (0, 0)
        clipped = roi.clip(100, 100)
        assert clipped.rects[1][2] <= 100
