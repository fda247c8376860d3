"""Box arithmetic and RoI sampling contracts."""

import numpy as np
import pytest

from poserefine import tensor
from poserefine.errors import ShapeError
from poserefine.geometry import Box, ImageSize, enlarge_box, jitter_box, roi_align

from conftest import make_rng


def dense_roi_oracle(feat, box, spatial_scale, out_h, out_w, ratio=64):
    """Brute-force sampler: same zero-padding bilinear rule, huge ratio."""
    fx1 = box.x1 * spatial_scale - 0.5
    fy1 = box.y1 * spatial_scale - 0.5
    fx2 = box.x2 * spatial_scale - 0.5
    fy2 = box.y2 * spatial_scale - 0.5
    c, h, w = feat.shape
    bin_h = (fy2 - fy1) / out_h
    bin_w = (fx2 - fx1) / out_w
    out = np.zeros((c, out_h, out_w))
    for by in range(out_h):
        for bx in range(out_w):
            acc = np.zeros(c)
            for iy in range(ratio):
                sy = fy1 + by * bin_h + (iy + 0.5) * bin_h / ratio
                for ix in range(ratio):
                    sx = fx1 + bx * bin_w + (ix + 0.5) * bin_w / ratio
                    y0, x0 = int(np.floor(sy)), int(np.floor(sx))
                    for yy, wy in ((y0, 1 - (sy - y0)), (y0 + 1, sy - y0)):
                        for xx, wx in ((x0, 1 - (sx - x0)), (x0 + 1, sx - x0)):
                            if 0 <= yy < h and 0 <= xx < w:
                                acc += wy * wx * feat[:, yy, xx]
            out[:, by, bx] = acc / (ratio * ratio)
    return out


class TestBox:
    def test_invariants(self):
        with pytest.raises(ShapeError):
            Box(5, 0, 5, 10)
        with pytest.raises(ShapeError):
            Box(0, 0, 10, 10, score=1.5)
        assert Box(-3.0, 1.0, 4.0, 9.0).area == pytest.approx(56.0)

    def test_image_size_positive(self):
        with pytest.raises(ShapeError):
            ImageSize(0, 4)


class TestEnlargeBox:
    def test_documented_example(self):
        out = enlarge_box(Box(10, 20, 110, 220), 1.3)
        assert (out.x1, out.y1, out.x2, out.y2) == (-5.0, -10.0, 125.0, 250.0)

    def test_unit_square_example(self):
        out = enlarge_box(Box(0, 0, 100, 100), 1.3)
        assert (out.x1, out.y1, out.x2, out.y2) == (-15.0, -15.0, 115.0, 115.0)

    def test_factor_one_is_identity(self):
        box = Box(3.25, -1.5, 7.75, 4.5, score=0.7)
        assert enlarge_box(box, 1.0) == box

    def test_shrinking_rejected(self):
        with pytest.raises(ShapeError, match="factor"):
            enlarge_box(Box(0, 0, 1, 1), 0.9)

    @pytest.mark.parametrize("seed", range(3))
    def test_center_and_aspect_preserved(self, seed):
        rng = make_rng(seed)
        for _ in range(300):
            x1, y1 = rng.uniform(-50, 50, size=2)
            w, h = rng.uniform(0.5, 200, size=2)
            f = rng.uniform(1.0, 2.0)
            box = Box(x1, y1, x1 + w, y1 + h)
            big = enlarge_box(box, f)
            assert abs(big.center[0] - box.center[0]) < 1e-12
            assert abs(big.center[1] - box.center[1]) < 1e-12
            assert abs(big.width / big.height - w / h) < 1e-9 * (w / h)


class TestJitterBox:
    def test_zero_noise_identity(self, rng):
        box = Box(2, 3, 12, 33)
        out = jitter_box(box, 0.0, 0.0, rng)
        assert out.as_xyxy() == pytest.approx(box.as_xyxy(), abs=1e-12)

    def test_scale_bound(self):
        rng = make_rng(0)
        box = Box(0, 0, 100, 50)
        for _ in range(200):
            out = jitter_box(box, 0.1, 0.0, rng)
            assert 90.0 <= out.width <= 110.0
            assert 45.0 <= out.height <= 55.0

    def test_mean_center_shift_near_zero(self):
        rng = make_rng(1)
        box = Box(0, 0, 100, 100)
        n = 10_000
        shifts = np.empty((n, 2))
        for i in range(n):
            out = jitter_box(box, 0.0, 0.05, rng)
            shifts[i] = (out.center[0] - 50.0, out.center[1] - 50.0)
        # shift ~ U(-5, 5) per axis: se = (10/sqrt(12))/sqrt(n)
        se = (10.0 / np.sqrt(12.0)) / np.sqrt(n)
        assert np.abs(shifts.mean(axis=0)).max() < 3 * se

    def test_noise_magnitude_contract(self, rng):
        with pytest.raises(ShapeError):
            jitter_box(Box(0, 0, 1, 1), 0.6, 0.0, rng)


class TestRoiAlign:
    def test_affine_field_is_exact(self):
        h = w = 16
        ys, xs = np.mgrid[0:h, 0:w].astype(float)
        feat = tensor.Tensor((2 * xs + 3 * ys)[None])
        box = Box(4.0, 5.0, 12.0, 11.0)
        out = roi_align(feat, box, 1.0, (4, 4), 2).data
        fx1, fy1 = box.x1 - 0.5, box.y1 - 0.5
        bw, bh = box.width / 4, box.height / 4
        for by in range(4):
            for bx in range(4):
                cx = fx1 + (bx + 0.5) * bw
                cy = fy1 + (by + 0.5) * bh
                assert abs(out[0, by, bx] - (2 * cx + 3 * cy)) < 1e-9

    def test_constant_feature_inside(self):
        feat = tensor.Tensor(np.full((3, 12, 12), 2.25))
        out = roi_align(feat, Box(2, 2, 10, 10), 1.0, (5, 5), 2).data
        np.testing.assert_allclose(out, 2.25, atol=1e-12)

    def test_out_of_image_regions_are_zero_and_boundary_matches_oracle(self):
        rng = make_rng(3)
        feat_np = rng.uniform(0.2, 1.0, size=(2, 10, 10))
        feat = tensor.Tensor(feat_np)
        # enlarged corner box: ~1 feature cell per bin, top-left far outside
        box = Box(-6.8, -6.8, 9.2, 9.2)
        out = roi_align(feat, box, 0.5, (8, 8), 2).data
        oracle = dense_roi_oracle(feat_np, box, 0.5, 8, 8, ratio=64)
        fully_outside = oracle == 0.0
        assert fully_outside.any()
        assert (out[fully_outside] == 0.0).all()
        assert np.max(np.abs(out - oracle)) < 2e-2

    def test_zero_feature_stays_zero(self, rng):
        feat = tensor.Tensor(np.zeros((2, 8, 8)))
        for _ in range(10):
            x1, y1 = rng.uniform(-10, 5, size=2)
            out = roi_align(feat, Box(x1, y1, x1 + 9, y1 + 7), 1.0, (3, 3), 2)
            assert (out.data == 0).all()

    def test_linear_in_feature(self):
        rng = make_rng(5)
        a = rng.normal(size=(2, 9, 9))
        b = rng.normal(size=(2, 9, 9))
        box = Box(1.0, 0.5, 7.5, 8.0)
        mix = roi_align(tensor.Tensor(1.5 * a - 2.0 * b), box, 1.0, (4, 4), 2).data
        parts = 1.5 * roi_align(tensor.Tensor(a), box, 1.0, (4, 4), 2).data \
            - 2.0 * roi_align(tensor.Tensor(b), box, 1.0, (4, 4), 2).data
        np.testing.assert_allclose(mix, parts, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        rng = make_rng(seed)
        feat = tensor.Tensor(rng.normal(size=(2, 7, 7)))
        box = Box(0.7, 1.1, 5.3, 6.2)
        weights = tensor.Tensor(rng.normal(size=(2, 3, 3)))

        def f(p):
            return tensor.sum_all(tensor.mul(
                roi_align(p, box, 1.0, (3, 3), 2), weights))

        assert tensor.grad_check(f, feat, 1e-5) < 1e-6

    def test_integer_translation_invariance(self):
        rng = make_rng(8)
        base = rng.normal(size=(1, 12, 12))
        shifted = np.roll(np.roll(base, 2, axis=1), 3, axis=2)
        box = Box(2.0, 3.0, 6.5, 7.0)
        moved = Box(box.x1 + 3, box.y1 + 2, box.x2 + 3, box.y2 + 2)
        a = roi_align(tensor.Tensor(base), box, 1.0, (4, 4), 2).data
        b = roi_align(tensor.Tensor(shifted), moved, 1.0, (4, 4), 2).data
        np.testing.assert_allclose(a, b, atol=1e-10)

    def test_degenerate_box_rejected(self):
        feat = tensor.Tensor(np.ones((1, 8, 8)))
        with pytest.raises(ShapeError, match="degenerate"):
            roi_align(feat, Box(1.0, 1.0, 1.0 + 1e-8, 5.0), 1.0, (2, 2), 2)
