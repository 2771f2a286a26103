"""Overlap, boundary-distance, and correlation metrics."""

import numpy as np
import pytest

from condenseg.metrics import boundary_points, dice_score, hausdorff, pearson


def blob(shape, where, label=1):
    m = np.zeros(shape, dtype=np.uint8)
    m[where] = label
    return m


class TestDice:
    def test_identical(self):
        m = blob((16, 16), (slice(2, 9), slice(3, 11)))
        assert dice_score(m, m, 1) == 1.0

    def test_disjoint(self):
        a = blob((16, 16), (slice(0, 4), slice(0, 4)))
        b = blob((16, 16), (slice(8, 12), slice(8, 12)))
        assert dice_score(a, b, 1) == 0.0

    def test_half_overlap(self):
        # |A| = |B| = 100, |A ∩ B| = 50 -> 2*50 / 200
        a = np.zeros((20, 20), dtype=np.uint8)
        b = np.zeros((20, 20), dtype=np.uint8)
        a.ravel()[:100] = 1
        b.ravel()[50:150] = 1
        assert abs(dice_score(a, b, 1) - 0.5) < 1e-15

    def test_both_empty(self):
        z = np.zeros((8, 8), dtype=np.uint8)
        assert dice_score(z, z, 1) == 1.0

    def test_one_empty(self):
        a = blob((8, 8), (slice(2, 4), slice(2, 4)))
        z = np.zeros((8, 8), dtype=np.uint8)
        assert dice_score(a, z, 1) == 0.0

    def test_symmetric(self):
        rng = np.random.default_rng(11)
        a = (rng.random((12, 12)) < 0.4).astype(np.uint8)
        b = (rng.random((12, 12)) < 0.4).astype(np.uint8)
        assert dice_score(a, b, 1) == dice_score(b, a, 1)

    def test_label_selects_class(self):
        a = np.zeros((6, 6), dtype=np.uint8)
        a[1:3] = 2
        a[4:5] = 3
        b = a.copy()
        b[4:5] = 0
        assert dice_score(a, b, 2) == 1.0
        assert dice_score(a, b, 3) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dice_score(np.zeros((4, 4), np.uint8), np.zeros((5, 4), np.uint8), 1)


class TestBoundary:
    def test_solid_square_ring(self):
        m = blob((10, 10), (slice(3, 7), slice(3, 7)))
        pts = boundary_points(m == 1)
        assert len(pts) == 12  # 4x4 square: 16 pixels minus 4 interior

    def test_single_pixel(self):
        m = blob((5, 5), (2, 2))
        pts = boundary_points(m == 1)
        assert pts.shape == (1, 2) and tuple(pts[0]) == (2, 2)

    def test_image_border_counts(self):
        m = np.ones((3, 3), dtype=bool)
        assert len(boundary_points(m)) == 8  # center pixel is interior


class TestHausdorff:
    def test_identical_zero(self):
        m = blob((16, 16), (slice(4, 9), slice(5, 12)))
        assert hausdorff(m, m, 1, 1.0) == 0.0

    def test_two_pixels_3px_2mm(self):
        a = blob((10, 10), (4, 2))
        b = blob((10, 10), (4, 5))
        assert abs(hausdorff(a, b, 1, 2.0) - 6.0) < 1e-12

    def test_symmetric_max_direction(self):
        # b contains a plus a far point: d(a->b)=0-ish, d(b->a) large
        a = blob((20, 20), (slice(2, 4), slice(2, 4)))
        b = a.copy()
        b[15, 15] = 1
        d = hausdorff(a, b, 1, 1.0)
        assert abs(d - hausdorff(b, a, 1, 1.0)) < 1e-12
        assert abs(d - np.hypot(15 - 3, 15 - 3)) < 1e-12

    def test_anisotropic_spacing(self):
        a = blob((10, 10), (2, 3))
        b = blob((10, 10), (2, 7))  # 4 columns apart
        assert abs(hausdorff(a, b, 1, (0.5, 3.0)) - 2.0) < 1e-12
        c = blob((10, 10), (6, 3))  # 4 rows apart
        assert abs(hausdorff(a, c, 1, (0.5, 3.0)) - 12.0) < 1e-12

    def test_stack_worst_slice(self):
        a = np.zeros((3, 12, 12), dtype=np.uint8)
        b = np.zeros((3, 12, 12), dtype=np.uint8)
        a[0, 5, 2] = b[0, 5, 3] = 1     # 1 px apart
        a[1, 5, 2] = b[1, 5, 9] = 1     # 7 px apart
        assert abs(hausdorff(a, b, 1, 1.0) - 7.0) < 1e-12

    def test_empty_side_raises(self):
        a = blob((8, 8), (3, 3))
        z = np.zeros((8, 8), dtype=np.uint8)
        with pytest.raises(ValueError):
            hausdorff(a, z, 1, 1.0)
        with pytest.raises(ValueError):
            hausdorff(z, z, 1, 1.0)

    def test_zero_distance_implies_unit_dice(self):
        m = blob((14, 14), (slice(3, 8), slice(2, 10)))
        if hausdorff(m, m.copy(), 1, 1.0) == 0.0:
            assert dice_score(m, m.copy(), 1) == 1.0


class TestPearson:
    def test_affine_positive(self):
        x = np.array([0.0, 1.0, 2.0, 5.0, 9.0])
        assert abs(pearson(x, 2 * x + 1) - 1.0) < 1e-12

    def test_affine_negative(self):
        x = np.array([0.0, 1.0, 2.0, 5.0, 9.0])
        assert abs(pearson(x, -x + 3) + 1.0) < 1e-12

    def test_matches_corrcoef(self):
        x = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        y = np.array([2.0, 1.0, 4.0, 3.0, 7.0])
        want = np.corrcoef(x, y)[0, 1]
        assert abs(pearson(x, y) - want) < 1e-12

    def test_shuffle_invariance(self):
        rng = np.random.default_rng(5)
        x = rng.random(30)
        y = 0.7 * x + rng.random(30) * 0.1
        perm = rng.permutation(30)
        assert abs(pearson(x, y) - pearson(x[perm], y[perm])) < 1e-12

    def test_zero_variance(self):
        with pytest.raises(ValueError):
            pearson(np.ones(5), np.arange(5.0))

    def test_too_short(self):
        with pytest.raises(ValueError):
            pearson(np.array([1.0]), np.array([2.0]))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            pearson(np.arange(4.0), np.arange(5.0))
