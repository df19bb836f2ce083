import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from defocus.core import (BilinearLookup, as_depth, as_image, make_aperture, sample_bilinear,
                          sample_bilinear_grad, thread_count)


class TestSampleBilinear:
    def test_integer_coordinates_exact(self, rng):
        img = rng.random((6, 7, 3))
        assert sample_bilinear(img, 2, 3, 1) == img[2, 3, 1]

    def test_constant_image(self):
        img = np.full((5, 5), 0.3)
        for y, x in [(0.2, 3.7), (-4, 10), (4.0, 4.0)]:
            assert sample_bilinear(img, y, x) == pytest.approx(0.3)

    def test_midpoint_of_ramp(self):
        img = np.array([[0.0, 1.0], [0.0, 1.0]])
        assert sample_bilinear(img, 0.0, 0.5) == 0.5

    def test_clamp_to_edge(self, rng):
        img = rng.random((4, 5))
        assert sample_bilinear(img, 2.3, -1e3) == sample_bilinear(img, 2.3, 0.0)
        assert sample_bilinear(img, 1e3, 1.5) == sample_bilinear(img, 3.0, 1.5)

    def test_linear_inside_cell(self, rng):
        img = rng.random((4, 4))
        a, b = sample_bilinear(img, 1.0, 1.0), sample_bilinear(img, 1.0, 2.0)
        for t in (0.1, 0.5, 0.9):
            assert sample_bilinear(img, 1.0, 1.0 + t) == pytest.approx((1 - t) * a + t * b)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 4), st.floats(0, 5))
    def test_inside_convex_hull(self, y, x):
        img = np.arange(30, dtype=float).reshape(5, 6) / 29
        v = sample_bilinear(img, y, x)
        assert img.min() - 1e-12 <= v <= img.max() + 1e-12


class TestSampleBilinearGrad:
    def test_constant_image(self):
        assert sample_bilinear_grad(np.ones((4, 4)), 1.3, 2.6) == (0.0, 0.0)

    def test_ramp(self):
        w = 9
        img = np.tile(np.arange(w) / (w - 1), (5, 1))
        dy, dx = sample_bilinear_grad(img, 2.3, 4.4)
        assert dy == 0.0
        assert dx == pytest.approx(1 / (w - 1))

    def test_finite_difference(self, rng):
        img = rng.random((8, 8))
        h = 1e-4
        for _ in range(50):
            y, x = rng.uniform(0.01, 6.99, 2)
            if min(abs(y - round(y)), abs(x - round(x))) < 2 * h:
                continue
            dy, dx = sample_bilinear_grad(img, y, x)
            ny = (sample_bilinear(img, y + h, x) - sample_bilinear(img, y - h, x)) / (2 * h)
            nx = (sample_bilinear(img, y, x + h) - sample_bilinear(img, y, x - h)) / (2 * h)
            assert abs(dy - ny) <= 1e-4 * max(abs(ny), 1e-8) + 1e-10
            assert abs(dx - nx) <= 1e-4 * max(abs(nx), 1e-8) + 1e-10

    def test_lattice_uses_right_cell(self):
        img = np.array([[0.0, 1.0, 3.0]])
        assert sample_bilinear_grad(img, 0.0, 1.0)[1] == 2.0
        # the last lattice point closes the final cell
        assert sample_bilinear_grad(img, 0.0, 2.0)[1] == 2.0

    def test_clamped_coordinate_has_zero_gradient(self, rng):
        img = rng.random((4, 4))
        assert sample_bilinear_grad(img, 1.5, -2.0)[1] == 0.0


class TestBilinearLookupAdjoint:
    def test_adjoint_identity(self, rng):
        h, w = 7, 9
        ys, xs = rng.uniform(-2, h + 1, 40), rng.uniform(-2, w + 1, 40)
        look = BilinearLookup((h, w), ys, xs)
        grid = rng.random((h, w))
        g = rng.random(40)
        assert np.dot(look.sample(grid), g) == pytest.approx(np.sum(grid * look.adjoint(g)))

    def test_multichannel_matches_per_channel(self, rng):
        look = BilinearLookup((5, 5), rng.uniform(0, 4, (3, 4)), rng.uniform(0, 4, (3, 4)))
        img = rng.random((5, 5, 3))
        out = look.sample(img)
        for c in range(3):
            np.testing.assert_allclose(out[..., c], look.sample(img[:, :, c]))


class TestAperture:
    def test_pinhole(self):
        a = make_aperture(1)
        assert a.coords.shape == (1, 1, 2)
        assert a.weight_sum == 1.0
        np.testing.assert_array_equal(a.coords[0, 0], [0.0, 0.0])

    def test_three(self):
        a = make_aperture(3)
        np.testing.assert_array_equal(a.weights, [[0, 1, 0], [1, 1, 1], [0, 1, 0]])
        assert a.weight_sum == 5

    def test_twelve_brute_force(self):
        a = make_aperture(12)
        axis = np.linspace(-1, 1, 12)
        count = sum(1 for y in axis for x in axis if y * y + x * x <= 1)
        assert a.weight_sum == count

    @pytest.mark.parametrize("m", [1, 2, 3, 5, 8, 13])
    def test_symmetric(self, m):
        a = make_aperture(m)
        np.testing.assert_array_equal(a.weights, a.weights[::-1, ::-1])
        assert set(np.unique(a.weights)) <= {0.0, 1.0}

    @pytest.mark.parametrize("m", [3, 5, 13])
    def test_odd_has_center(self, m):
        a = make_aperture(m)
        c = m // 2
        assert a.weights[c, c] == 1
        np.testing.assert_array_equal(a.coords[c, c], [0, 0])

    @pytest.mark.parametrize("m", [0, -1, 2.5])
    def test_invalid(self, m):
        with pytest.raises(ValueError):
            make_aperture(m)

    def test_views_normalized(self):
        u, w = make_aperture(7).views()
        assert w.sum() == pytest.approx(1.0)
        assert np.all(np.linalg.norm(u, axis=1) <= 1 + 1e-12)


class TestValidation:
    def test_as_image_promotes_gray(self):
        assert as_image(np.zeros((3, 4))).shape == (3, 4, 1)

    def test_as_image_rejects(self):
        with pytest.raises(ValueError):
            as_image(np.zeros((3, 4, 2)))
        with pytest.raises(ValueError):
            as_image(np.full((2, 2), np.nan))

    def test_as_depth(self):
        assert as_depth(np.zeros((3, 4, 1))).shape == (3, 4)
        with pytest.raises(ValueError):
            as_depth(np.zeros(5))

    def test_thread_count(self, monkeypatch):
        monkeypatch.setenv("DEFOCUS_THREADS", "3")
        assert thread_count() == 3
        assert thread_count(2) == 2
        monkeypatch.delenv("DEFOCUS_THREADS")
        assert thread_count() == 1
