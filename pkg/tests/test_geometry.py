# tests/test_geometry.py
import unittest

import numpy as np
from scipy import integrate

from ale_flow_lab.geometry import (
    TensorField,
    WeightSpec,
    ale_order_fit,
    avr_estimate,
    background_cone,
    background_eguchi_hanson,
    background_euclidean,
    build_grid,
    cell_volumes,
    check_grid,
    distance,
    grid_distance,
    make_background,
    volume,
    weight_function,
    weighted_norm,
)
from ale_flow_lab.utils import BackgroundError, FieldError, GridError


class TestRadialGrid(unittest.TestCase):

    def test_uniform_grid(self):
        """A unit stretch gives an arithmetic progression."""
        # Execute
        grid = build_grid(4, 0.0, 20.0, 21, 1.0)

        # Assert
        np.testing.assert_allclose(grid.nodes, np.arange(21.0), rtol=0, atol=1e-12)
        np.testing.assert_allclose(grid.spacing, 1.0, rtol=1e-12)

    def test_geometric_grid_doubles_spacing(self):
        """With stretch 2 and Delta r_0 = 1 the nodes are 1 + (2^k - 1)."""
        # Execute
        grid = build_grid(4, 1.0, 1.0 + (2.0 ** 16 - 1.0), 17, 2.0)

        # Assert
        np.testing.assert_allclose(grid.nodes, 2.0 ** np.arange(17.0), rtol=1e-12)
        np.testing.assert_allclose(grid.spacing[1:] / grid.spacing[:-1], 2.0, rtol=1e-12)

    def test_spacing_ratio_of_stretched_grid(self):
        # Execute
        grid = build_grid(3, 0.0, 100.0, 512, 1.01)

        # Assert
        self.assertAlmostEqual(grid.spacing[-1] / grid.spacing[0], 1.01 ** 510, delta=1e-9 * 1.01 ** 510)

    def test_rejected_parameters(self):
        """Too few nodes, an empty range and shrinking spacing are refused."""
        for args in ((4, 0.0, 10.0, 8, 1.0), (4, 5.0, 5.0, 32, 1.0), (4, 0.0, 10.0, 32, 0.9), (2, 0.0, 10.0, 32, 1.0)):
            with self.subTest(args=args):
                with self.assertRaises(GridError):
                    build_grid(*args)

    def test_derivative_matrices_are_exact_on_quadratics(self):
        """The three-point stencils differentiate quadratics exactly, also on stretched grids."""
        # Setup
        grid = build_grid(4, 1.0, 30.0, 64, 1.03)
        r = grid.nodes
        u = 3.0 * r ** 2 - 2.0 * r + 0.5
        d1, d2 = grid.derivative_matrices

        # Execute / Assert
        np.testing.assert_allclose(d1 @ u, 6.0 * r - 2.0, rtol=1e-9)
        np.testing.assert_allclose(d2 @ u, 6.0, rtol=1e-8)


class TestBackgrounds(unittest.TestCase):

    def test_euclidean_frame_coefficients(self):
        # Setup
        g0 = background_euclidean(3)

        # Execute
        f, w = g0.frame_coeffs(np.array([2.5]))

        # Assert
        self.assertEqual(f[0], 1.0)
        np.testing.assert_allclose(w[0], [2.5, 2.5])

    def test_eguchi_hanson_closes_at_the_bolt(self):
        # Setup
        g0 = background_eguchi_hanson(1.0)

        # Execute
        _, w = g0.frame_coeffs(np.array([1.0]))

        # Assert
        self.assertEqual(w[0, 2], 0.0)
        self.assertTrue(g0.collapses_at(1.0))
        self.assertEqual(g0.tie_groups(1.0), ((0, 3), (1, 2)))

    def test_eguchi_hanson_is_asymptotic_to_the_cone(self):
        """At r = 100, (a/r)^4 = 1e-8 so every coefficient is within 1e-7 of the cone."""
        # Setup
        g0 = background_eguchi_hanson(1.0)
        r = np.array([100.0])

        # Execute
        f, w = g0.frame_coeffs(r)
        f_cone, w_cone = g0.cone_coeffs(r)

        # Assert
        self.assertLess(abs(f[0] / f_cone[0] - 1.0), 1e-7)
        np.testing.assert_allclose(w[0] / w_cone[0], 1.0, rtol=1e-7)

    def test_rejected_backgrounds(self):
        for args in (("euclidean", 2, 1, 1.0), ("cone", 4, 1, 1.0), ("eguchi_hanson", 5, 1, 1.0), ("eguchi_hanson", 4, 1, 0.0), ("torus", 4, 1, 1.0)):
            with self.subTest(args=args):
                with self.assertRaises(BackgroundError):
                    make_background(*args)

    def test_cone_grid_must_exclude_the_apex(self):
        # Setup
        g0 = background_cone(4, 2)
        grid = build_grid(4, 0.0, 10.0, 32)

        # Execute / Assert
        with self.assertRaises(BackgroundError):
            check_grid(g0, grid)

    def test_grid_inside_the_bolt_is_rejected(self):
        # Setup
        g0 = background_eguchi_hanson(2.0)
        grid = build_grid(4, 1.0, 10.0, 32)

        # Execute / Assert
        with self.assertRaises(BackgroundError):
            check_grid(g0, grid)

    def test_cone_annulus_volume(self):
        """The Z_3 quotient of R^5 has a third of the Euclidean annulus volume."""
        # Setup
        cone = background_cone(5, 3)
        flat = background_euclidean(5)

        # Execute
        ratio = volume(cone, 1.0, 2.0) / volume(flat, 1.0, 2.0)

        # Assert
        self.assertAlmostEqual(ratio, 1.0 / 3.0, places=12)
        self.assertAlmostEqual(volume(flat, 1.0, 2.0), 8.0 * np.pi ** 2 / 3.0 * 31.0 / 5.0, places=9)

    def test_cell_volumes_add_up_to_the_shell(self):
        # Setup
        g0 = background_eguchi_hanson(1.0)
        grid = build_grid(4, 1.0, 12.0, 50, 1.02)

        # Execute
        cells = cell_volumes(g0, grid)

        # Assert
        self.assertAlmostEqual(np.sum(cells) / volume(g0, 1.0, 12.0), 1.0, places=12)
        self.assertTrue(np.all(cells > 0.0))


class TestDistanceAndVolumeGrowth(unittest.TestCase):

    def test_eguchi_hanson_distance_matches_quadrature(self):
        """s(r) = int_a^r dr / sqrt(1 - (a/r)^4), integrable at the bolt."""
        # Setup
        g0 = background_eguchi_hanson(1.0)
        r = np.array([1.0, 1.5, 2.0, 4.0])

        # Execute
        s = distance(g0, r)

        # Assert
        self.assertEqual(s[0], 0.0)
        for value, radius in zip(s[1:], r[1:]):
            expected, _ = integrate.quad(lambda x: x ** 2 / np.sqrt(x ** 4 - 1.0), 1.0, radius, limit=200)
            self.assertAlmostEqual(value, expected, places=6)

    def test_cone_distance_is_measured_from_the_inner_radius(self):
        # Setup
        g0 = background_cone(4, 2)
        grid = build_grid(4, 1.0, 11.0, 21)

        # Execute
        s = grid_distance(g0, grid)

        # Assert
        np.testing.assert_allclose(s, grid.nodes - 1.0, atol=1e-14)

    def test_avr_euclidean(self):
        for n, expected in ((4, np.pi ** 2 / 2.0), (3, 4.0 * np.pi / 3.0)):
            with self.subTest(n=n):
                # Setup
                g0 = background_euclidean(n)
                grid = build_grid(n, 0.0, 200.0, 401)

                # Execute
                avr = avr_estimate(g0, grid)

                # Assert
                self.assertLess(abs(avr.value / expected - 1.0), 0.01)
                self.assertFalse(avr.flagged)

    def test_avr_cone_and_eguchi_hanson(self):
        """Both are asymptotic to R^4/Z_2, whose ratio is pi^2/4."""
        # Setup
        cone = background_cone(4, 2)
        eh = background_eguchi_hanson(1.0)
        grid = build_grid(4, 1.0, 200.0, 400)

        # Execute
        cone_avr = avr_estimate(cone, grid)
        eh_avr = avr_estimate(eh, grid)

        # Assert
        self.assertLess(abs(cone_avr.value / (np.pi ** 2 / 4.0) - 1.0), 0.01)
        self.assertLess(abs(eh_avr.value / cone_avr.value - 1.0), 0.02)

    def test_ale_order(self):
        # Setup
        grid = build_grid(4, 1.0, 100.0, 200)

        # Execute / Assert
        self.assertAlmostEqual(ale_order_fit(background_eguchi_hanson(1.0), grid), 4.0, delta=0.1)
        self.assertEqual(ale_order_fit(background_euclidean(4), build_grid(4, 0.0, 100.0, 200)), float("inf"))


class TestTensorField(unittest.TestCase):

    def setUp(self):
        self.grid = build_grid(4, 0.0, 10.0, 16)

    def test_shape_and_finiteness_are_checked(self):
        with self.assertRaises(FieldError):
            TensorField(grid=self.grid, diag=np.zeros((16, 3)))
        diag = np.zeros((16, 4))
        diag[3, 1] = np.nan
        with self.assertRaises(FieldError):
            TensorField(grid=self.grid, diag=diag)

    def test_class_values_round_trip(self):
        # Setup
        g0 = background_euclidean(4)
        values = np.column_stack([np.linspace(0.0, 1.0, 16), np.linspace(1.0, 2.0, 16)])

        # Execute
        h = TensorField.from_classes(self.grid, values, g0.classes)

        # Assert
        np.testing.assert_array_equal(h.class_values(g0.classes), values)
        np.testing.assert_array_equal(h.diag[:, 3], values[:, 1])

    def test_cross_term_enters_the_norm_twice(self):
        # Setup
        h = TensorField(grid=self.grid, diag=np.zeros((16, 4)), cross=np.ones(16))

        # Execute / Assert
        np.testing.assert_allclose(h.pointwise_norm(), np.sqrt(2.0))
        self.assertTrue(h.includes_cross)
        np.testing.assert_allclose(h.minus(h).pointwise_norm(), 0.0)


class TestWeightedNorm(unittest.TestCase):

    def test_zero_field(self):
        # Setup
        g0 = background_euclidean(4)
        h = TensorField.zeros(build_grid(4, 0.0, 10.0, 32))

        # Execute / Assert
        for spec in (WeightSpec(2.0, 0, -1.0), WeightSpec(2.0, 2, 0.5), WeightSpec(float("inf"), 1, -2.0)):
            self.assertEqual(weighted_norm(h, spec, g0), 0.0)

    def test_weight_shift_identity(self):
        """||rho^gamma u||_{L^p_{delta+gamma}} = ||u||_{L^p_delta} on the same nodes."""
        # Setup
        g0 = background_cone(4, 2)
        grid = build_grid(4, 1.0, 10.0, 200)
        u = np.sin(grid.nodes) * np.exp(-grid.nodes / 4.0)
        rho = weight_function(g0, grid)

        for p, delta, gamma in ((2.0, -3.0, 1.5), (3.0, 0.5, -2.0), (float("inf"), -1.0, 0.7)):
            with self.subTest(p=p, delta=delta, gamma=gamma):
                # Execute
                left = weighted_norm(rho ** gamma * u, WeightSpec(p, 0, delta + gamma), g0, grid)
                right = weighted_norm(u, WeightSpec(p, 0, delta), g0, grid)

                # Assert
                self.assertAlmostEqual(left / right, 1.0, places=10)

    def test_power_on_an_annulus_matches_the_radial_integral(self):
        """u = r^-3 on [1, 10] of R^4/Z_2 with (p, k, delta) = (2, 0, -3)."""
        # Setup
        g0 = background_cone(4, 2)
        grid = build_grid(4, 1.0, 10.0, 4001)
        u = grid.nodes ** -3.0

        # Execute
        value = weighted_norm(u, WeightSpec(2.0, 0, -3.0), g0, grid)

        # Assert
        integral, _ = integrate.quad(lambda r: (1.0 + (r - 1.0) ** 2) * r ** -3.0, 1.0, 10.0)
        expected = np.sqrt(g0.link_volume * integral)
        self.assertAlmostEqual(value / expected, 1.0, places=5)

    def test_norm_does_not_grow_with_the_weight_exponent(self):
        """rho >= 1, so raising delta never raises the norm."""
        # Setup
        g0 = background_eguchi_hanson(1.0)
        grid = build_grid(4, 1.0, 12.0, 120, 1.01)
        rng = np.random.default_rng(17)
        deltas = (-3.0, -2.0, -1.0, 0.0, 0.5)
        components = len(g0.multiplicity)

        for _ in range(20):
            x = (grid.nodes - 1.0) / 3.0
            tied = np.repeat(rng.normal(size=2), 2)[[0, 2, 3, 1]]
            free = rng.normal(size=components)
            values = np.exp(-x)[:, None] * (tied[None, :] + (x ** 2)[:, None] * free[None, :])
            h = TensorField.from_classes(grid, values, g0.classes)
            for p in (2.0, float("inf")):
                for k in (0, 1):
                    with self.subTest(p=p, k=k):
                        # Execute
                        norms = [weighted_norm(h, WeightSpec(p, k, delta), g0) for delta in deltas]

                        # Assert
                        for lower, higher in zip(norms, norms[1:]):
                            self.assertLessEqual(higher, lower * (1.0 + 1e-12))

    def test_invalid_specs(self):
        with self.assertRaises(FieldError):
            WeightSpec(0.5, 0, 0.0)
        with self.assertRaises(FieldError):
            WeightSpec(2.0, -1, 0.0)


if __name__ == '__main__':
    unittest.main()
