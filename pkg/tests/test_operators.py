# tests/test_operators.py
import unittest

import numpy as np

from ale_flow_lab.geometry import (
    TensorField,
    background_cone,
    background_eguchi_hanson,
    background_euclidean,
    build_grid,
    cell_volumes,
)
from ale_flow_lab.operators import (
    check_positive,
    close_inner_node,
    connection_curvature,
    curvature_decay,
    deturck_vector,
    direct_rhs,
    divergence_commutator,
    lichnerowicz,
    lie_correction,
    lie_correction_matrix,
    one_form_laplacian,
    rhs_context,
    rhs_expansion,
    ricci,
    ricci_deturck_rhs,
    scalar_laplacian,
    scaling_mode,
    trace_divergence,
)
from ale_flow_lab.utils import BackgroundError, FieldError, MetricError, StationarityError


def _backgrounds():
    """(name, g0, grid) for the three background kinds on moderate grids."""
    return (
        ("euclidean", background_euclidean(4), build_grid(4, 0.0, 12.0, 121)),
        ("cone", background_cone(4, 2), build_grid(4, 1.0, 12.0, 111)),
        ("eguchi_hanson", background_eguchi_hanson(1.0), build_grid(4, 1.0, 12.0, 160, 1.01)),
    )


def _bump(g0, grid, weights, width=2.0):
    """Smooth invariant field with one profile per component class, zero slope at r_min."""
    x = grid.nodes - grid.r_min
    profile = np.exp(-(x / width) ** 2)
    values = profile[:, None] * np.asarray(weights, dtype=float)[None, :]
    return TensorField.from_classes(grid, values, g0.classes)


def _tied_field(g0, grid, rng, width=2.0):
    """Random smooth field that satisfies the inner ties: a tied bump plus a bump vanishing at r_min."""
    x = (grid.nodes - grid.r_min) / width
    m = len(g0.classes)
    tied = np.empty(m)
    for group in g0.tie_groups(grid.r_min) or tuple((j,) for j in range(m)):
        tied[list(group)] = rng.normal()
    free = rng.normal(size=m)
    values = np.exp(-x ** 2)[:, None] * (tied[None, :] + (x ** 2)[:, None] * free[None, :])
    return TensorField.from_classes(grid, values, g0.classes)


class TestStationaryPoint(unittest.TestCase):

    def test_zero_perturbation_is_stationary_bit_for_bit(self):
        for name, g0, grid in _backgrounds():
            with self.subTest(background=name):
                # Setup
                ctx = rhs_context(g0, grid)
                H = np.zeros((grid.size, len(g0.classes)))

                # Execute
                rhs = direct_rhs(ctx, H)

                # Assert
                np.testing.assert_array_equal(rhs, 0.0)

    def test_constant_rescaling_is_stationary(self):
        """Ricci tensor and Christoffel symbols are invariant under g -> c g."""
        for name, g0, grid in _backgrounds():
            with self.subTest(background=name):
                # Setup
                h = TensorField.from_classes(grid, np.full((grid.size, len(g0.classes)), 0.5), g0.classes)

                # Execute
                rhs = ricci_deturck_rhs(h, g0, path="direct")
                v = deturck_vector(h, g0)

                # Assert
                self.assertLess(np.max(np.abs(rhs.diag)), 1e-9)
                self.assertLess(np.max(np.abs(v)), 1e-9)

    def test_deturck_vector_vanishes_at_the_background(self):
        for name, g0, grid in _backgrounds():
            with self.subTest(background=name):
                np.testing.assert_array_equal(deturck_vector(TensorField.zeros(grid), g0), 0.0)


class TestCurvature(unittest.TestCase):

    def test_flat_ricci_vanishes(self):
        # Setup
        g0 = background_euclidean(4)
        grid = build_grid(4, 0.0, 10.0, 64)

        # Execute
        ric = ricci(TensorField.zeros(grid), g0)

        # Assert
        self.assertLess(np.max(np.abs(ric.diag)), 1e-12)

    def test_eguchi_hanson_is_ricci_flat(self):
        # Setup
        g0 = background_eguchi_hanson(1.0)
        grid = build_grid(4, 1.0, 20.0, 200, 1.01)

        # Execute
        ric = ricci(TensorField.zeros(grid), g0)
        geometry = connection_curvature(TensorField.zeros(grid), g0)

        # Assert
        self.assertLess(np.max(np.abs(ric.diag)), 1e-9)
        self.assertLess(geometry.symmetry_residual(), 1e-9)
        self.assertLess(geometry.ricci_trace_residual(), 1e-9)

    def test_curvature_scales_inversely_with_the_metric(self):
        """Rm(c g0), measured in the c g0 orthonormal frame, is Rm(g0) / c."""
        # Setup
        g0 = background_eguchi_hanson(1.0)
        grid = build_grid(4, 1.0, 10.0, 120, 1.01)
        c = 3.0
        scaled = TensorField.from_classes(grid, np.full((grid.size, 4), c - 1.0), g0.classes)

        # Execute
        base = connection_curvature(TensorField.zeros(grid), g0).riemann
        stretched = connection_curvature(scaled, g0).riemann

        # Assert
        np.testing.assert_allclose(stretched, base / c, rtol=0, atol=1e-9 * np.max(np.abs(base)))

    def test_eguchi_hanson_curvature_decays_like_r_minus_six(self):
        """|Rm|^2 = 384 a^8 / r^12 on Eguchi-Hanson."""
        # Setup
        g0 = background_eguchi_hanson(1.0)
        grid = build_grid(4, 1.0, 40.0, 300, 1.01)

        # Execute
        decay = curvature_decay(g0, grid)

        # Assert
        self.assertAlmostEqual(decay.sextic_constant / np.sqrt(384.0), 1.0, delta=0.02)
        self.assertTrue(np.isfinite(decay.quadratic_constant))

    def test_flat_cone_has_no_curvature(self):
        # Setup
        g0 = background_cone(4, 2)
        grid = build_grid(4, 1.0, 10.0, 64)

        # Execute
        geometry = connection_curvature(TensorField.zeros(grid), g0)

        # Assert
        self.assertLess(np.max(np.abs(geometry.riemann)), 1e-12)


class TestRightHandSide(unittest.TestCase):

    def test_direct_and_coordinate_forms_agree(self):
        """The two right-hand sides differ at most by discretization error that shrinks with refinement."""
        # Setup
        g0 = background_eguchi_hanson(1.0)
        differences = []
        for nodes in (120, 240):
            grid = build_grid(4, 1.0, 12.0, nodes, 1.0)
            h = _bump(g0, grid, [0.02, -0.005, -0.005, 0.02])

            # Execute
            direct = ricci_deturck_rhs(h, g0, path="direct").diag
            shi = ricci_deturck_rhs(h, g0, path="shi").diag
            interior = slice(2, -2)
            scale = np.max(np.abs(direct[interior]))
            differences.append(np.max(np.abs(direct[interior] - shi[interior])) / scale)

        # Assert
        self.assertLess(differences[1], max(differences[0] / 2.5, 1e-8))

    def test_remainder_is_quadratic(self):
        """Around g0 the remainder of the expansion scales like eps^2."""
        # Setup
        g0 = background_euclidean(4)
        grid = build_grid(4, 0.0, 12.0, 121)
        r = grid.nodes
        phi = np.exp(-r ** 2 / 4.0)
        h = TensorField.from_classes(grid, np.column_stack([phi * (1.0 + r ** 2 / 8.0), phi * (1.0 - r ** 2 / 16.0)]), g0.classes)
        zero = TensorField.zeros(grid)
        ratios = []
        for eps in (1e-3, 1e-4):
            # Execute
            split = rhs_expansion(h.scaled(eps), zero, g0)
            ratios.append(np.max(np.abs(split.remainder.diag[:-1])) / eps ** 2)
            self.assertLess(split.split_residual(), 1e-12)

        # Assert
        self.assertAlmostEqual(ratios[1] / ratios[0], 1.0, delta=0.05)

    def test_linearization_converges_at_second_order(self):
        """||Phi(g0 + eps h) - eps L h|| drops fourfold when eps halves, for random unit directions."""
        cases = (
            (background_euclidean(4), build_grid(4, 0.0, 12.0, 121)),
            (background_eguchi_hanson(1.0), build_grid(4, 1.0, 12.0, 160, 1.01)),
        )
        rng = np.random.default_rng(5)
        for g0, grid in cases:
            mass = cell_volumes(g0, grid)[:-1]
            zero = TensorField.zeros(grid)
            for _ in range(10):
                with self.subTest(background=g0.kind):
                    # Setup
                    h = _tied_field(g0, grid, rng, width=rng.uniform(1.5, 3.0))
                    h = h.scaled(1.0 / np.max(h.pointwise_norm()))
                    norms = []

                    # Execute
                    for eps in (1e-2, 5e-3):
                        remainder = rhs_expansion(h.scaled(eps), zero, g0).remainder
                        norms.append(np.sqrt(np.sum(mass * remainder.pointwise_norm()[:-1] ** 2)))

                    # Assert
                    self.assertGreaterEqual(norms[0] / norms[1], 3.5)
                    self.assertLessEqual(norms[0] / norms[1], 4.5)

    def test_lie_correction_vanishes_at_the_background(self):
        # Setup
        g0 = background_eguchi_hanson(1.0)
        grid = build_grid(4, 1.0, 10.0, 64, 1.01)
        h = _bump(g0, grid, [1.0, -1.0, -1.0, 1.0])

        # Execute
        correction = lie_correction(h, TensorField.zeros(grid), g0)
        matrix = lie_correction_matrix(TensorField.zeros(grid), g0)

        # Assert
        np.testing.assert_array_equal(correction.diag, 0.0)
        self.assertEqual(abs(matrix).sum(), 0.0)

    def test_non_stationary_reference_is_rejected(self):
        # Setup
        g0 = background_euclidean(4)
        grid = build_grid(4, 0.0, 10.0, 64)
        gbar = _bump(g0, grid, [0.1, 0.05])

        # Execute / Assert
        with self.assertRaises(StationarityError):
            rhs_expansion(TensorField.zeros(grid), gbar, g0)


class TestLichnerowicz(unittest.TestCase):

    def test_flat_conformal_field_gives_the_scalar_laplacian(self):
        # Setup
        g0 = background_euclidean(4)
        grid = build_grid(4, 0.0, 10.0, 101)
        phi = np.exp(-grid.nodes ** 2 / 4.0)
        h = TensorField.from_classes(grid, np.column_stack([phi, phi]), g0.classes)

        # Execute
        lh = lichnerowicz(g0, h)

        # Assert
        expected = scalar_laplacian(g0, grid, phi)
        for column in range(2):
            np.testing.assert_allclose(lh.class_values(g0.classes)[:, column], expected, rtol=1e-12, atol=1e-14)

    def test_background_metric_is_in_the_kernel(self):
        # Setup
        g0 = background_eguchi_hanson(1.0)
        grid = build_grid(4, 1.0, 10.0, 100, 1.01)
        h = TensorField.from_classes(grid, np.ones((grid.size, 4)), g0.classes)

        # Execute
        lh = lichnerowicz(g0, h)

        # Assert
        self.assertLess(np.max(np.abs(lh.diag)), 1e-12)

    def test_trace_commutes_with_the_operator(self):
        """tr L h = Delta tr h for random smooth fields."""
        # Setup
        rng = np.random.default_rng(7)
        for name, g0, grid in _backgrounds():
            for _ in range(5):
                with self.subTest(background=name):
                    weights = rng.normal(size=len(g0.classes))
                    h = _bump(g0, grid, weights, width=rng.uniform(1.0, 4.0))

                    # Execute
                    trace_of_lh, _ = trace_divergence(lichnerowicz(g0, h), g0)
                    trace, _ = trace_divergence(h, g0)
                    laplacian_of_trace = scalar_laplacian(g0, grid, trace)

                    # Assert
                    scale = max(1.0, np.max(np.abs(laplacian_of_trace)))
                    self.assertLess(np.max(np.abs(trace_of_lh - laplacian_of_trace)), 1e-8 * scale)


class TestDivergenceCommutator(unittest.TestCase):

    def test_one_form_laplacian_of_a_radial_form(self):
        """On R^4, w = r exp(-r^2) gives w'' + 3w'/r - 3w/r^2 = (4r^3 - 12r) exp(-r^2)."""
        # Setup
        g0 = background_euclidean(4)
        grid = build_grid(4, 0.0, 10.0, 401)
        r = grid.nodes
        w = r * np.exp(-r ** 2)

        # Execute
        laplacian = one_form_laplacian(g0, grid, w)

        # Assert
        expected = (4.0 * r ** 3 - 12.0 * r) * np.exp(-r ** 2)
        interior = (r > 0.5) & (r < 9.0)
        self.assertEqual(laplacian[0], 0.0)
        np.testing.assert_allclose(laplacian[interior], expected[interior], rtol=0, atol=1e-2 * np.max(np.abs(expected)))

    def test_divergence_commutes_with_the_operator_under_refinement(self):
        """div L h - Delta_1 div h shrinks at second order on nested uniform grids."""
        rng = np.random.default_rng(13)
        cases = (
            (background_euclidean(4), 0.0),
            (background_eguchi_hanson(1.0), 1.0),
        )
        for g0, r_min in cases:
            for _ in range(5):
                with self.subTest(background=g0.kind):
                    # Setup
                    state = rng.bit_generator.state
                    defects = []

                    # Execute
                    for nodes in (121, 241):
                        rng.bit_generator.state = state
                        grid = build_grid(4, r_min, r_min + 12.0, nodes)
                        defects.append(divergence_commutator(_tied_field(g0, grid, rng), g0))

                    # Assert
                    self.assertLess(defects[0], 0.1)
                    self.assertLess(defects[1], max(defects[0] / 3.0, 1e-10))


class TestFrameCovariance(unittest.TestCase):
    """Relabelling the two equal Eguchi-Hanson axes commutes with every operator."""

    def setUp(self):
        self.g0 = background_eguchi_hanson(1.0)
        self.grid = build_grid(4, 1.0, 12.0, 160, 1.01)
        self.swap = [0, 2, 1, 3]

    def _swapped(self, h):
        return TensorField.from_classes(self.grid, h.class_values(self.g0.classes)[:, self.swap], self.g0.classes)

    def _assert_commutes(self, original, swapped):
        expected = original[:, self.swap]
        scale = max(1.0, np.max(np.abs(expected)))
        np.testing.assert_allclose(swapped, expected, rtol=0, atol=1e-12 * scale)

    def test_operators_commute_with_the_relabelling(self):
        rng = np.random.default_rng(17)
        g0 = self.g0
        ctx = rhs_context(g0, self.grid)
        for _ in range(5):
            # Setup
            h = _tied_field(g0, self.grid, rng).scaled(0.05)
            swapped = self._swapped(h)

            # Execute / Assert
            H = h.class_values(g0.classes)
            self._assert_commutes(direct_rhs(ctx, H), direct_rhs(ctx, swapped.class_values(g0.classes)))
            for conservative in (True, False):
                self._assert_commutes(
                    lichnerowicz(g0, h, conservative=conservative).class_values(g0.classes),
                    lichnerowicz(g0, swapped, conservative=conservative).class_values(g0.classes),
                )
            self._assert_commutes(ricci(h, g0).class_values(g0.classes), ricci(swapped, g0).class_values(g0.classes))
            trace, div = trace_divergence(h, g0)
            trace_swapped, div_swapped = trace_divergence(swapped, g0)
            np.testing.assert_allclose(trace_swapped, trace, rtol=0, atol=1e-14)
            np.testing.assert_allclose(div_swapped, div, rtol=0, atol=1e-12 * max(1.0, np.max(np.abs(div))))


class TestTraceDivergence(unittest.TestCase):

    def test_background_metric(self):
        for name, g0, grid in _backgrounds():
            with self.subTest(background=name):
                # Setup
                h = TensorField.from_classes(grid, np.ones((grid.size, len(g0.classes))), g0.classes)

                # Execute
                trace, div = trace_divergence(h, g0)

                # Assert
                np.testing.assert_allclose(trace, 4.0)
                self.assertLess(np.max(np.abs(div)), 1e-9)

    def test_divergence_of_a_hessian(self):
        """On R^4, div Hess(phi) = d/dr (Delta phi) for radial phi."""
        # Setup
        g0 = background_euclidean(4)
        grid = build_grid(4, 0.0, 10.0, 401)
        r = grid.nodes
        phi1 = -0.5 * r * np.exp(-r ** 2 / 4.0)
        phi2 = (0.25 * r ** 2 - 0.5) * np.exp(-r ** 2 / 4.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            tangential = np.where(r > 0.0, phi1 / r, -0.5)
        h = TensorField.from_classes(grid, np.column_stack([phi2, tangential]), g0.classes)
        # Delta phi = phi'' + 3 phi'/r = (r^2/4 - 2) exp(-r^2/4)
        expected = (0.5 * r - (0.25 * r ** 2 - 2.0) * 0.5 * r) * np.exp(-r ** 2 / 4.0)

        # Execute
        _, div = trace_divergence(h, g0)

        # Assert
        interior = (r > 0.5) & (r < 8.0)
        np.testing.assert_allclose(div[interior], expected[interior], rtol=0, atol=2e-3)

    def test_scaling_mode_is_traceless_and_divergence_free(self):
        # Setup
        g0 = background_eguchi_hanson(1.0)
        grid = build_grid(4, 1.0, 20.0, 400, 1.01)

        # Execute
        mode = scaling_mode(g0, grid)
        trace, div = trace_divergence(mode, g0)

        # Assert
        self.assertEqual(mode.diag[0, 0], 1.0)
        np.testing.assert_allclose(trace, 0.0, atol=1e-15)
        self.assertLess(np.max(np.abs(div)), 4e-3)

    def test_scaling_mode_needs_a_bolt(self):
        with self.assertRaises(BackgroundError):
            scaling_mode(background_euclidean(4), build_grid(4, 0.0, 10.0, 32))


class TestGuards(unittest.TestCase):

    def test_degenerate_metric_names_the_node(self):
        # Setup
        grid = build_grid(4, 0.0, 10.0, 32)
        diag = np.zeros((32, 4))
        diag[5, 0] = -1.0
        h = TensorField(grid=grid, diag=diag)

        # Execute / Assert
        with self.assertRaises(MetricError) as caught:
            check_positive(h)
        self.assertEqual(caught.exception.node, 5)

    def test_cross_term_is_rejected_by_curvature_operators(self):
        # Setup
        grid = build_grid(4, 0.0, 10.0, 32)
        h = TensorField(grid=grid, diag=np.zeros((32, 4)), cross=np.full(32, 1e-3))

        # Execute / Assert
        with self.assertRaises(FieldError):
            ricci(h, background_euclidean(4))

    def test_inner_closure_reproduces_even_quadratics(self):
        # Setup
        g0 = background_cone(4, 2)
        grid = build_grid(4, 1.0, 10.0, 40, 1.02)
        u = 2.0 + 3.0 * (grid.nodes - 1.0) ** 2
        values = np.column_stack([u, u])
        values[0] = 0.0

        # Execute
        closed = close_inner_node(g0, grid, values)

        # Assert
        self.assertAlmostEqual(closed[0, 0], 2.0, places=12)
        np.testing.assert_array_equal(closed[1:], values[1:])


if __name__ == '__main__':
    unittest.main()
