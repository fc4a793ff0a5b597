import numpy as np
from django.test import SimpleTestCase

from .exceptions import DimensionError, NumericalError
from .linalg import as_matrix, matmul, relative_error, seeded_rng, svd


class SvdTests(SimpleTestCase):
    def assertOrthonormalColumns(self, m, tol=1e-10):
        np.testing.assert_allclose(m.T @ m, np.eye(m.shape[1]), atol=tol)

    def test_tall_and_wide_reconstruct(self):
        rng = seeded_rng(3)
        for shape in [(7, 5), (5, 7), (6, 6), (1, 4), (4, 1)]:
            with self.subTest(shape=shape):
                m = rng.standard_normal(shape)
                result = svd(m)
                self.assertEqual(result.k, min(shape))
                self.assertLess(relative_error(result.reconstruct(), m), 1e-10)
                self.assertOrthonormalColumns(result.u)
                self.assertOrthonormalColumns(result.vt.T)

    def test_singular_values_match_lapack(self):
        m = seeded_rng(11).standard_normal((9, 6))
        expected = np.linalg.svd(m, compute_uv=False)
        np.testing.assert_allclose(svd(m).singular_values, expected, rtol=1e-10)

    def test_values_sorted_non_increasing(self):
        values = svd(seeded_rng(5).standard_normal((8, 8))).singular_values
        self.assertTrue(np.all(np.diff(values) <= 0))

    def test_sign_convention(self):
        u = svd(seeded_rng(7).standard_normal((6, 4))).u
        pivots = np.argmax(np.abs(u), axis=0)
        self.assertTrue(np.all(u[pivots, np.arange(4)] >= 0))

    def test_deterministic(self):
        m = seeded_rng(1).standard_normal((5, 3))
        a, b = svd(m), svd(m.copy())
        np.testing.assert_array_equal(a.u, b.u)
        np.testing.assert_array_equal(a.vt, b.vt)

    def test_rank_deficient_basis_is_completed(self):
        rng = seeded_rng(2)
        m = np.outer(rng.standard_normal(4), rng.standard_normal(3))
        result = svd(m)
        self.assertGreater(result.singular_values[0], 0)
        np.testing.assert_array_equal(result.singular_values[1:], 0.0)
        self.assertOrthonormalColumns(result.u)
        self.assertLess(relative_error(result.reconstruct(), m), 1e-10)

    def test_zero_matrix(self):
        result = svd(np.zeros((3, 2)))
        np.testing.assert_array_equal(result.singular_values, 0.0)
        self.assertOrthonormalColumns(result.u)

    def test_diagonal(self):
        result = svd(np.diag([1.0, 3.0]))
        np.testing.assert_allclose(result.singular_values, [3.0, 1.0])
        self.assertAlmostEqual(result.tail_energy(1), 1.0)
        self.assertEqual(result.tail_energy(2), 0.0)

    def test_large_round_trip(self):
        rng = seeded_rng(13)
        for shape in [(256, 256), (200, 256)]:
            with self.subTest(shape=shape):
                m = rng.standard_normal(shape)
                self.assertLess(relative_error(svd(m).reconstruct(), m), 1e-8)

    def test_truncation_residual_is_tail_energy(self):
        rng = seeded_rng(17)
        for shape in [(12, 9), (9, 12), (30, 30)]:
            m = rng.standard_normal(shape)
            result = svd(m)
            for k in range(min(shape) + 1):
                with self.subTest(shape=shape, k=k):
                    residual = np.linalg.norm(m - result.reconstruct(k))
                    self.assertAlmostEqual(residual, result.tail_energy(k), delta=1e-8)

    def test_extreme_scales(self):
        m = seeded_rng(19).standard_normal((5, 5))
        expected = np.linalg.svd(m, compute_uv=False)
        for scale in (1e-200, 1e-170, 1e160, 1e300):
            with self.subTest(scale=scale):
                result = svd(m * scale)
                np.testing.assert_allclose(result.singular_values / scale, expected, rtol=1e-10)
                self.assertLess(relative_error(result.reconstruct() / scale, m), 1e-10)
        np.testing.assert_allclose(svd(np.diag([3.0, 1.0]) * 1e-170).singular_values / 1e-170, [3.0, 1.0])

    def test_non_convergence_reports_sweeps(self):
        with self.assertRaises(NumericalError) as ctx:
            svd(seeded_rng(4).standard_normal((6, 6)), max_sweeps=1)
        self.assertEqual(ctx.exception.iterations, 1)
        self.assertEqual(ctx.exception.exit_code, 4)


class HelperTests(SimpleTestCase):
    def test_matmul_names_shapes(self):
        with self.assertRaisesMessage(DimensionError, '(2, 3) by (2, 3)'):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_matmul_hand_product_and_associativity(self):
        np.testing.assert_array_equal(matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.ones((2, 1))), [[3.0], [7.0]])
        rng = seeded_rng(23)
        for _ in range(20):
            n, k, p, q = rng.integers(1, 40, size=4)
            a, b, c = rng.standard_normal((n, k)), rng.standard_normal((k, p)), rng.standard_normal((p, q))
            left = matmul(matmul(a, b), c)
            right = matmul(a, matmul(b, c))
            self.assertEqual(left.shape, (n, q))
            self.assertLess(relative_error(left, right), 1e-9)

    def test_as_matrix_rejects_vectors_and_nan(self):
        with self.assertRaises(DimensionError):
            as_matrix([1.0, 2.0])
        with self.assertRaises(ValueError):
            as_matrix([[1.0, np.nan]])

    def test_relative_error_falls_back_to_absolute(self):
        self.assertEqual(relative_error(np.ones(2), np.zeros(2)), np.sqrt(2))
        self.assertEqual(relative_error([2.0], [1.0]), 1.0)

    def test_seeded_rng(self):
        a = seeded_rng(2 ** 64 - 1).standard_normal(4)
        b = seeded_rng(2 ** 64 - 1).standard_normal(4)
        np.testing.assert_array_equal(a, b)
        with self.assertRaises(ValueError):
            seeded_rng(-1)
        with self.assertRaises(ValueError):
            seeded_rng(2 ** 64)
