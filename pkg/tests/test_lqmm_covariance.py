"""Tests for covariance parameterizations."""

import numpy as np

from scripts.lqmm_impl.covariance import (
    CovarianceKind,
    CovarianceParams,
    CovarianceStructure,
    cholesky_factor,
    from_matrix,
    nearest_pd,
    to_matrix,
)
from scripts.lqmm_impl.errors import CovarianceError, ValidationError

from .lqmm_test_base import SIGMA_U, LqmmTestCase

ALL_KINDS = tuple(CovarianceKind)


class StructureTests(LqmmTestCase):
    def test_parameter_counts(self) -> None:
        counts = {
            CovarianceKind.GENERAL_PD: 6,
            CovarianceKind.DIAGONAL: 3,
            CovarianceKind.IDENTITY: 1,
            CovarianceKind.COMPOUND_SYMMETRIC: 2,
        }
        for kind, m in counts.items():
            self.assertEqual(CovarianceStructure(kind, 3).n_params, m)

    def test_kind_accepts_flag_names(self) -> None:
        structure = CovarianceStructure("pdsymm", 2)  # type: ignore[arg-type]
        self.assertIs(structure.kind, CovarianceKind.GENERAL_PD)

    def test_compound_symmetry_needs_two_effects(self) -> None:
        with self.assertRaises(ValidationError):
            CovarianceStructure(CovarianceKind.COMPOUND_SYMMETRIC, 1)

    def test_theta_length_checked(self) -> None:
        structure = CovarianceStructure(CovarianceKind.GENERAL_PD, 2)
        with self.assertRaisesRegex(ValidationError, "takes 3 parameters"):
            CovarianceParams(structure, [0.0, 0.0])

    def test_zeros_is_identity(self) -> None:
        for kind in ALL_KINDS:
            structure = CovarianceStructure(kind, 3)
            self.assertArrayClose(
                to_matrix(CovarianceParams.zeros(structure)), np.eye(3), atol=1e-15
            )


class RoundTripTests(LqmmTestCase):
    def test_fixture_matrix_round_trips(self) -> None:
        structure = CovarianceStructure(CovarianceKind.GENERAL_PD, 2)
        params = from_matrix(SIGMA_U, structure)
        self.assertArrayClose(to_matrix(params), SIGMA_U, atol=1e-12)
        L = cholesky_factor(params)
        self.assertArrayClose(L @ L.T, SIGMA_U, atol=1e-12)
        self.assertTrue(np.all(np.diag(L) > 0))
        self.assertAlmostEqual(L[0, 1], 0.0)

    def test_general_pd_theta_ordering(self) -> None:
        # Row-major lower triangle with logged diagonal.
        structure = CovarianceStructure(CovarianceKind.GENERAL_PD, 2)
        L = cholesky_factor(CovarianceParams(structure, [np.log(2.0), 0.5, 0.0]))
        self.assertArrayClose(L, [[2.0, 0.0], [0.5, 1.0]], atol=1e-15)

    def test_random_theta_round_trips(self) -> None:
        rng = np.random.default_rng(21)
        for kind in ALL_KINDS:
            for q in (2, 3):
                structure = CovarianceStructure(kind, q)
                for _ in range(100):
                    theta = rng.uniform(-3.0, 3.0, structure.n_params)
                    params = CovarianceParams(structure, theta)
                    sigma = to_matrix(params)
                    back = from_matrix(sigma, structure)
                    self.assertArrayClose(back.theta, theta, atol=1e-10)
                    self.assertArrayClose(to_matrix(back), sigma, atol=1e-10)

    def test_cholesky_reconstructs_matrix(self) -> None:
        rng = np.random.default_rng(22)
        for kind in ALL_KINDS:
            structure = CovarianceStructure(kind, 3)
            for _ in range(20):
                params = CovarianceParams(
                    structure, rng.uniform(-1.0, 1.0, structure.n_params)
                )
                L = cholesky_factor(params)
                self.assertArrayClose(np.triu(L, 1), np.zeros((3, 3)))
                self.assertTrue(np.all(np.diag(L) > 0))
                self.assertArrayClose(L @ L.T, to_matrix(params), atol=1e-12)

    def test_general_pd_with_diagonal_factor_matches_diagonal(self) -> None:
        general = CovarianceStructure(CovarianceKind.GENERAL_PD, 2)
        diagonal = CovarianceStructure(CovarianceKind.DIAGONAL, 2)
        for a, b in ((0.0, 0.0), (-1.2, 0.7), (2.0, -3.0)):
            self.assertArrayClose(
                to_matrix(CovarianceParams(general, [a, 0.0, b])),
                to_matrix(CovarianceParams(diagonal, [a, b])),
                atol=1e-14,
            )

    def test_compound_symmetric_q2_uses_tanh(self) -> None:
        structure = CovarianceStructure(CovarianceKind.COMPOUND_SYMMETRIC, 2)
        sigma = to_matrix(CovarianceParams(structure, [0.0, 0.4]))
        self.assertAlmostEqual(sigma[0, 1], np.tanh(0.4), places=14)

    def test_compound_symmetric_stays_pd_for_large_q(self) -> None:
        structure = CovarianceStructure(CovarianceKind.COMPOUND_SYMMETRIC, 4)
        for z in (-3.0, 0.0, 3.0, 10.0):
            sigma = to_matrix(CovarianceParams(structure, [0.0, z]))
            self.assertGreater(np.linalg.eigvalsh(sigma).min(), -1e-12)
            self.assertGreater(sigma[0, 1], -1.0 / 3.0)


class FromMatrixErrorTests(LqmmTestCase):
    def test_not_positive_definite(self) -> None:
        structure = CovarianceStructure(CovarianceKind.GENERAL_PD, 2)
        with self.assertRaises(CovarianceError):
            from_matrix([[1.0, 2.0], [2.0, 1.0]], structure)

    def test_not_symmetric(self) -> None:
        structure = CovarianceStructure(CovarianceKind.GENERAL_PD, 2)
        with self.assertRaisesRegex(CovarianceError, "symmetric"):
            from_matrix([[1.0, 0.1], [0.2, 1.0]], structure)

    def test_wrong_shape(self) -> None:
        structure = CovarianceStructure(CovarianceKind.DIAGONAL, 2)
        with self.assertRaises(CovarianceError):
            from_matrix(np.eye(3), structure)

    def test_structure_mismatch(self) -> None:
        cases = {
            CovarianceKind.DIAGONAL: SIGMA_U,
            CovarianceKind.IDENTITY: [[1.0, 0.0], [0.0, 2.0]],
            CovarianceKind.COMPOUND_SYMMETRIC: [[1.0, 0.0], [0.0, 2.0]],
        }
        for kind, sigma in cases.items():
            with self.assertRaises(CovarianceError, msg=kind.value):
                from_matrix(sigma, CovarianceStructure(kind, 2))

    def test_covariance_error_is_validation_error(self) -> None:
        self.assertTrue(issubclass(CovarianceError, ValidationError))


class NearestPdTests(LqmmTestCase):
    def test_pd_matrix_untouched(self) -> None:
        mat, projected = nearest_pd(SIGMA_U)
        self.assertFalse(projected)
        self.assertArrayClose(mat, SIGMA_U)

    def test_indefinite_matrix_projected(self) -> None:
        mat, projected = nearest_pd([[1.0, 2.0], [2.0, 1.0]])
        self.assertTrue(projected)
        self.assertGreater(np.linalg.eigvalsh(mat).min(), 0.0)
        np.linalg.cholesky(mat)
