"""Tests for Gauss-Hermite rules and the integrated log-likelihood."""

import numpy as np
from scipy.special import factorial2, logsumexp

from scripts.lqmm_impl.covariance import (
    CovarianceKind,
    CovarianceParams,
    CovarianceStructure,
    cholesky_factor,
    from_matrix,
)
from scripts.lqmm_impl.errors import QuadratureError, ValidationError
from scripts.lqmm_impl.model import (
    AlParams,
    ClusterData,
    FixedEffects,
    LongitudinalDataset,
    QuantileLevel,
    al_log_density,
)
from scripts.lqmm_impl.quadrature import (
    MAX_KNOTS,
    hermite_rule,
    integrated_loglik,
    tensor_grid,
)

from .lqmm_test_base import LqmmTestCase, random_dataset, slow_test


def monte_carlo_loglik(
    data: LongitudinalDataset,
    beta: FixedEffects,
    cov: CovarianceParams,
    sigma: float,
    tau: QuantileLevel,
    draws: int,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Plain Monte Carlo estimate of the integrated log-likelihood and its SE."""
    L = cholesky_factor(cov)
    params = AlParams(0.0, sigma, tau)
    total, var = 0.0, 0.0
    for cluster in data.clusters:
        u = rng.standard_normal((draws, data.q)) @ L.T
        mu = cluster.X @ beta.beta + u @ cluster.Z.T  # (draws, n)
        logp = np.sum(al_log_density(cluster.y[None, :] - mu, params), axis=1)
        total += float(logsumexp(logp) - np.log(draws))
        w = np.exp(logp - logp.max())
        var += float(np.var(w) / (draws * np.mean(w) ** 2))
    return total, float(np.sqrt(var))


class HermiteRuleTests(LqmmTestCase):
    def test_closed_form_rules(self) -> None:
        one = hermite_rule(1)
        self.assertArrayClose(one.nodes, [0.0])
        self.assertArrayClose(one.weights, [1.0])
        two = hermite_rule(2)
        self.assertArrayClose(two.nodes, [-1.0, 1.0], atol=1e-14)
        self.assertArrayClose(two.weights, [0.5, 0.5], atol=1e-14)
        three = hermite_rule(3)
        self.assertArrayClose(three.nodes, [-np.sqrt(3), 0.0, np.sqrt(3)], atol=1e-14)
        self.assertArrayClose(three.weights, [1 / 6, 2 / 3, 1 / 6], atol=1e-14)

    def test_polynomial_exactness(self) -> None:
        for K in (7, 9):
            rule = hermite_rule(K)
            for d in range(2 * K):
                moment = float(np.sum(rule.weights * rule.nodes**d))
                if d % 2:
                    self.assertLess(abs(moment), 1e-9, f"K={K} d={d}")
                else:
                    exact = float(factorial2(d - 1)) if d else 1.0
                    self.assertLess(abs(moment - exact) / exact, 1e-9, f"K={K} d={d}")

    def test_weights_and_symmetry_for_every_order(self) -> None:
        for K in range(1, MAX_KNOTS + 1):
            rule = hermite_rule(K)
            self.assertAlmostEqual(float(rule.weights.sum()), 1.0, delta=1e-12)
            self.assertArrayClose(rule.nodes, -rule.nodes[::-1])
            self.assertTrue(np.all(np.diff(rule.nodes) > 0))
            self.assertAlmostEqual(
                float(np.sum(rule.weights * rule.nodes**2)),
                1.0 if K > 1 else 0.0,
                delta=1e-10,
            )

    def test_order_out_of_range(self) -> None:
        for K in (0, MAX_KNOTS + 1):
            with self.assertRaises(QuadratureError):
                hermite_rule(K)


class TensorGridTests(LqmmTestCase):
    def test_single_point(self) -> None:
        grid = tensor_grid(hermite_rule(1), 3)
        self.assertArrayClose(grid.points, [[0.0, 0.0, 0.0]])
        self.assertArrayClose(grid.weights, [1.0])

    def test_two_by_two(self) -> None:
        grid = tensor_grid(hermite_rule(2), 2)
        self.assertArrayClose(
            grid.points, [[-1, -1], [-1, 1], [1, -1], [1, 1]], atol=1e-14
        )
        self.assertArrayClose(grid.weights, [0.25] * 4, atol=1e-14)

    def test_nine_knots_two_effects(self) -> None:
        grid = tensor_grid(hermite_rule(9), 2)
        self.assertEqual(grid.size, 81)
        self.assertAlmostEqual(float(grid.weights.sum()), 1.0, delta=1e-10)

    def test_size_guard_names_order_and_dimension(self) -> None:
        with self.assertRaisesRegex(QuadratureError, "K=25, q=6"):
            tensor_grid(hermite_rule(25), 6)


class IntegratedLoglikTests(LqmmTestCase):
    def setUp(self) -> None:
        self.rng = np.random.default_rng(31)
        self.tau = QuantileLevel(0.3)

    def _params(
        self, data: LongitudinalDataset
    ) -> tuple[FixedEffects, CovarianceParams, float]:
        beta = FixedEffects(self.rng.normal(size=data.p))
        structure = CovarianceStructure(CovarianceKind.GENERAL_PD, data.q)
        theta = self.rng.uniform(-0.7, 0.2, structure.n_params)
        sigma = float(self.rng.uniform(0.5, 1.5))
        return beta, CovarianceParams(structure, theta), sigma

    def test_zero_random_design_is_plain_al(self) -> None:
        data = random_dataset(self.rng, 4, 3, 2, 2)
        flat = LongitudinalDataset(
            tuple(
                ClusterData(y=c.y, X=c.X, Z=np.zeros_like(c.Z), id=c.id)
                for c in data.clusters
            )
        )
        beta, cov, sigma = self._params(flat)
        plain = AlParams(0.0, sigma, self.tau)
        expected = float(np.sum(al_log_density(flat.y - flat.X @ beta.beta, plain)))
        for K in (1, 5, 9):
            grid = tensor_grid(hermite_rule(K), 2)
            value = integrated_loglik(flat, beta, cov, sigma, self.tau, grid)
            self.assertAlmostEqual(value, expected, delta=1e-10)

    def test_degenerate_covariance_approaches_plug_in(self) -> None:
        data = random_dataset(self.rng, 5, 3, 3, 2)
        beta = FixedEffects([0.2, -0.1, 0.4])
        structure = CovarianceStructure(CovarianceKind.DIAGONAL, 2)
        tiny = CovarianceParams(structure, [-20.0, -20.0])
        sigma = 0.7
        plain = AlParams(0.0, sigma, self.tau)
        plug_in = float(np.sum(al_log_density(data.y - data.X @ beta.beta, plain)))
        grid = tensor_grid(hermite_rule(7), 2)
        value = integrated_loglik(data, beta, tiny, sigma, self.tau, grid)
        self.assertAlmostEqual(value, plug_in, delta=1e-6)

    def test_exponential_tail_closed_form(self) -> None:
        # Every residual stays positive on the grid, so the integrand is
        # exp(a * u) up to a constant and the integral is exp(a^2 s^2 / 2).
        tau, sigma, s = QuantileLevel(0.4), 0.5, 2.0
        z = np.array([1.0, 0.5])
        cluster = ClusterData(y=[40.0, 40.0], X=np.ones((2, 1)), Z=z[:, None])
        data = LongitudinalDataset((cluster,))
        beta = FixedEffects([0.0])
        cov = from_matrix([[s**2]], CovarianceStructure(CovarianceKind.DIAGONAL, 1))
        a = tau.tau * z.sum() / sigma
        exact = (
            2 * np.log(tau.tau * (1 - tau.tau) / sigma)
            - tau.tau * 80.0 / sigma
            + 0.5 * a**2 * s**2
        )
        errors = []
        for K in (3, 5, 7, 9):
            grid = tensor_grid(hermite_rule(K), 1)
            value = integrated_loglik(data, beta, cov, sigma, tau, grid)
            errors.append(abs(value - exact))
        self.assertEqual(errors, sorted(errors, reverse=True))
        self.assertGreater(errors[0], errors[-1])
        fine = tensor_grid(hermite_rule(25), 1)
        value = integrated_loglik(data, beta, cov, sigma, tau, fine)
        self.assertAlmostEqual(value, exact, delta=1e-9)

    def test_cluster_and_row_permutation_invariance(self) -> None:
        grid = tensor_grid(hermite_rule(5), 2)
        for _ in range(100):
            data = random_dataset(self.rng, 4, 3, 2, 2)
            beta, cov, sigma = self._params(data)
            base = integrated_loglik(data, beta, cov, sigma, self.tau, grid)
            shuffled = data.resample(self.rng.permutation(data.M))
            rows = []
            for c in shuffled.clusters:
                perm = self.rng.permutation(c.n)
                rows.append(ClusterData(y=c.y[perm], X=c.X[perm], Z=c.Z[perm]))
            permuted = LongitudinalDataset(tuple(rows))
            value = integrated_loglik(permuted, beta, cov, sigma, self.tau, grid)
            self.assertAlmostEqual(value, base, delta=1e-9)

    def test_scale_equivariance(self) -> None:
        # y -> c*y with (beta, sigma, Sigma) -> (c*beta, c*sigma, c^2*Sigma)
        # shifts the log-likelihood by -N*log(c).
        grid = tensor_grid(hermite_rule(5), 2)
        structure = CovarianceStructure(CovarianceKind.GENERAL_PD, 2)
        for _ in range(100):
            data = random_dataset(self.rng, 3, 3, 2, 2)
            beta, cov, sigma = self._params(data)
            c = float(self.rng.uniform(0.2, 5.0))
            scaled = LongitudinalDataset(
                tuple(
                    ClusterData(y=c * cl.y, X=cl.X, Z=cl.Z) for cl in data.clusters
                )
            )
            theta = cov.theta.copy()
            theta[[0, 2]] += np.log(c)
            theta[1] *= c
            scaled_cov = CovarianceParams(structure, theta)
            base = integrated_loglik(data, beta, cov, sigma, self.tau, grid)
            value = integrated_loglik(
                scaled,
                FixedEffects(c * beta.beta),
                scaled_cov,
                c * sigma,
                self.tau,
                grid,
            )
            self.assertAlmostEqual(value, base - data.N * np.log(c), delta=1e-8)

    def test_translation_consistency(self) -> None:
        grid = tensor_grid(hermite_rule(5), 2)
        for _ in range(50):
            data = random_dataset(self.rng, 3, 3, 2, 2)
            beta, cov, sigma = self._params(data)
            shift = float(self.rng.uniform(-10.0, 10.0))
            moved = LongitudinalDataset(
                tuple(
                    ClusterData(y=cl.y + shift, X=cl.X, Z=cl.Z) for cl in data.clusters
                )
            )
            moved_beta = FixedEffects(beta.beta + np.array([shift, 0.0]))
            base = integrated_loglik(data, beta, cov, sigma, self.tau, grid)
            value = integrated_loglik(moved, moved_beta, cov, sigma, self.tau, grid)
            self.assertAlmostEqual(value, base, delta=1e-8)

    def test_dimension_and_scale_errors(self) -> None:
        data = random_dataset(self.rng, 2, 2, 2, 2)
        beta, cov, sigma = self._params(data)
        grid = tensor_grid(hermite_rule(3), 2)
        with self.assertRaises(ValidationError):
            integrated_loglik(data, FixedEffects([1.0]), cov, sigma, self.tau, grid)
        with self.assertRaises(ValidationError):
            integrated_loglik(
                data, beta, cov, sigma, self.tau, tensor_grid(hermite_rule(3), 1)
            )
        with self.assertRaises(ValidationError):
            integrated_loglik(data, beta, cov, 0.0, self.tau, grid)

    def _check_against_monte_carlo(self, draws: int, instances: int) -> None:
        grid_cache = {q: tensor_grid(hermite_rule(15), q) for q in (1, 2)}
        for i in range(instances):
            q = 1 + i % 2
            data = random_dataset(self.rng, int(self.rng.integers(1, 4)), 3, 2, q)
            beta, cov, sigma = self._params(data)
            value = integrated_loglik(data, beta, cov, sigma, self.tau, grid_cache[q])
            oracle, se = monte_carlo_loglik(
                data, beta, cov, sigma, self.tau, draws, self.rng
            )
            self.assertLess(abs(value - oracle), 3 * se + 1e-12, f"instance {i}")

    def test_matches_monte_carlo_oracle(self) -> None:
        self._check_against_monte_carlo(draws=100_000, instances=4)

    @slow_test
    def test_matches_monte_carlo_oracle_full_scale(self) -> None:
        self._check_against_monte_carlo(draws=1_000_000, instances=10)
