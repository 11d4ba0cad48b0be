"""Tests for the Nelder-Mead search."""

from collections.abc import Callable

import numpy as np

from scripts.lqmm_impl.simplex import initial_steps, nelder_mead

from .lqmm_test_base import LqmmTestCase


def _quadratic(center: np.ndarray) -> Callable[[np.ndarray], float]:
    def f(x: np.ndarray) -> float:
        return float(np.sum((x - center) ** 2))

    return f


class NelderMeadTests(LqmmTestCase):
    def test_minimizes_quadratic(self) -> None:
        center = np.array([1.0, -2.0, 0.5])
        result = nelder_mead(_quadratic(center), np.zeros(3), tol=1e-10, max_iter=5000)
        self.assertTrue(result.converged)
        self.assertArrayClose(result.x, center, atol=1e-3)
        self.assertLess(result.fun, 1e-5)

    def test_non_smooth_objective(self) -> None:
        def l1(x: np.ndarray) -> float:
            return float(np.sum(np.abs(x - 3.0)))

        result = nelder_mead(l1, [0.0, 0.0], tol=1e-10, max_iter=5000)
        self.assertArrayClose(result.x, [3.0, 3.0], atol=1e-2)

    def test_best_value_never_increases(self) -> None:
        rng = np.random.default_rng(41)
        for _ in range(100):
            n = int(rng.integers(1, 5))
            center = rng.normal(size=n)
            weights = rng.uniform(0.1, 3.0, size=n)

            def f(
                x: np.ndarray, c: np.ndarray = center, w: np.ndarray = weights
            ) -> float:
                return float(np.sum(w * np.abs(x - c)) + 0.1 * np.sum((x - c) ** 2))

            result = nelder_mead(f, rng.normal(size=n), tol=1e-8, max_iter=300)
            history = np.asarray(result.history)
            self.assertTrue(np.all(np.diff(history) <= 0.0))
            self.assertEqual(result.fun, history[-1])

    def test_iteration_cap_reported_not_raised(self) -> None:
        center = np.array([5.0, 5.0])
        result = nelder_mead(_quadratic(center), [0.0, 0.0], tol=1e-15, max_iter=3)
        self.assertFalse(result.converged)
        self.assertEqual(result.iterations, 3)
        self.assertTrue(np.isfinite(result.fun))

    def test_non_finite_values_are_rejected_points(self) -> None:
        def guarded(x: np.ndarray) -> float:
            if x[0] < 0:
                return float("nan")
            return float((x[0] - 1.0) ** 2 + (x[1] + 1.0) ** 2)

        result = nelder_mead(guarded, [0.05, 0.0], tol=1e-10, max_iter=2000)
        self.assertTrue(np.isfinite(result.fun))
        self.assertArrayClose(result.x, [1.0, -1.0], atol=1e-2)

    def test_parameter_spread_keeps_a_flat_simplex_going(self) -> None:
        def plateau(x: np.ndarray) -> float:
            return float(np.sum(np.maximum(np.abs(x) - 1.0, 0.0)))

        loose = nelder_mead(plateau, [0.0, 0.0], tol=1e-3, max_iter=500)
        self.assertTrue(loose.converged)
        self.assertEqual(loose.iterations, 0)
        tight = nelder_mead(plateau, [0.0, 0.0], tol=1e-3, max_iter=500, xtol=1e-4)
        self.assertTrue(tight.converged)
        self.assertGreater(tight.iterations, 0)
        self.assertEqual(tight.fun, 0.0)

    def test_deterministic(self) -> None:
        def flat(x: np.ndarray) -> float:
            return float(np.floor(np.sum(x**2)))

        a = nelder_mead(flat, [2.0, 2.0], tol=1e-6, max_iter=200)
        b = nelder_mead(flat, [2.0, 2.0], tol=1e-6, max_iter=200)
        self.assertArrayClose(a.x, b.x)
        self.assertEqual(a.history, b.history)
        self.assertEqual(a.evaluations, b.evaluations)

    def test_initial_steps_scale_with_magnitude(self) -> None:
        self.assertArrayClose(initial_steps([0.0, 0.5, -20.0]), [0.1, 0.1, 2.0])
