"""Shared helpers for lqmm tests."""

import unittest
from collections.abc import Callable
from typing import TypeVar

import numpy as np

from scripts.lqmm_impl.bench import ScenarioConfig, Truth, generate_dataset
from scripts.lqmm_impl.config import slow_tests_enabled
from scripts.lqmm_impl.model import ClusterData, LongitudinalDataset, QuantileLevel

from . import TempDirTestCase

_T = TypeVar("_T")

DELTA = (0.8, 0.5, 1.0)
SIGMA_U = ((0.8, 0.5), (0.5, 1.0))


def slow_test(func: _T) -> _T:
    """Skip unless LQMM_SLOW_TESTS is set; acceptance-scale runs take minutes."""
    decorator: Callable[[_T], _T] = unittest.skipUnless(
        slow_tests_enabled(), "set LQMM_SLOW_TESTS=1 to run acceptance-scale tests"
    )
    return decorator(func)


def simulated(
    M: int, tau: float = 0.5, seed: int = 0, **overrides: object
) -> tuple[LongitudinalDataset, Truth]:
    """One dataset from the simulation design with M clusters of three rows."""
    config = ScenarioConfig(
        m_values=(M,), tau_grid=(tau,), **overrides  # type: ignore[arg-type]
    )
    rng = np.random.default_rng(seed)
    return generate_dataset(config, M, QuantileLevel(tau), rng)


def random_dataset(
    rng: np.random.Generator, M: int, n_max: int, p: int, q: int
) -> LongitudinalDataset:
    """Small unbalanced dataset with an intercept column in X."""
    clusters = []
    for i in range(M):
        n = int(rng.integers(1, n_max + 1))
        X = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
        Z = rng.standard_normal((n, q))
        y = rng.standard_normal(n)
        clusters.append(ClusterData(y=y, X=X, Z=Z, id=f"c{i}"))
    return LongitudinalDataset(tuple(clusters))


class LqmmTestCase(unittest.TestCase):
    """Assertion helpers for array results."""

    def assertArrayClose(
        self, actual: object, expected: object, *, atol: float = 0.0, rtol: float = 0.0
    ) -> None:
        np.testing.assert_allclose(
            np.asarray(actual), np.asarray(expected), atol=atol, rtol=rtol
        )


class LqmmTempDirTestCase(TempDirTestCase, LqmmTestCase):
    """Array helpers plus a per-test temporary directory."""
