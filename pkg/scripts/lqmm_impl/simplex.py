"""Nelder-Mead simplex search with dimension-adaptive coefficients."""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike

from .model import FloatArray

logger = logging.getLogger(__name__)

Objective = Callable[[FloatArray], float]


@dataclass(frozen=True, eq=False)
class SimplexResult:
    x: FloatArray
    fun: float
    iterations: int
    evaluations: int
    converged: bool
    history: tuple[float, ...] = field(default=())


def _safe(func: Objective, x: FloatArray) -> float:
    val = float(func(x))
    return val if np.isfinite(val) else np.inf


def _order(points: list[FloatArray], values: list[float]) -> list[int]:
    # Exact ties fall back to lexicographic order of the parameter vector.
    return sorted(
        range(len(points)), key=lambda i: (values[i], tuple(points[i].tolist()))
    )


def _vertex_spread(points: list[FloatArray]) -> float:
    """Largest coordinate distance from the best vertex to any other."""
    return float(np.max(np.abs(np.asarray(points[1:]) - points[0])))


def initial_steps(x0: ArrayLike, scale: float = 0.1) -> FloatArray:
    x = np.asarray(x0, dtype=np.float64)
    return np.asarray(scale * np.maximum(np.abs(x), 1.0))


class _Simplex:
    """Vertices kept sorted by value, with the iteration each was created in."""

    def __init__(self, points: list[FloatArray], values: list[float]) -> None:
        self.points = points
        self.values = values
        self.born = [0] * len(points)

    def sort(self) -> None:
        order = _order(self.points, self.values)
        self.points = [self.points[i] for i in order]
        self.values = [self.values[i] for i in order]
        self.born = [self.born[i] for i in order]

    def replace_worst(self, point: FloatArray, value: float, iteration: int) -> None:
        self.points[-1], self.values[-1], self.born[-1] = point, value, iteration

    def renewed_since(self, iteration: int) -> bool:
        """Whether every vertex but the best was created after ``iteration``."""
        return all(b > iteration for b in self.born[1:])


def nelder_mead(
    func: Objective,
    x0: ArrayLike,
    *,
    tol: float,
    max_iter: int,
    step: ArrayLike | None = None,
    xtol: float | None = None,
) -> SimplexResult:
    """Minimize ``func`` from ``x0``.

    Converges when the spread of objective values over the simplex drops
    below ``tol`` and, if ``xtol`` is given, every vertex lies within
    ``xtol`` of the best one in each coordinate. It also converges when the
    best value improves by less than ``tol`` over a full cycle. A cycle lasts
    at least ``n + 1`` iterations and ends once every vertex other than the
    best has been replaced. Hitting ``max_iter`` is reported through
    ``converged=False``, never raised.
    """
    start = np.array(x0, dtype=np.float64).reshape(-1)
    n = start.shape[0]
    steps = initial_steps(start) if step is None else np.asarray(step, dtype=float)
    steps = np.broadcast_to(steps, (n,))

    # Coefficients scaled with the dimension (Gao and Han).
    alpha = 1.0
    gamma = 1.0 + 2.0 / n
    rho = 0.75 - 1.0 / (2.0 * n)
    shrink = 1.0 - 1.0 / n if n > 1 else 0.5

    points = [start]
    for i in range(n):
        vertex = start.copy()
        vertex[i] += steps[i]
        points.append(vertex)
    simplex = _Simplex(points, [_safe(func, p) for p in points])
    evaluations = n + 1

    history: list[float] = []
    cycle_start, cycle_best = 0, np.inf
    converged = False
    iterations = 0
    while True:
        simplex.sort()
        values = simplex.values
        best, worst = values[0], values[-1]
        if history and best > history[-1]:
            raise AssertionError("simplex best value increased")
        history.append(best)

        if np.isfinite(worst) and worst - best < tol:
            if xtol is None or _vertex_spread(simplex.points) < xtol:
                converged = True
                break
        if iterations - cycle_start > n and simplex.renewed_since(cycle_start):
            if cycle_best - best < tol:
                converged = True
                break
            cycle_start, cycle_best = iterations, best
        if iterations >= max_iter:
            break

        iterations += 1
        points = simplex.points
        centroid = np.mean(points[:-1], axis=0)
        reflected = centroid + alpha * (centroid - points[-1])
        f_ref = _safe(func, reflected)
        evaluations += 1

        if values[0] <= f_ref < values[-2]:
            simplex.replace_worst(reflected, f_ref, iterations)
            continue

        if f_ref < values[0]:
            expanded = centroid + gamma * (reflected - centroid)
            f_exp = _safe(func, expanded)
            evaluations += 1
            if f_exp < f_ref:
                simplex.replace_worst(expanded, f_exp, iterations)
            else:
                simplex.replace_worst(reflected, f_ref, iterations)
            continue

        if f_ref < values[-1]:
            contracted = centroid + rho * (reflected - centroid)
            f_con = _safe(func, contracted)
            evaluations += 1
            if f_con <= f_ref:
                simplex.replace_worst(contracted, f_con, iterations)
                continue
        else:
            contracted = centroid - rho * (centroid - points[-1])
            f_con = _safe(func, contracted)
            evaluations += 1
            if f_con < values[-1]:
                simplex.replace_worst(contracted, f_con, iterations)
                continue

        anchor = points[0]
        for i in range(1, n + 1):
            points[i] = anchor + shrink * (points[i] - anchor)
            values[i] = _safe(func, points[i])
            simplex.born[i] = iterations
        evaluations += n

    logger.debug(
        "simplex stop: converged=%s iterations=%d evaluations=%d best=%.6g",
        converged,
        iterations,
        evaluations,
        simplex.values[0],
    )
    return SimplexResult(
        x=simplex.points[0],
        fun=simplex.values[0],
        iterations=iterations,
        evaluations=evaluations,
        converged=converged,
        history=tuple(history),
    )
