"""Gauss-Hermite rules and the integrated AL log-likelihood."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh_tridiagonal
from scipy.special import logsumexp

from .covariance import CovarianceParams, cholesky_factor
from .errors import QuadratureError, ValidationError
from .model import FixedEffects, FloatArray, LongitudinalDataset, QuantileLevel

logger = logging.getLogger(__name__)

MAX_KNOTS = 25
MAX_GRID_POINTS = 10**7

_ERR_KNOTS = "quadrature order K must be between 1 and {max}, got {k}"
_ERR_GRID = "tensor grid with K={k}, q={q} has {size} points (limit {limit})"
_ERR_NONFINITE = "integrated log-likelihood is not finite"


@dataclass(frozen=True, eq=False)
class HermiteRule:
    """K-point rule for the standard normal weight (weights sum to one)."""

    K: int
    nodes: FloatArray
    weights: FloatArray


@dataclass(frozen=True, eq=False)
class TensorGrid:
    q: int
    K: int
    points: FloatArray
    weights: FloatArray

    @property
    def log_weights(self) -> FloatArray:
        return np.asarray(np.log(self.weights))

    @property
    def size(self) -> int:
        return int(self.weights.shape[0])


def hermite_rule(K: int) -> HermiteRule:
    """Nodes and weights from the Jacobi matrix of probabilists' Hermite polynomials."""
    if not 1 <= K <= MAX_KNOTS:
        raise QuadratureError(_ERR_KNOTS.format(max=MAX_KNOTS, k=K))
    if K == 1:
        nodes, weights = np.zeros(1), np.ones(1)
    else:
        off = np.sqrt(np.arange(1, K, dtype=np.float64))
        nodes, vecs = eigh_tridiagonal(np.zeros(K), off)
        weights = vecs[0, :] ** 2
        # Enforce the exact symmetry of the rule about zero.
        nodes = 0.5 * (nodes - nodes[::-1])
        weights = 0.5 * (weights + weights[::-1])
        weights = weights / weights.sum()
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return HermiteRule(K=K, nodes=nodes, weights=weights)


def tensor_grid(rule: HermiteRule, q: int) -> TensorGrid:
    """All K**q node combinations in lexicographic order (last index fastest)."""
    if q < 1:
        raise ValidationError(f"q must be positive, got {q}")
    size = rule.K**q
    if size > MAX_GRID_POINTS:
        raise QuadratureError(
            _ERR_GRID.format(k=rule.K, q=q, size=size, limit=MAX_GRID_POINTS)
        )
    index = np.array(list(itertools.product(range(rule.K), repeat=q)), dtype=np.intp)
    points = rule.nodes[index]
    weights = np.prod(rule.weights[index], axis=1)
    points.setflags(write=False)
    weights.setflags(write=False)
    return TensorGrid(q=q, K=rule.K, points=points, weights=weights)


def cluster_logliks(
    data: LongitudinalDataset,
    beta: FloatArray,
    chol: FloatArray,
    sigma: float,
    tau: float,
    grid: TensorGrid,
) -> FloatArray:
    """Per-cluster log of the quadrature sum; may contain non-finite values."""
    effects = grid.points @ chol.T  # (G, q)
    mu = (data.X @ beta)[None, :] + effects @ data.Z.T  # (G, N)
    resid = data.y[None, :] - mu
    check = resid * (tau - (resid < 0.0))
    logdens = np.log(tau * (1.0 - tau) / sigma) - check / sigma
    per_cluster = np.add.reduceat(logdens, data.starts, axis=1)  # (G, M)
    return np.asarray(
        logsumexp(per_cluster + grid.log_weights[:, None], axis=0), dtype=np.float64
    )


def integrated_loglik(
    data: LongitudinalDataset,
    beta: FixedEffects,
    cov: CovarianceParams,
    sigma: float,
    tau: QuantileLevel,
    grid: TensorGrid,
) -> float:
    if beta.p != data.p:
        raise ValidationError(f"beta has length {beta.p}, data has p={data.p}")
    if cov.structure.q != data.q or grid.q != data.q:
        raise ValidationError(
            f"random-effects dimension mismatch: data q={data.q}, "
            f"covariance q={cov.structure.q}, grid q={grid.q}"
        )
    if not sigma > 0.0:
        raise ValidationError(f"sigma must be positive, got {sigma!r}")
    terms = cluster_logliks(
        data, beta.beta, cholesky_factor(cov), float(sigma), tau.tau, grid
    )
    total = float(np.sum(terms))
    if not np.isfinite(total):
        logger.error("non-finite cluster terms: %s", terms[~np.isfinite(terms)])
        raise QuadratureError(_ERR_NONFINITE)
    return total
