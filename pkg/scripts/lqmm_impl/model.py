"""Domain types, the asymmetric Laplace distribution and the check function."""

from __future__ import annotations

import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from functools import cached_property
from typing import TYPE_CHECKING

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import ValidationError

if TYPE_CHECKING:
    import pandas as pd

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]

_ERR_TAU = "quantile level must lie in the open interval (0, 1), got {tau!r}"
_ERR_SIGMA = "AL scale must be positive, got {sigma!r}"
_ERR_EMPTY_CLUSTER = "cluster {id!r} has no observations"
_ERR_ROWS = "cluster {id!r}: {name} has {rows} rows, expected {n}"
_ERR_DIM = "{what}: expected length {expected}, got {got}"
_ERR_SHAPES = "all clusters must share p and q; cluster {id!r} has ({p}, {q})"
_ERR_NO_CLUSTERS = "a dataset needs at least one cluster"
_ERR_NON_NUMERIC = "columns must be numeric: {cols}"


def _frozen_array(values: ArrayLike, ndim: int) -> FloatArray:
    arr = np.array(values, dtype=np.float64)
    if ndim == 2 and arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != ndim:
        raise ValidationError(f"expected a {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("non-finite values in input array")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class QuantileLevel:
    tau: float

    def __post_init__(self) -> None:
        tau = float(self.tau)
        if not 0.0 < tau < 1.0:
            raise ValidationError(_ERR_TAU.format(tau=self.tau))
        object.__setattr__(self, "tau", tau)

    def __float__(self) -> float:
        return self.tau


@dataclass(frozen=True, eq=False)
class ClusterData:
    """One cluster's (y_i, X_i, Z_i) block; rows are observations."""

    y: FloatArray
    X: FloatArray
    Z: FloatArray
    id: str = ""

    def __post_init__(self) -> None:
        y = _frozen_array(self.y, 1)
        X = _frozen_array(self.X, 2)
        Z = _frozen_array(self.Z, 2)
        n = y.shape[0]
        if n < 1:
            raise ValidationError(_ERR_EMPTY_CLUSTER.format(id=self.id))
        for name, mat in (("X", X), ("Z", Z)):
            if mat.shape[0] != n:
                raise ValidationError(
                    _ERR_ROWS.format(id=self.id, name=name, rows=mat.shape[0], n=n)
                )
            if mat.shape[1] < 1:
                raise ValidationError(f"cluster {self.id!r}: {name} has no columns")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "id", str(self.id))

    @property
    def n(self) -> int:
        return int(self.y.shape[0])


@dataclass(frozen=True, eq=False)
class LongitudinalDataset:
    """Clustered observations; cluster order is the positional index."""

    clusters: tuple[ClusterData, ...]

    def __post_init__(self) -> None:
        clusters = tuple(self.clusters)
        if not clusters:
            raise ValidationError(_ERR_NO_CLUSTERS)
        p, q = clusters[0].X.shape[1], clusters[0].Z.shape[1]
        for c in clusters:
            if c.X.shape[1] != p or c.Z.shape[1] != q:
                raise ValidationError(
                    _ERR_SHAPES.format(id=c.id, p=c.X.shape[1], q=c.Z.shape[1])
                )
        object.__setattr__(self, "clusters", clusters)

    @property
    def M(self) -> int:
        return len(self.clusters)

    @property
    def p(self) -> int:
        return int(self.clusters[0].X.shape[1])

    @property
    def q(self) -> int:
        return int(self.clusters[0].Z.shape[1])

    @property
    def N(self) -> int:
        return sum(c.n for c in self.clusters)

    @cached_property
    def y(self) -> FloatArray:
        return np.concatenate([c.y for c in self.clusters])

    @cached_property
    def X(self) -> FloatArray:
        return np.vstack([c.X for c in self.clusters])

    @cached_property
    def Z(self) -> FloatArray:
        return np.vstack([c.Z for c in self.clusters])

    @cached_property
    def starts(self) -> NDArray[np.intp]:
        """Offsets of each cluster in the stacked arrays (for ``np.add.reduceat``)."""
        sizes = np.array([c.n for c in self.clusters], dtype=np.intp)
        return np.concatenate(([0], np.cumsum(sizes)[:-1])).astype(np.intp)

    @cached_property
    def membership(self) -> NDArray[np.intp]:
        """Cluster index of every stacked observation."""
        sizes = [c.n for c in self.clusters]
        return np.repeat(np.arange(self.M, dtype=np.intp), sizes)

    def resample(self, indices: Iterable[int]) -> LongitudinalDataset:
        return LongitudinalDataset(tuple(self.clusters[int(i)] for i in indices))

    @classmethod
    def from_frame(
        cls,
        frame: pd.DataFrame,
        *,
        response: str,
        fixed: Sequence[str],
        random: Sequence[str],
        group: str,
        intercept: bool = True,
        random_intercept: bool = True,
    ) -> LongitudinalDataset:
        """Build a dataset from a long-format frame, one row per observation.

        Clusters appear in order of first occurrence of their group label.
        """
        missing = [
            c for c in (response, group, *fixed, *random) if c not in frame.columns
        ]
        if missing:
            raise ValidationError(f"columns not found in data: {', '.join(missing)}")
        used = frame[[response, group, *dict.fromkeys([*fixed, *random])]].dropna()
        non_numeric = []
        for column in dict.fromkeys([response, *fixed, *random]):
            try:
                used[column].to_numpy(dtype=np.float64)
            except (TypeError, ValueError):
                non_numeric.append(column)
        if non_numeric:
            raise ValidationError(_ERR_NON_NUMERIC.format(cols=", ".join(non_numeric)))
        logger.debug(
            "%d of %d rows kept after dropping missing values", len(used), len(frame)
        )
        clusters = []
        for label, block in used.groupby(group, sort=False):
            n = len(block)
            X = block[list(fixed)].to_numpy(dtype=np.float64)
            Z = block[list(random)].to_numpy(dtype=np.float64)
            if intercept:
                X = np.column_stack([np.ones(n), X])
            if random_intercept:
                Z = np.column_stack([np.ones(n), Z])
            y = block[response].to_numpy(dtype=np.float64)
            clusters.append(ClusterData(y=y, X=X, Z=Z, id=str(label)))
        return cls(tuple(clusters))


@dataclass(frozen=True)
class AlParams:
    mu: float
    sigma: float
    tau: QuantileLevel

    def __post_init__(self) -> None:
        if not self.sigma > 0.0:
            raise ValidationError(_ERR_SIGMA.format(sigma=self.sigma))


@dataclass(frozen=True, eq=False)
class FixedEffects:
    beta: FloatArray

    def __post_init__(self) -> None:
        object.__setattr__(self, "beta", _frozen_array(self.beta, 1))

    @property
    def p(self) -> int:
        return int(self.beta.shape[0])


def check_function(r: ArrayLike, tau: QuantileLevel) -> FloatArray:
    """rho_tau(r) = r * (tau - I(r < 0)); elementwise, never negative."""
    arr = np.asarray(r, dtype=np.float64)
    return arr * (tau.tau - (arr < 0.0))


def al_log_density(y: ArrayLike, params: AlParams) -> FloatArray:
    tau = params.tau.tau
    resid = np.asarray(y, dtype=np.float64) - params.mu
    return np.log(tau * (1.0 - tau) / params.sigma) - check_function(
        resid, params.tau
    ) / params.sigma


def al_sample(
    params: AlParams,
    rng: np.random.Generator,
    size: int | tuple[int, ...] | None = None,
) -> FloatArray:
    """Draw from AL(mu, sigma, tau) as mu + sigma*(E1/tau - E2/(1 - tau))."""
    tau = params.tau.tau
    e1 = rng.standard_exponential(size)
    e2 = rng.standard_exponential(size)
    return np.asarray(params.mu + params.sigma * (e1 / tau - e2 / (1.0 - tau)))


def linear_predictor(
    cluster: ClusterData, beta: FixedEffects, u: ArrayLike
) -> FloatArray:
    u_vec = np.asarray(u, dtype=np.float64).reshape(-1)
    if beta.p != cluster.X.shape[1]:
        raise ValidationError(
            _ERR_DIM.format(what="beta", expected=cluster.X.shape[1], got=beta.p)
        )
    if u_vec.shape[0] != cluster.Z.shape[1]:
        raise ValidationError(
            _ERR_DIM.format(
                what="random effects", expected=cluster.Z.shape[1], got=u_vec.shape[0]
            )
        )
    return np.asarray(cluster.X @ beta.beta + cluster.Z @ u_vec)
