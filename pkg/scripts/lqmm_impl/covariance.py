"""Parameterizations between the unconstrained vector theta and Sigma.

GeneralPD stores the log-Cholesky factor (diagonal as logs, strict lower
triangle raw, row-major), Diagonal and Identity store log standard
deviations, CompoundSymmetric stores (log sd, z) with the common
correlation a monotone map of z.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike

from .errors import CovarianceError, ValidationError
from .model import FloatArray

_ERR_THETA_LEN = "{kind} with q={q} takes {m} parameters, got {got}"
_ERR_SHAPE = "expected a {q}x{q} matrix, got shape {shape}"
_ERR_NOT_SYMMETRIC = "covariance matrix is not symmetric"
_ERR_NOT_PD = "covariance matrix is not positive definite"
_ERR_NOT_DIAGONAL = "off-diagonal mass is not allowed under {kind}"
_ERR_NOT_IDENTITY = "{kind} needs equal variances on the diagonal"
_ERR_NOT_COMPSYMM = "{kind} needs equal variances and equal covariances"
_ERR_COMPSYMM_Q = "compound symmetry needs at least two random effects"

_SYMMETRY_TOL = 1e-10
_STRUCTURE_TOL = 1e-12


class CovarianceKind(str, enum.Enum):
    GENERAL_PD = "pdsymm"
    DIAGONAL = "pddiag"
    IDENTITY = "pdident"
    COMPOUND_SYMMETRIC = "pdcompsymm"


@dataclass(frozen=True)
class CovarianceStructure:
    kind: CovarianceKind
    q: int

    def __post_init__(self) -> None:
        kind = CovarianceKind(self.kind)
        if self.q < 1:
            raise ValidationError(f"q must be positive, got {self.q}")
        if kind is CovarianceKind.COMPOUND_SYMMETRIC and self.q < 2:
            raise ValidationError(_ERR_COMPSYMM_Q)
        object.__setattr__(self, "kind", kind)

    @property
    def n_params(self) -> int:
        if self.kind is CovarianceKind.GENERAL_PD:
            return self.q * (self.q + 1) // 2
        if self.kind is CovarianceKind.DIAGONAL:
            return self.q
        if self.kind is CovarianceKind.IDENTITY:
            return 1
        return 2


@dataclass(frozen=True, eq=False)
class CovarianceParams:
    structure: CovarianceStructure
    theta: FloatArray

    def __post_init__(self) -> None:
        theta = np.array(self.theta, dtype=np.float64).reshape(-1)
        m = self.structure.n_params
        if theta.shape[0] != m:
            raise ValidationError(
                _ERR_THETA_LEN.format(
                    kind=self.structure.kind.value,
                    q=self.structure.q,
                    m=m,
                    got=theta.shape[0],
                )
            )
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def zeros(cls, structure: CovarianceStructure) -> CovarianceParams:
        """Unit variances, zero correlations."""
        return cls(structure, np.zeros(structure.n_params))


def _compsymm_rho(z: float, q: int) -> float:
    # q = 2 reduces to tanh(z); the range (-1/(q-1), 1) keeps Sigma PD.
    if z >= 0.0:
        e = np.exp(-2.0 * z)
        return float((1.0 - e) / (1.0 + (q - 1) * e))
    e = np.exp(2.0 * z)
    return float((e - 1.0) / (e + q - 1))


def _compsymm_z(rho: float, q: int) -> float:
    return float(0.5 * np.log((1.0 + (q - 1) * rho) / (1.0 - rho)))


def _tril_positions(q: int) -> tuple[list[int], list[int]]:
    rows: list[int] = []
    cols: list[int] = []
    for i in range(q):
        for j in range(i + 1):
            rows.append(i)
            cols.append(j)
    return rows, cols


def cholesky_factor(params: CovarianceParams) -> FloatArray:
    """Lower-triangular L with L @ L.T == to_matrix(params), positive diagonal."""
    s = params.structure
    theta = params.theta
    q = s.q
    if s.kind is CovarianceKind.GENERAL_PD:
        L = np.zeros((q, q))
        rows, cols = _tril_positions(q)
        L[rows, cols] = theta
        idx = np.arange(q)
        L[idx, idx] = np.exp(L[idx, idx])
        return L
    if s.kind is CovarianceKind.DIAGONAL:
        return np.diag(np.exp(theta))
    if s.kind is CovarianceKind.IDENTITY:
        return np.exp(theta[0]) * np.eye(q)
    return np.linalg.cholesky(to_matrix(params))


def to_matrix(params: CovarianceParams) -> FloatArray:
    s = params.structure
    theta = params.theta
    if s.kind is CovarianceKind.COMPOUND_SYMMETRIC:
        var = np.exp(2.0 * theta[0])
        rho = _compsymm_rho(float(theta[1]), s.q)
        sigma = np.full((s.q, s.q), rho * var)
        np.fill_diagonal(sigma, var)
        return sigma
    if s.kind is CovarianceKind.DIAGONAL:
        return np.diag(np.exp(2.0 * theta))
    if s.kind is CovarianceKind.IDENTITY:
        return np.exp(2.0 * theta[0]) * np.eye(s.q)
    L = cholesky_factor(params)
    sigma = L @ L.T
    return np.asarray(0.5 * (sigma + sigma.T))


def from_matrix(
    sigma: ArrayLike, structure: CovarianceStructure
) -> CovarianceParams:
    mat = np.asarray(sigma, dtype=np.float64)
    q = structure.q
    if mat.shape != (q, q):
        raise CovarianceError(_ERR_SHAPE.format(q=q, shape=mat.shape))
    scale = max(float(np.max(np.abs(mat))), 1.0)
    if not np.allclose(mat, mat.T, rtol=0.0, atol=_SYMMETRY_TOL * scale):
        raise CovarianceError(_ERR_NOT_SYMMETRIC)
    mat = 0.5 * (mat + mat.T)
    try:
        L = np.linalg.cholesky(mat)
    except np.linalg.LinAlgError as exc:
        raise CovarianceError(_ERR_NOT_PD) from exc

    kind = structure.kind
    diag = np.diag(mat)
    off = mat[~np.eye(q, dtype=bool)]
    tol = _STRUCTURE_TOL * scale
    if kind is CovarianceKind.GENERAL_PD:
        rows, cols = _tril_positions(q)
        theta = L[rows, cols].copy()
        on_diag = np.array(rows) == np.array(cols)
        theta[on_diag] = np.log(theta[on_diag])
        return CovarianceParams(structure, theta)
    if kind is CovarianceKind.DIAGONAL:
        if np.any(np.abs(off) > tol):
            raise CovarianceError(_ERR_NOT_DIAGONAL.format(kind=kind.value))
        return CovarianceParams(structure, 0.5 * np.log(diag))
    if kind is CovarianceKind.IDENTITY:
        if np.any(np.abs(off) > tol):
            raise CovarianceError(_ERR_NOT_DIAGONAL.format(kind=kind.value))
        if np.ptp(diag) > tol:
            raise CovarianceError(_ERR_NOT_IDENTITY.format(kind=kind.value))
        return CovarianceParams(structure, [0.5 * np.log(diag[0])])
    if np.ptp(diag) > tol or (off.size and np.ptp(off) > tol):
        raise CovarianceError(_ERR_NOT_COMPSYMM.format(kind=kind.value))
    var = float(diag[0])
    rho = float(off[0]) / var
    return CovarianceParams(structure, [0.5 * np.log(var), _compsymm_z(rho, q)])


def nearest_pd(sigma: ArrayLike, floor: float = 1e-8) -> tuple[FloatArray, bool]:
    """Clip eigenvalues of a symmetric matrix from below.

    Returns the (possibly projected) matrix and whether a projection happened.
    """
    mat = np.asarray(sigma, dtype=np.float64)
    mat = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(mat)
    if vals.min() > floor:
        return mat, False
    clipped = (vecs * np.maximum(vals, floor)) @ vecs.T
    return np.asarray(0.5 * (clipped + clipped.T)), True
