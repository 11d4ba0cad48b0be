"""Fitting the quadrature quasi-likelihood: starts, the fit driver, bootstrap."""

from __future__ import annotations

import logging
import time
from collections.abc import Mapping, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike

from .covariance import (
    CovarianceKind,
    CovarianceParams,
    CovarianceStructure,
    cholesky_factor,
    to_matrix,
)
from .errors import EstimationError, ValidationError
from .model import (
    ClusterData,
    FixedEffects,
    FloatArray,
    LongitudinalDataset,
    QuantileLevel,
    check_function,
    linear_predictor,
)
from .quadrature import TensorGrid, cluster_logliks, hermite_rule, tensor_grid
from .simplex import SimplexResult, nelder_mead

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-6
MAX_FREE_PARAMS = 50

_ERR_TOO_FEW_OBS = "need more observations than fixed effects (N={n}, p={p})"
_ERR_RANK = "fixed-effects design is rank deficient (rank {rank} < p={p})"
_ERR_TOO_MANY_PARAMS = (
    "{k} free parameters exceed the simplex limit of {limit}; "
    "use a simpler covariance structure"
)
_ERR_STRUCTURE_Q = "covariance structure has q={sq}, data has q={dq}"
_ERR_BOOT_R = "bootstrap needs at least 2 replicates, got {r}"
_ERR_BOOT_FAILED = "only {ok} of {r} bootstrap replicates converged; need at least 2"


@dataclass(frozen=True)
class FitControl:
    max_iter: int = 2000
    loglik_tol: float = 1e-3
    start_from_quantreg: bool = False
    knots: int = 7
    restarts: int = 1
    seed: int = 0
    cold_start_bootstrap: bool = False
    param_tol: float = 1e-3
    max_restarts: int = 10

    def __post_init__(self) -> None:
        if self.max_iter < 1:
            raise ValidationError(f"max_iter must be >= 1, got {self.max_iter}")
        if not self.loglik_tol > 0.0:
            raise ValidationError(f"loglik_tol must be > 0, got {self.loglik_tol}")
        if not self.param_tol > 0.0:
            raise ValidationError(f"param_tol must be > 0, got {self.param_tol}")
        if self.restarts < 0:
            raise ValidationError(f"restarts must be >= 0, got {self.restarts}")
        if self.max_restarts < self.restarts:
            raise ValidationError(
                f"max_restarts ({self.max_restarts}) must be >= restarts "
                f"({self.restarts})"
            )


@dataclass(frozen=True, eq=False)
class FitResult:
    beta: FixedEffects
    cov: CovarianceParams
    sigma: float
    loglik: float
    converged: bool
    iterations: int
    elapsed_seconds: float
    tau: QuantileLevel
    algorithm: str = "quadrature"
    diagnostics: Mapping[str, float] = field(default_factory=dict)

    @property
    def sigma_matrix(self) -> FloatArray:
        return to_matrix(self.cov)

    def estimates(self) -> FloatArray:
        """(beta, theta, sigma) as one vector."""
        return np.concatenate([self.beta.beta, self.cov.theta, [self.sigma]])


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    standard_errors: FloatArray
    replicates: FloatArray
    converged: tuple[bool, ...]
    names: tuple[str, ...]

    @property
    def n_failed(self) -> int:
        return sum(not ok for ok in self.converged)


def parameter_names(
    p: int, structure: CovarianceStructure, fixed_names: Sequence[str] | None = None
) -> tuple[str, ...]:
    betas = list(fixed_names) if fixed_names else [f"beta{i}" for i in range(p)]
    thetas = [f"theta{i}" for i in range(structure.n_params)]
    return (*betas, *thetas, "sigma")


def _check_design(data: LongitudinalDataset) -> None:
    if data.N <= data.p:
        raise ValidationError(_ERR_TOO_FEW_OBS.format(n=data.N, p=data.p))
    rank = int(np.linalg.matrix_rank(data.X))
    if rank < data.p:
        raise EstimationError(_ERR_RANK.format(rank=rank, p=data.p))


def quantreg_fixed(
    data: LongitudinalDataset,
    tau: QuantileLevel,
    start: ArrayLike,
    *,
    tol: float,
    max_iter: int,
) -> FloatArray:
    """Fixed-effects-only check-loss minimizer, searched from ``start``."""
    X, y = data.X, data.y

    def loss(beta: FloatArray) -> float:
        return float(np.sum(check_function(y - X @ beta, tau)))

    result = nelder_mead(loss, start, tol=tol, max_iter=max_iter)
    return result.x


def start_values(
    data: LongitudinalDataset,
    tau: QuantileLevel,
    from_quantreg: bool,
    structure: CovarianceStructure | None = None,
    *,
    tol: float = 1e-3,
    max_iter: int = 2000,
) -> tuple[FixedEffects, CovarianceParams, float]:
    _check_design(data)
    structure = structure or CovarianceStructure(CovarianceKind.DIAGONAL, data.q)
    beta, *_ = np.linalg.lstsq(data.X, data.y, rcond=None)
    if from_quantreg:
        beta = quantreg_fixed(data, tau, beta, tol=tol, max_iter=max_iter)
    resid = data.y - data.X @ beta
    sigma = max(float(np.mean(check_function(resid, tau))), SIGMA_FLOOR)
    return FixedEffects(beta), CovarianceParams.zeros(structure), sigma


class _NegLoglik:
    """Objective over the packed vector (beta, theta, log sigma)."""

    def __init__(
        self,
        data: LongitudinalDataset,
        tau: QuantileLevel,
        structure: CovarianceStructure,
        grid: TensorGrid,
    ) -> None:
        self.data = data
        self.tau = tau.tau
        self.structure = structure
        self.grid = grid
        self.p = data.p
        self.m = structure.n_params

    def unpack(self, x: FloatArray) -> tuple[FloatArray, CovarianceParams, float]:
        beta = x[: self.p]
        cov = CovarianceParams(self.structure, x[self.p : self.p + self.m])
        sigma = max(float(np.exp(x[-1])), SIGMA_FLOOR)
        return beta, cov, sigma

    def __call__(self, x: FloatArray) -> float:
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            beta, cov, sigma = self.unpack(x)
            terms = cluster_logliks(
                self.data, beta, cholesky_factor(cov), sigma, self.tau, self.grid
            )
            return -float(np.sum(terms))


def fit_lqmm(
    data: LongitudinalDataset,
    tau: QuantileLevel,
    structure: CovarianceStructure | None = None,
    control: FitControl | None = None,
    *,
    start: FitResult | None = None,
) -> FitResult:
    control = control or FitControl()
    structure = structure or CovarianceStructure(CovarianceKind.DIAGONAL, data.q)
    if structure.q != data.q:
        raise ValidationError(_ERR_STRUCTURE_Q.format(sq=structure.q, dq=data.q))
    k = data.p + structure.n_params + 1
    if k > MAX_FREE_PARAMS:
        raise ValidationError(_ERR_TOO_MANY_PARAMS.format(k=k, limit=MAX_FREE_PARAMS))

    began = time.perf_counter()
    grid = tensor_grid(hermite_rule(control.knots), data.q)
    if start is not None and start.cov.structure == structure:
        beta0, cov0, sigma0 = start.beta, start.cov, start.sigma
    else:
        beta0, cov0, sigma0 = start_values(
            data,
            tau,
            control.start_from_quantreg,
            structure,
            tol=control.loglik_tol,
            max_iter=control.max_iter,
        )
    objective = _NegLoglik(data, tau, structure, grid)
    x0 = np.concatenate([beta0.beta, cov0.theta, [np.log(sigma0)]])

    def search(x: FloatArray) -> SimplexResult:
        return nelder_mead(
            objective,
            x,
            tol=control.loglik_tol,
            max_iter=control.max_iter,
            xtol=control.param_tol,
        )

    result = search(x0)
    iterations, evaluations = result.iterations, result.evaluations
    # Restart from the incumbent until a fresh simplex stops gaining.
    restarts, gain = 0, np.inf
    while restarts < control.max_restarts and (
        restarts < control.restarts or (restarts > 0 and gain >= control.loglik_tol)
    ):
        again = search(result.x)
        gain = result.fun - again.fun
        restarts += 1
        logger.debug(
            "restart %d: objective %.6f -> %.6f", restarts, result.fun, again.fun
        )
        iterations += again.iterations
        evaluations += again.evaluations
        result = again
    converged = result.converged and (restarts == 0 or gain < control.loglik_tol)
    elapsed = time.perf_counter() - began

    beta, cov, sigma = objective.unpack(result.x)
    if not converged:
        logger.warning(
            "quadrature fit at tau=%.3f did not converge in %d iterations",
            tau.tau,
            control.max_iter,
        )
    logger.info(
        "quadrature fit tau=%.3f loglik=%.4f iterations=%d elapsed=%.2fs",
        tau.tau,
        -result.fun,
        iterations,
        elapsed,
    )
    return FitResult(
        beta=FixedEffects(beta),
        cov=cov,
        sigma=sigma,
        loglik=-result.fun,
        converged=converged,
        iterations=iterations,
        elapsed_seconds=elapsed,
        tau=tau,
        algorithm="quadrature",
        diagnostics={
            "evaluations": float(evaluations),
            "restarts": float(restarts),
            "knots": float(control.knots),
        },
    )


def _bootstrap_replicate(
    args: tuple[
        LongitudinalDataset,
        QuantileLevel,
        CovarianceStructure,
        FitControl,
        FitResult | None,
        int,
    ],
) -> tuple[FloatArray, bool]:
    data, tau, structure, control, warm, seed = args
    rng = np.random.default_rng(seed)
    sample = data.resample(rng.integers(0, data.M, size=data.M))
    refit = fit_lqmm(sample, tau, structure, control, start=warm)
    return refit.estimates(), refit.converged


def cluster_bootstrap(
    data: LongitudinalDataset,
    tau: QuantileLevel,
    structure: CovarianceStructure,
    control: FitControl,
    R: int,
    seed: int | None = None,
    *,
    fit: FitResult | None = None,
    workers: int = 1,
) -> BootstrapResult:
    """Cluster-level case bootstrap; replicate r uses seed + r."""
    if R < 2:
        raise ValidationError(_ERR_BOOT_R.format(r=R))
    base_seed = control.seed if seed is None else seed
    if fit is None:
        fit = fit_lqmm(data, tau, structure, control)
    warm = None if control.cold_start_bootstrap else fit
    jobs = [(data, tau, structure, control, warm, base_seed + r) for r in range(R)]

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_bootstrap_replicate, jobs))
    else:
        outcomes = [_bootstrap_replicate(job) for job in jobs]

    replicates = np.vstack([est for est, _ in outcomes])
    converged = tuple(ok for _, ok in outcomes)
    usable = replicates[np.array(converged, dtype=bool)]
    if usable.shape[0] < 2:
        raise EstimationError(_ERR_BOOT_FAILED.format(ok=usable.shape[0], r=R))
    failed = R - usable.shape[0]
    if failed:
        logger.warning("%d of %d bootstrap replicates did not converge", failed, R)
    return BootstrapResult(
        standard_errors=np.std(usable, axis=0, ddof=1),
        replicates=replicates,
        converged=converged,
        names=parameter_names(data.p, structure),
    )


def predict(
    fit: FitResult, cluster: ClusterData, u: ArrayLike | None = None
) -> FloatArray:
    """Conditional tau-quantile predictions; ``u=None`` gives the population level."""
    effects = np.zeros(cluster.Z.shape[1]) if u is None else u
    return linear_predictor(cluster, fit.beta, effects)
