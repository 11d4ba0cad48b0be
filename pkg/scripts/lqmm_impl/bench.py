"""Simulation study: data generation, orchestration and aggregation."""

from __future__ import annotations

import json
import logging
import time
from collections.abc import Mapping, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from .covariance import CovarianceKind, CovarianceStructure
from .errors import ValidationError
from .estimation import FitControl, FitResult, fit_lqmm
from .model import AlParams, ClusterData, LongitudinalDataset, QuantileLevel, al_sample
from .saem import SaemControl, committed_choices, fit_saem

logger = logging.getLogger(__name__)

ALGORITHMS = ("quadrature", "saem")
SELECTED_M = (50, 300)
SELECTED_TAU = (0.05, 0.5, 0.95)
REPORT_PARAMETERS = ("beta0", "beta1", "beta2", "sigma")

_ERR_ALGORITHMS = "choose at least one algorithm from {known}, got {got!r}"
_ERR_UNKNOWN_KEYS = "unknown scenario configuration keys: {keys}"
_ERR_NO_SCENARIOS = "the configuration selects no (M, tau) scenario"


@dataclass(frozen=True)
class ScenarioConfig:
    m_values: tuple[int, ...] = (50, 100, 200, 300)
    cluster_size: int = 3
    tau_grid: tuple[float, ...] = (0.05, 0.1, 0.5, 0.9, 0.95)
    replications: int = 100
    delta: tuple[float, ...] = (0.8, 0.5, 1.0)
    sigma_true: float = 0.2
    sigma_u_true: tuple[tuple[float, ...], ...] = ((0.8, 0.5), (0.5, 1.0))
    seed: int = 0
    selected_only: bool = False
    knots: int = 9
    max_iter: int = 2000
    loglik_tol: float = 1e-3
    saem_replications: int | None = None
    saem_mc_samples: int = 20
    saem_max_iter: int = 500
    saem_cutpoint: float = 0.2
    record_timing: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "m_values", tuple(int(m) for m in self.m_values))
        object.__setattr__(self, "tau_grid", tuple(float(t) for t in self.tau_grid))
        object.__setattr__(self, "delta", tuple(float(d) for d in self.delta))
        object.__setattr__(
            self,
            "sigma_u_true",
            tuple(tuple(float(v) for v in row) for row in self.sigma_u_true),
        )
        if any(m < 1 for m in self.m_values) or self.cluster_size < 1:
            raise ValidationError("cluster counts and cluster size must be positive")
        if self.replications < 1:
            raise ValidationError("replications must be positive")
        for tau in self.tau_grid:
            QuantileLevel(tau)
        if self.sigma_true < 0.0:
            raise ValidationError("sigma_true must be non-negative")
        sigma_u = np.asarray(self.sigma_u_true)
        if sigma_u.ndim != 2 or sigma_u.shape[0] != sigma_u.shape[1]:
            raise ValidationError("sigma_u_true must be a square matrix")
        if np.linalg.eigvalsh(0.5 * (sigma_u + sigma_u.T)).min() < -1e-12:
            raise ValidationError("sigma_u_true must be positive semi-definite")
        if not self.scenarios():
            raise ValidationError(_ERR_NO_SCENARIOS)

    @property
    def q(self) -> int:
        return len(self.sigma_u_true)

    @property
    def p(self) -> int:
        return len(self.delta)

    def scenarios(self) -> list[tuple[int, float]]:
        ms = [m for m in self.m_values if not self.selected_only or m in SELECTED_M]
        taus = [
            t for t in self.tau_grid if not self.selected_only or t in SELECTED_TAU
        ]
        return [(m, t) for m in ms for t in taus]

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_mapping(cls, raw: Mapping[str, Any]) -> ScenarioConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValidationError(_ERR_UNKNOWN_KEYS.format(keys=", ".join(unknown)))
        return cls(**dict(raw))

    @classmethod
    def from_json(cls, path: str | Path) -> ScenarioConfig:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise ValidationError(f"{path}: expected a JSON object")
        return cls.from_mapping(raw)


@dataclass(frozen=True)
class Truth:
    beta: tuple[float, ...]
    sigma: float
    sigma_u: tuple[tuple[float, ...], ...]

    def as_dict(self) -> dict[str, float]:
        values = {f"beta{i}": b for i, b in enumerate(self.beta)}
        values["sigma"] = self.sigma
        q = len(self.sigma_u)
        for i in range(q):
            for j in range(i + 1):
                values[f"sigma_u{i + 1}{j + 1}"] = self.sigma_u[i][j]
        return values


@dataclass(frozen=True)
class ReplicationRecord:
    algorithm: str
    M: int
    tau: float
    replication: int
    estimates: dict[str, float]
    truth: dict[str, float]
    converged: bool
    elapsed_seconds: float
    loglik: float
    n_obs: int
    iterations: int

    @property
    def scaled_loglik(self) -> float:
        """Log-likelihood per cluster, the scale of the published comparison."""
        return self.loglik / self.M

    @property
    def loglik_per_obs(self) -> float:
        return self.loglik / self.n_obs


@dataclass(frozen=True)
class ScenarioReport:
    config: ScenarioConfig
    algorithms: tuple[str, ...]
    records: tuple[ReplicationRecord, ...]
    workers: int = 1
    saem_choices: dict[str, Any] = field(default_factory=dict)

    def frame(self) -> pd.DataFrame:
        """Long format: one row per (fit, parameter)."""
        rows = []
        for rec in self.records:
            for name, est in rec.estimates.items():
                rows.append(
                    {
                        "algorithm": rec.algorithm,
                        "M": rec.M,
                        "tau": rec.tau,
                        "replication": rec.replication,
                        "parameter": name,
                        "estimate": est,
                        "truth": rec.truth[name],
                        "converged": rec.converged,
                    }
                )
        return pd.DataFrame(rows)

    def summaries(self) -> pd.DataFrame:
        """Bias, RMSE and variance per (algorithm, M, tau, parameter).

        Only converged fits enter the statistics.
        """
        frame = self.frame()
        ok = frame[frame["converged"]].copy()
        ok["error"] = ok["estimate"] - ok["truth"]
        ok["sq_error"] = ok["error"] ** 2
        keys = ["algorithm", "M", "tau", "parameter"]
        grouped = ok.groupby(keys, sort=False)
        out = grouped.agg(
            bias=("error", "mean"),
            mse=("sq_error", "mean"),
            variance=("estimate", lambda s: float(np.var(s.to_numpy()))),
            fits=("estimate", "size"),
        ).reset_index()
        out["rmse"] = np.sqrt(out["mse"])
        return out.drop(columns="mse")

    def figures(self) -> pd.DataFrame:
        """|bias| and RMSE of the reported parameters for every scenario."""
        summ = self.summaries()
        summ = summ[summ["parameter"].isin(REPORT_PARAMETERS)].copy()
        summ["abs_bias"] = summ["bias"].abs()
        full = self._scenario_grid()
        merged = full.merge(
            summ[["algorithm", "M", "tau", "parameter", "abs_bias", "rmse"]],
            on=["algorithm", "M", "tau", "parameter"],
            how="left",
        )
        return merged.reset_index(drop=True)

    def _scenario_grid(self) -> pd.DataFrame:
        present = {(r.algorithm, r.M, r.tau) for r in self.records}
        rows = [
            {"algorithm": alg, "M": m, "tau": tau, "parameter": param}
            for alg in self.algorithms
            for m, tau in self.config.scenarios()
            if (alg, m, tau) in present
            for param in REPORT_PARAMETERS
        ]
        return pd.DataFrame(rows, columns=["algorithm", "M", "tau", "parameter"])

    def _headline_records(self) -> list[ReplicationRecord]:
        selected = [
            r for r in self.records if r.M in SELECTED_M and r.tau in SELECTED_TAU
        ]
        return selected or list(self.records)

    def failure_percentage(self, algorithm: str) -> float:
        fits = [r for r in self._headline_records() if r.algorithm == algorithm]
        if not fits:
            return float("nan")
        failed = sum(not r.converged for r in fits)
        return 100.0 * failed / len(fits)

    def table1(self) -> list[dict[str, Any]]:
        """Grand averages over the selected scenarios, one row per algorithm."""
        headline = self._headline_records()
        cells = {(r.M, r.tau) for r in headline}
        summ = self.summaries()
        rows = []
        for alg in self.algorithms:
            fits = [r for r in headline if r.algorithm == alg]
            if not fits:
                continue
            mask = summ["algorithm"].eq(alg) & summ["parameter"].isin(
                REPORT_PARAMETERS
            )
            in_cells = [(m, t) in cells for m, t in zip(summ["M"], summ["tau"])]
            mask &= pd.Series(in_cells, index=summ.index, dtype=bool)
            sub = summ[mask]
            elapsed = [r.elapsed_seconds for r in fits]
            rows.append(
                {
                    "algorithm": alg,
                    "average_bias": _nan_mean(sub["bias"]),
                    "average_abs_bias": _nan_mean(sub["bias"].abs()),
                    "average_rmse": _nan_mean(sub["rmse"]),
                    "total_elapsed_minutes": float(np.sum(elapsed)) / 60.0,
                    "average_elapsed_seconds": float(np.mean(elapsed)),
                    "failure_percentage": self.failure_percentage(alg),
                    "fits": len(fits),
                }
            )
        return rows

    def table2(self) -> list[dict[str, Any]]:
        """Average scaled log-likelihood of converged fits per (algorithm, M, tau)."""
        rows = []
        for alg in self.algorithms:
            for m, tau in self.config.scenarios():
                fits = [
                    r
                    for r in self.records
                    if r.algorithm == alg and r.M == m and r.tau == tau
                ]
                if not fits:
                    continue
                scaled = [
                    r.scaled_loglik
                    for r in fits
                    if r.converged and np.isfinite(r.loglik)
                ]
                rows.append(
                    {
                        "algorithm": alg,
                        "M": m,
                        "tau": tau,
                        "scaled_loglik": _nan_mean(scaled),
                        "fits": len(scaled),
                    }
                )
        return rows


def _nan_mean(values: Any) -> float:
    arr = np.asarray(values, dtype=np.float64)
    return float(np.mean(arr)) if arr.size else float("nan")


def scenario_seed(
    seed: int, M: int, tau: float, replication: int
) -> np.random.SeedSequence:
    """Per-replication seed; independent of worker count and scheduling order."""
    return np.random.SeedSequence([seed, M, int(round(tau * 10_000)), replication])


def generate_dataset(
    config: ScenarioConfig, M: int, tau: QuantileLevel, rng: np.random.Generator
) -> tuple[LongitudinalDataset, Truth]:
    """Draw y = x'delta + z'u + e.

    x = (1, N(0,1), ...), z ~ N(0,1), u ~ N(0, Sigma) and e ~ AL(0, sigma, tau).
    """
    n, p, q = config.cluster_size, config.p, config.q
    covariates = rng.standard_normal((M, n, p - 1))
    z = rng.standard_normal((M, n, q))
    sigma_u = np.asarray(config.sigma_u_true)
    u = rng.multivariate_normal(np.zeros(q), sigma_u, size=M, method="eigh")
    if config.sigma_true > 0.0:
        noise = al_sample(AlParams(0.0, config.sigma_true, tau), rng, size=(M, n))
    else:
        noise = np.zeros((M, n))
    delta = np.asarray(config.delta)

    clusters = []
    for i in range(M):
        X = np.column_stack([np.ones(n), covariates[i]])
        y = X @ delta + z[i] @ u[i] + noise[i]
        clusters.append(ClusterData(y=y, X=X, Z=z[i], id=str(i + 1)))
    truth = Truth(
        beta=config.delta, sigma=config.sigma_true, sigma_u=config.sigma_u_true
    )
    return LongitudinalDataset(tuple(clusters)), truth


def _estimates(fit: FitResult) -> dict[str, float]:
    values = {f"beta{i}": float(b) for i, b in enumerate(fit.beta.beta)}
    values["sigma"] = float(fit.sigma)
    sigma_u = fit.sigma_matrix
    for i in range(sigma_u.shape[0]):
        for j in range(i + 1):
            values[f"sigma_u{i + 1}{j + 1}"] = float(sigma_u[i, j])
    return values


def _fit_one(
    algorithm: str,
    config: ScenarioConfig,
    data: LongitudinalDataset,
    tau: QuantileLevel,
    seq: np.random.SeedSequence,
) -> FitResult:
    if algorithm == "quadrature":
        control = FitControl(
            max_iter=config.max_iter,
            loglik_tol=config.loglik_tol,
            start_from_quantreg=True,
            knots=config.knots,
        )
        structure = CovarianceStructure(CovarianceKind.GENERAL_PD, data.q)
        return fit_lqmm(data, tau, structure, control)
    saem_control = SaemControl(
        mc_samples=config.saem_mc_samples,
        max_iter=config.saem_max_iter,
        memory_cutpoint=config.saem_cutpoint,
        seed=int(seq.generate_state(1)[0]),
        knots=config.knots,
    )
    return fit_saem(data, tau, saem_control)


def _run_replication(
    job: tuple[ScenarioConfig, tuple[str, ...], int, float, int],
) -> list[ReplicationRecord]:
    config, algorithms, M, tau_value, rep = job
    seq = scenario_seed(config.seed, M, tau_value, rep)
    data_seq, saem_seq = seq.spawn(2)
    tau = QuantileLevel(tau_value)
    data, truth = generate_dataset(config, M, tau, np.random.default_rng(data_seq))
    records = []
    for alg in algorithms:
        if (
            alg == "saem"
            and config.saem_replications is not None
            and rep >= config.saem_replications
        ):
            continue
        began = time.perf_counter()
        fit = _fit_one(alg, config, data, tau, saem_seq)
        elapsed = time.perf_counter() - began if config.record_timing else 0.0
        records.append(
            ReplicationRecord(
                algorithm=alg,
                M=M,
                tau=tau_value,
                replication=rep,
                estimates=_estimates(fit),
                truth=truth.as_dict(),
                converged=fit.converged,
                elapsed_seconds=elapsed,
                loglik=fit.loglik,
                n_obs=data.N,
                iterations=fit.iterations,
            )
        )
    return records


def run_benchmark(
    config: ScenarioConfig,
    algorithms: Sequence[str],
    *,
    workers: int = 1,
) -> ScenarioReport:
    chosen = tuple(a for a in ALGORITHMS if a in set(algorithms))
    if not chosen or set(algorithms) - set(ALGORITHMS):
        raise ValidationError(
            _ERR_ALGORITHMS.format(known=", ".join(ALGORITHMS), got=list(algorithms))
        )
    jobs = [
        (config, chosen, m, tau, rep)
        for m, tau in config.scenarios()
        for rep in range(config.replications)
    ]
    logger.info(
        "benchmark: %d scenarios x %d replications, algorithms=%s, workers=%d",
        len(config.scenarios()),
        config.replications,
        ",".join(chosen),
        workers,
    )
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            batches = list(pool.map(_run_replication, jobs))
    else:
        batches = [_run_replication(job) for job in jobs]
    records = tuple(rec for batch in batches for rec in batch)

    saem_choices: dict[str, Any] = {}
    if "saem" in chosen:
        saem_choices = committed_choices(
            SaemControl(
                mc_samples=config.saem_mc_samples,
                max_iter=config.saem_max_iter,
                memory_cutpoint=config.saem_cutpoint,
                knots=config.knots,
            )
        )
    return ScenarioReport(
        config=config,
        algorithms=chosen,
        records=records,
        workers=workers,
        saem_choices=saem_choices,
    )
