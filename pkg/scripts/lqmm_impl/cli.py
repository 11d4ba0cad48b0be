"""Command-line interface: ``fit``, ``bench`` and ``simulate``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from . import __version__
from .bench import ALGORITHMS, ScenarioConfig, generate_dataset, run_benchmark
from .config import configure_logging, default_workers
from .covariance import CovarianceKind, CovarianceStructure
from .errors import LqmmError, ReportError, ValidationError
from .estimation import (
    BootstrapResult,
    FitControl,
    FitResult,
    cluster_bootstrap,
    fit_lqmm,
    parameter_names,
)
from .model import LongitudinalDataset, QuantileLevel
from .report import emit_report, fit_report, fit_report_text
from .saem import SaemControl, fit_saem

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 2

_ERR_TAU = "cannot parse --tau {raw!r}: expected numbers or 'vigintiles'"
_ERR_CENTER = "cannot parse --center {raw!r}: expected COL=SHIFT/SCALE"
_ERR_SAEM_COV = "the SAEM comparator estimates a general covariance (pdsymm) only"
_ERR_SAEM_BOOT = "bootstrap standard errors are available for the quadrature fit only"


def _split(raw: str) -> list[str]:
    return [part.strip() for part in raw.split(",") if part.strip()]


def parse_taus(raw: str) -> list[QuantileLevel]:
    if raw.strip().lower() == "vigintiles":
        return [QuantileLevel(k / 20) for k in range(1, 20)]
    try:
        values = [float(part) for part in _split(raw)]
    except ValueError as exc:
        raise ValidationError(_ERR_TAU.format(raw=raw)) from exc
    if not values:
        raise ValidationError(_ERR_TAU.format(raw=raw))
    return [QuantileLevel(v) for v in values]


def parse_center(raw: str) -> tuple[str, float, float]:
    col, sep, rest = raw.partition("=")
    shift, slash, scale = rest.partition("/")
    if not sep or not col.strip():
        raise ValidationError(_ERR_CENTER.format(raw=raw))
    try:
        shift_v = float(shift)
        scale_v = float(scale) if slash else 1.0
    except ValueError as exc:
        raise ValidationError(_ERR_CENTER.format(raw=raw)) from exc
    if scale_v == 0.0:
        raise ValidationError(_ERR_CENTER.format(raw=raw))
    return col.strip(), shift_v, scale_v


def _load_frame(args: argparse.Namespace) -> pd.DataFrame:
    try:
        frame = pd.read_csv(args.data)
    except (OSError, pd.errors.ParserError) as exc:
        raise ValidationError(f"cannot read {args.data}: {exc}") from exc
    for raw in args.center:
        col, shift, scale = parse_center(raw)
        if col not in frame.columns:
            raise ValidationError(f"--center: column {col!r} not found in data")
        try:
            frame[f"{col}_c"] = (frame[col] - shift) / scale
        except TypeError as exc:
            raise ValidationError(f"--center: column {col!r} is not numeric") from exc
    if args.scale_response is not None:
        if args.scale_response == 0.0:
            raise ValidationError("--scale-response must be non-zero")
        if args.response not in frame.columns:
            raise ValidationError(f"column {args.response!r} not found in data")
        try:
            frame[args.response] = frame[args.response] / args.scale_response
        except TypeError as exc:
            raise ValidationError(
                f"--scale-response: column {args.response!r} is not numeric"
            ) from exc
    return frame


def _fit_one_tau(
    args: argparse.Namespace,
    data: LongitudinalDataset,
    tau: QuantileLevel,
    structure: CovarianceStructure,
    workers: int,
) -> tuple[FitResult, BootstrapResult | None]:
    if args.algorithm == "saem":
        control = SaemControl(
            mc_samples=args.mc_samples,
            max_iter=args.saem_max_iter,
            memory_cutpoint=args.cutpoint,
            seed=args.seed,
            knots=args.knots,
            start_from_quantreg=not args.start_ols,
        )
        return fit_saem(data, tau, control), None

    fit_control = FitControl(
        max_iter=args.max_iter,
        loglik_tol=args.tol,
        start_from_quantreg=not args.start_ols,
        knots=args.knots,
        seed=args.seed,
        cold_start_bootstrap=args.cold_start,
    )
    fit = fit_lqmm(data, tau, structure, fit_control)
    boot = None
    if args.boot:
        boot = cluster_bootstrap(
            data, tau, structure, fit_control, args.boot, fit=fit, workers=workers
        )
    return fit, boot


def _write_json(path: Path, payload: Any) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    except OSError as exc:
        raise ReportError(f"cannot write {path}: {exc}") from exc


def cmd_fit(args: argparse.Namespace) -> int:
    taus = parse_taus(args.tau)
    kind = CovarianceKind(args.covariance or CovarianceKind.DIAGONAL.value)
    if args.algorithm == "saem":
        if kind is not CovarianceKind.GENERAL_PD and args.covariance is not None:
            raise ValidationError(_ERR_SAEM_COV)
        if args.boot:
            raise ValidationError(_ERR_SAEM_BOOT)
        kind = CovarianceKind.GENERAL_PD

    fixed = _split(args.fixed) if args.fixed else []
    random = _split(args.random) if args.random else []
    frame = _load_frame(args)
    data = LongitudinalDataset.from_frame(
        frame,
        response=args.response,
        fixed=fixed,
        random=random,
        group=args.group,
        intercept=not args.no_intercept,
        random_intercept=not args.no_random_intercept,
    )
    structure = CovarianceStructure(kind, data.q)
    fixed_names = ["(Intercept)", *fixed] if not args.no_intercept else fixed
    names = parameter_names(data.p, structure, fixed_names)
    workers = args.workers or default_workers()
    logger.info(
        "fitting %d quantile levels: M=%d N=%d p=%d q=%d",
        len(taus),
        data.M,
        data.N,
        data.p,
        data.q,
    )

    reports = []
    for tau in taus:
        fit, boot = _fit_one_tau(args, data, tau, structure, workers)
        report = fit_report(fit, names, boot)
        reports.append(report)
        sys.stdout.write(fit_report_text(report))
    if args.out:
        _write_json(Path(args.out) / "fit_report.json", {"fits": reports})
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    config = (
        ScenarioConfig.from_json(args.config) if args.config else ScenarioConfig()
    )
    overrides: dict[str, Any] = {"selected_only": args.scenarios == "selected"}
    if args.replications is not None:
        overrides["replications"] = args.replications
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.saem_replications is not None:
        overrides["saem_replications"] = args.saem_replications
    if args.no_timing:
        overrides["record_timing"] = False
    config = dataclasses.replace(config, **overrides)

    report = run_benchmark(
        config,
        _split(args.algorithms),
        workers=args.workers or default_workers(),
    )
    for path in emit_report(report, args.out):
        sys.stdout.write(f"{path}\n")
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    config = (
        ScenarioConfig.from_json(args.config) if args.config else ScenarioConfig()
    )
    tau = QuantileLevel(args.tau)
    rng = np.random.default_rng(args.seed)
    data, _ = generate_dataset(config, args.m, tau, rng)
    rows = []
    for cluster in data.clusters:
        for j in range(cluster.n):
            row: dict[str, Any] = {"id": cluster.id, "y": cluster.y[j]}
            for k in range(1, cluster.X.shape[1]):
                row[f"x{k}"] = cluster.X[j, k]
            for k in range(cluster.Z.shape[1]):
                row[f"z{k + 1}"] = cluster.Z[j, k]
            rows.append(row)
    text = pd.DataFrame(rows).to_csv(index=False, lineterminator="\n")
    if args.out in (None, "-"):
        sys.stdout.write(text)
        return EXIT_OK
    try:
        Path(args.out).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise ReportError(f"cannot write {args.out}: {exc}") from exc
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lqmm",
        description="Linear quantile mixed models by Gauss-Hermite quadrature.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--log-level", default=None, help="override LQMM_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit an LQMM to a CSV file")
    fit.add_argument("--data", required=True, help="CSV file, one row per observation")
    fit.add_argument("--response", required=True)
    fit.add_argument("--fixed", default="", help="comma-separated covariates")
    fit.add_argument("--random", default="", help="comma-separated random slopes")
    fit.add_argument("--group", required=True, help="cluster identifier column")
    fit.add_argument("--tau", default="0.5", help="levels, e.g. 0.1,0.5 or vigintiles")
    fit.add_argument(
        "--covariance", choices=[k.value for k in CovarianceKind], default=None
    )
    fit.add_argument("--knots", type=int, default=7)
    fit.add_argument("--boot", type=int, default=0, metavar="R")
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--max-iter", type=int, default=2000)
    fit.add_argument("--tol", type=float, default=1e-3)
    fit.add_argument("--algorithm", choices=ALGORITHMS, default="quadrature")
    fit.add_argument("--mc-samples", type=int, default=20)
    fit.add_argument("--saem-max-iter", type=int, default=500)
    fit.add_argument("--cutpoint", type=float, default=0.2)
    fit.add_argument("--no-intercept", action="store_true")
    fit.add_argument("--no-random-intercept", action="store_true")
    fit.add_argument(
        "--start-ols",
        action="store_true",
        help="start from least squares instead of the fixed-effects quantile fit",
    )
    fit.add_argument(
        "--cold-start", action="store_true", help="bootstrap refits start afresh"
    )
    fit.add_argument(
        "--center",
        action="append",
        default=[],
        metavar="COL=SHIFT/SCALE",
        help="add COL_c = (COL - SHIFT) / SCALE; repeatable",
    )
    fit.add_argument("--scale-response", type=float, default=None, metavar="S")
    fit.add_argument("--out", default=None, help="directory for fit_report.json")
    fit.add_argument("--workers", type=int, default=None)
    fit.set_defaults(handler=cmd_fit)

    bench = sub.add_parser("bench", help="run the simulation study")
    bench.add_argument("--scenarios", choices=("full", "selected"), default="full")
    bench.add_argument("--algorithms", default=",".join(ALGORITHMS))
    bench.add_argument("--replications", type=int, default=None)
    bench.add_argument("--saem-replications", type=int, default=None)
    bench.add_argument("--seed", type=int, default=None)
    bench.add_argument("--out", required=True, help="output directory")
    bench.add_argument("--workers", type=int, default=None)
    bench.add_argument("--config", default=None, help="JSON scenario configuration")
    bench.add_argument(
        "--no-timing",
        action="store_true",
        help="record elapsed times as zero for reproducible output",
    )
    bench.set_defaults(handler=cmd_bench)

    simulate = sub.add_parser("simulate", help="write one generated dataset as CSV")
    simulate.add_argument("--m", type=int, default=100, help="number of clusters")
    simulate.add_argument("--tau", type=float, default=0.5)
    simulate.add_argument("--seed", type=int, default=0)
    simulate.add_argument("--config", default=None, help="JSON scenario configuration")
    simulate.add_argument("--out", default=None, help="CSV path; stdout if omitted")
    simulate.set_defaults(handler=cmd_simulate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return int(args.handler(args))
    except LqmmError as exc:
        logger.error("%s", exc)
        sys.stderr.write(f"lqmm: error: {exc}\n")
        return EXIT_ERROR
