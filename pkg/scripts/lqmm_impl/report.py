"""Rendering of benchmark tables and fit reports."""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import Any

from .bench import ScenarioReport
from .errors import ReportError, ValidationError
from .estimation import BootstrapResult, FitResult

logger = logging.getLogger(__name__)

FORMATS = ("csv", "json", "markdown")

_TABLE1_HEADER = (
    "Algorithm",
    "Average bias",
    "Average root mean squared error",
    "Total elapsed time",
    "Average elapsed time",
    "Percentage of convergence failures",
)


def _clean(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


def _dumps(payload: Any) -> str:
    return json.dumps(_clean(payload), indent=2, sort_keys=True) + "\n"


def _fmt(value: float, digits: int) -> str:
    return "NA" if not math.isfinite(value) else f"{value:.{digits}f}"


def _markdown(header: Sequence[str], rows: Iterable[Sequence[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |"]
    lines.append("|" + "|".join("---" for _ in header) + "|")
    lines.extend("| " + " | ".join(row) + " |" for row in rows)
    return "\n".join(lines) + "\n"


def table1_markdown(report: ScenarioReport) -> str:
    rows = [
        (
            row["algorithm"],
            _fmt(row["average_bias"], 4),
            _fmt(row["average_rmse"], 4),
            f"{_fmt(row['total_elapsed_minutes'], 1)} (min)",
            f"{_fmt(row['average_elapsed_seconds'], 1)} (s)",
            f"{_fmt(row['failure_percentage'], 1)}%",
        )
        for row in report.table1()
    ]
    return _markdown(_TABLE1_HEADER, rows)


def table2_markdown(report: ScenarioReport) -> str:
    entries = report.table2()
    taus = sorted({row["tau"] for row in entries})
    header = ["Algorithm", "Sample size", *(f"tau = {t:g}" for t in taus)]
    lookup = {(r["algorithm"], r["M"], r["tau"]): r["scaled_loglik"] for r in entries}
    rows = []
    for alg in report.algorithms:
        ms = sorted({r["M"] for r in entries if r["algorithm"] == alg})
        for m in ms:
            cells = [
                _fmt(lookup[(alg, m, t)], 2) if (alg, m, t) in lookup else ""
                for t in taus
            ]
            rows.append((alg, str(m), *cells))
    return _markdown(header, rows)


def _run_metadata(report: ScenarioReport) -> dict[str, Any]:
    meta: dict[str, Any] = {
        "config": report.config.to_dict(),
        "algorithms": list(report.algorithms),
        "fits": len(report.records),
        "timing_recorded": report.config.record_timing,
    }
    if report.saem_choices:
        meta["saem"] = report.saem_choices
    if report.config.record_timing:
        meta["workers"] = report.workers
    return meta


def emit_report(
    report: ScenarioReport,
    out_dir: str | Path,
    formats: Sequence[str] = FORMATS,
) -> list[Path]:
    """Write table1/table2 (markdown, json), figures.csv and run.json."""
    if not report.records:
        raise ValidationError("cannot emit a report without replication records")
    unknown = set(formats) - set(FORMATS)
    if unknown:
        raise ValidationError(f"unknown report formats: {', '.join(sorted(unknown))}")

    outputs: dict[str, str] = {}
    if "markdown" in formats:
        outputs["table1.md"] = table1_markdown(report)
        outputs["table2.md"] = table2_markdown(report)
    if "json" in formats:
        outputs["table1.json"] = _dumps(report.table1())
        outputs["table2.json"] = _dumps(report.table2())
        outputs["run.json"] = _dumps(_run_metadata(report))
    if "csv" in formats:
        outputs["figures.csv"] = report.figures().to_csv(
            index=False, float_format="%.4f", lineterminator="\n"
        )

    target = Path(out_dir)
    written = []
    try:
        target.mkdir(parents=True, exist_ok=True)
        for name, text in outputs.items():
            path = target / name
            path.write_text(text, encoding="utf-8")
            written.append(path)
    except OSError as exc:
        raise ReportError(f"cannot write report to {target}: {exc}") from exc
    logger.info("wrote %d report files to %s", len(written), target)
    return written


def fit_report(
    fit: FitResult,
    names: Sequence[str],
    boot: BootstrapResult | None = None,
) -> dict[str, Any]:
    """JSON-ready summary of one fitted quantile level."""
    estimates = fit.estimates()
    params = []
    for i, name in enumerate(names):
        entry: dict[str, Any] = {"name": name, "estimate": float(estimates[i])}
        if boot is not None:
            entry["std_error"] = float(boot.standard_errors[i])
        params.append(entry)
    payload: dict[str, Any] = {
        "tau": fit.tau.tau,
        "algorithm": fit.algorithm,
        "parameters": params,
        "covariance_kind": fit.cov.structure.kind.value,
        "sigma_u": fit.sigma_matrix.tolist(),
        "loglik": fit.loglik,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "elapsed_seconds": fit.elapsed_seconds,
        "diagnostics": dict(fit.diagnostics),
    }
    if boot is not None:
        payload["bootstrap"] = {
            "replicates": len(boot.converged),
            "failed": boot.n_failed,
        }
    return _clean(payload)  # type: ignore[no-any-return]


def fit_report_text(report: dict[str, Any]) -> str:
    lines = [
        f"tau = {report['tau']:g} ({report['algorithm']})",
        f"  log-likelihood: {report['loglik']:.4f}"
        if report["loglik"] is not None
        else "  log-likelihood: NA",
        f"  converged: {'yes' if report['converged'] else 'no'}"
        f" after {report['iterations']} iterations"
        f" ({report['elapsed_seconds']:.2f} s)",
    ]
    has_se = any("std_error" in p for p in report["parameters"])
    header = f"  {'parameter':<16}{'estimate':>12}"
    lines.append(header + (f"{'std.error':>12}" if has_se else ""))
    for p in report["parameters"]:
        row = f"  {p['name']:<16}{p['estimate']:>12.4f}"
        if has_se:
            se = p.get("std_error")
            row += f"{se:>12.4f}" if se is not None else f"{'NA':>12}"
        lines.append(row)
    lines.append(f"  random-effects covariance ({report['covariance_kind']}):")
    for row_vals in report["sigma_u"]:
        lines.append("    " + " ".join(f"{v:10.4f}" for v in row_vals))
    if "bootstrap" in report:
        boot = report["bootstrap"]
        lines.append(
            f"  bootstrap: {boot['replicates']} replicates,"
            f" {boot['failed']} without convergence"
        )
    return "\n".join(lines) + "\n"
