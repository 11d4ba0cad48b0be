"""Environment configuration and logging setup."""

import logging
import sys
from os import getenv

_TRUTHY = {"1", "true", "yes", "on"}
_LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def env_flag(name: str) -> bool:
    val = (getenv(name) or "").strip().lower()
    return val in _TRUTHY


def env_int(name: str, default: int) -> int:
    raw = (getenv(name) or "").strip()
    if not raw:
        return default
    try:
        return int(raw)
    except ValueError:
        logging.getLogger(__name__).warning(
            "Ignoring %s=%r: not an integer", name, raw
        )
        return default


def default_workers() -> int:
    return max(1, env_int("LQMM_WORKERS", 1))


def slow_tests_enabled() -> bool:
    return env_flag("LQMM_SLOW_TESTS")


def configure_logging(level: str | None = None) -> None:
    """Install a stderr handler on the package logger.

    Library modules only create loggers; the CLI is the one place that
    decides where records go.
    """
    name = (level or getenv("LQMM_LOG_LEVEL") or "WARNING").strip().upper()
    resolved = logging.getLevelName(name)
    if not isinstance(resolved, int):
        resolved = logging.WARNING
    root = logging.getLogger(__package__ or "lqmm_impl")
    root.setLevel(resolved)
    if not any(getattr(h, "_lqmm", False) for h in root.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(_LOG_FORMAT))
        handler._lqmm = True  # type: ignore[attr-defined]
        root.addHandler(handler)
