#!/usr/bin/env python3
"""
Linear quantile mixed models fitted by Gauss-Hermite quadrature.

Subcommands:
  fit       estimate an LQMM from a CSV file at one or more quantile levels
  bench     run the simulation study against the SAEM comparator
  simulate  write one generated dataset as CSV

Exit behavior:
  - Exit 0 on success
  - Exit 2 on invalid input or a failed estimation (message on stderr)
"""

try:
    from scripts.lqmm_impl.cli import main as _impl_main
except ImportError:  # When executed as a script from the scripts/ directory.
    from lqmm_impl.cli import main as _impl_main  # type: ignore[no-redef]


def main() -> int:
    return _impl_main()


if __name__ == "__main__":
    import sys

    sys.exit(main())
