"""Implementation package for scripts.lqmm."""

__version__ = "0.1.0"
