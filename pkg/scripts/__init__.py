"""Project scripts.

This package exposes the executable scripts as importable modules for tests.
"""
