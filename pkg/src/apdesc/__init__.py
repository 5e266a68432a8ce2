"""Patch descriptor learning by direct average-precision optimization."""

__version__ = "0.1.0"
