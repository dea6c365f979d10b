"""Repeat- and exploration-aware food delivery recommendation toolkit."""

__version__ = "0.1.0"
