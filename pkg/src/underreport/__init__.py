"""Bayesian correction of underreported areal disease counts."""

__version__ = "0.1.0"
