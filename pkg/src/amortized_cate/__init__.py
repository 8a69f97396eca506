"""Amortized Bayesian causal-effect estimation with an in-context transformer."""

__version__ = "0.1.0"
