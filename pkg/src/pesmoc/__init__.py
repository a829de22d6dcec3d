"""PESMOC: predictive entropy search for constrained multi-objective
Bayesian optimization."""

__version__ = "0.1.0"
