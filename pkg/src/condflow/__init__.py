"""Conditional flow matching for likelihood-free Bayesian inverse problems."""

__version__ = "0.1.0"
