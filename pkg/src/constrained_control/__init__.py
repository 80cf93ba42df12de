"""Solvers and Monte Carlo verifiers for expectation- and state-constrained control."""

__version__ = "0.1.0"
