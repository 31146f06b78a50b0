"""Variational inference for neural stochastic differential equations."""

__version__ = "0.1.0"
