"""Desk-scale data assimilation experiments with model error.

Subpackages cover the test dynamical systems, Kalman/ensemble filtering,
adaptive noise-covariance estimation, offline/online stochastic
parameterization, reduced filters for two-scale systems, SPEKF-style
benchmark filters, nonparametric diffusion forecasting, and a batch
experiment CLI.
"""

__version__ = "0.1.0"
