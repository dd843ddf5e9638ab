"""Unsupervised differentiable particle filtering for image observations.

A numpy-based library providing: a minimal reverse-mode autodiff engine,
Lorenz-attractor image simulation, Gaussian-mixture distributions, a
particle filter with systematic and entropy-regularized optimal-transport
resampling, neural proposal/transition networks, the variational training
loop that maximizes the filter's log-marginal-likelihood estimate, EKF and
bootstrap-filter baselines, and evaluation metrics (tracking error and an
ELBO decomposition against a KDE prior).
"""

__version__ = "0.1.0"
