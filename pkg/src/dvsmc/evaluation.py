"""Evaluation metrics: posterior-mean tracking error and an ELBO
decomposition against a KDE attractor prior, with seed-level aggregation.

The tracking error is the Euclidean distance between the weighted particle
mean and the ground-truth state, per step.  The ELBO at each step splits
into an expected observation log-likelihood under a Gaussian fitted to the
particle cloud (Monte Carlo) and a KL term from that Gaussian to the prior,
and is reported time-averaged.

The raw likelihood term sums over *observed* pixels, so its scale shrinks
with the observation proportion; reports therefore also carry a
full-frame-equivalent likelihood (raw term rescaled by total/observed pixel
count) which is comparable across masking levels.  Methods are always
compared under the same convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ssm
from .autodiff import values
from .distributions import FittedGaussian, GaussianKde, gaussian_fit, scott_bandwidth
from .smc import FilterTrace


class EvaluationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# tracking error

def tracking_error(trace, truth: np.ndarray) -> np.ndarray:
    """Per-step distances between weighted posterior means and the truth.

    ``trace`` is a FilterTrace or a ``(particles, weights)`` pair; particle
    dimensions beyond the first three (velocity augmentation) are ignored.
    """
    if isinstance(trace, FilterTrace):
        particles, weights = trace.particles, trace.weights
    else:
        particles, weights = trace
    truth = np.asarray(truth, dtype=np.float64)
    if particles.shape[0] != truth.shape[0]:
        raise EvaluationError(
            f"trace length {particles.shape[0]} does not match truth length {truth.shape[0]}"
        )
    means = np.einsum("tn,tnd->td", weights, particles[:, :, :3])
    return np.linalg.norm(means - truth[:, :3], axis=1)


# ---------------------------------------------------------------------------
# attractor prior

def build_attractor_prior(n_steps: int = 100_000, burn_in: int = 1_000,
                          dt: float = ssm.DT, max_points: int = 4_096,
                          bandwidth=None) -> GaussianKde:
    """KDE over a long noise-free attractor run.

    The run has ``n_steps`` states after ``burn_in`` is dropped; for
    tractable evaluation the KDE support is thinned to ``max_points`` by an
    even stride (the density is smooth at Scott bandwidths, so the thinned
    estimate is indistinguishable for our purposes).  Fully deterministic.
    """
    if n_steps < 10_000:
        raise EvaluationError(f"prior run too short: {n_steps} < 10000")
    path = ssm.simulate_noise_free(np.array([1.0, 1.0, 1.0]), burn_in + n_steps, dt)
    pts = path[burn_in:]
    if max_points and pts.shape[0] > max_points:
        stride = pts.shape[0] // max_points
        pts = pts[:: stride][:max_points]
    if bandwidth is None:
        bandwidth = scott_bandwidth(pts)
    return GaussianKde(pts, bandwidth)


# ---------------------------------------------------------------------------
# posterior families per method

def fit_step_gaussians(trace: FilterTrace) -> list[FittedGaussian]:
    """Gaussian fit of each step's weighted cloud (positions only)."""
    out = []
    for t in range(trace.particles.shape[0]):
        out.append(gaussian_fit(trace.particles[t, :, :3], trace.weights[t]))
    return out


def gaussians_from_beliefs(beliefs) -> list[FittedGaussian]:
    """EKF beliefs -> position-marginal Gaussians."""
    return [FittedGaussian(b.mean[:3], 0.5 * (b.cov[:3, :3] + b.cov[:3, :3].T))
            for b in beliefs]


def gaussians_from_points(points: np.ndarray, var: float = 1.0) -> list[FittedGaussian]:
    """Point estimates -> unit-variance Gaussians (supervised baseline).

    An evaluation convention: it places a non-variational point estimator on
    the same ELBO axes as the filters.
    """
    cov = var * np.eye(3)
    return [FittedGaussian(p, cov.copy()) for p in np.asarray(points, dtype=np.float64)]


# ---------------------------------------------------------------------------
# ELBO decomposition

@dataclass
class ElboDecomposition:
    """Per-step Monte Carlo estimates of the two ELBO terms.

    ``lik`` is the raw expected log-likelihood over observed pixels;
    ``kl`` the divergence of the fitted posterior from the prior.
    ``negative_kl_flags`` marks steps whose KL estimate fell below minus
    three Monte Carlo standard errors (flagged, never fatal).
    """

    lik: np.ndarray
    kl: np.ndarray
    observed_pixels: np.ndarray
    negative_kl_flags: np.ndarray

    @property
    def lik_mean(self) -> float:
        return float(self.lik.mean())

    @property
    def kl_mean(self) -> float:
        return float(self.kl.mean())

    @property
    def lik_full_frame(self) -> np.ndarray:
        """Likelihood rescaled to the full pixel count (mask-comparable)."""
        scale = np.where(self.observed_pixels > 0,
                         ssm.N_PIXELS / np.maximum(self.observed_pixels, 1), 0.0)
        return self.lik * scale

    @property
    def lik_full_frame_mean(self) -> float:
        return float(self.lik_full_frame.mean())

    @property
    def elbo(self) -> float:
        """Raw-likelihood ELBO (exactly likelihood term minus KL term)."""
        return self.lik_mean - self.kl_mean

    @property
    def elbo_full_frame(self) -> float:
        return self.lik_full_frame_mean - self.kl_mean


def elbo_decompose(q_dists, observations, prior, mc_samples: int = 128,
                   rng: np.random.Generator | None = None) -> ElboDecomposition:
    """Monte Carlo ELBO terms per step.

    ``q_dists`` holds one FittedGaussian per step (the sampling-capable
    posterior surrogate), ``observations`` the matching Observation
    bundles, and ``prior`` anything with a ``log_pdf`` method.
    """
    rng = rng or np.random.default_rng(0)
    if len(q_dists) != len(observations):
        raise EvaluationError("q_dists and observations must align per step")
    t_len = len(q_dists)
    lik = np.zeros(t_len)
    kl = np.zeros(t_len)
    observed = np.zeros(t_len)
    flags = np.zeros(t_len, dtype=bool)
    for t, (q, obs) in enumerate(zip(q_dists, observations)):
        z = q.sample(mc_samples, rng)
        mask = np.asarray(obs.mask, dtype=bool).reshape(-1)
        observed[t] = mask.sum()
        if observed[t] > 0:
            ll = values(ssm.log_likelihood(z, obs.frame, obs.mask, obs.sigma_v))
            lik[t] = ll.mean()
        kl_samples = q.log_pdf(z) - prior.log_pdf(z)
        kl[t] = kl_samples.mean()
        se = kl_samples.std(ddof=1) / math.sqrt(mc_samples)
        flags[t] = kl[t] < -3.0 * se
    return ElboDecomposition(lik, kl, observed, flags)


# ---------------------------------------------------------------------------
# aggregation across seeds

def aggregate(per_seed) -> tuple[float, float, float]:
    """Mean and normal-approximation 95% interval over seed-level values."""
    vals = np.asarray(per_seed, dtype=np.float64)
    if vals.ndim != 1 or vals.shape[0] < 2:
        raise EvaluationError(f"need >=2 seeds to aggregate, got shape {vals.shape}")
    mean = float(vals.mean())
    half = 1.96 * float(vals.std(ddof=1)) / math.sqrt(vals.shape[0])
    return mean, mean - half, mean + half
