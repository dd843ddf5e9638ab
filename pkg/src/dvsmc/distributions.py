"""Diagonal-Gaussian and Gaussian-mixture distributions, plus KDE helpers.

Mixture parameters are stored batched: ``logits`` has shape (..., K) and
``means`` / ``log_vars`` have shape (..., K, d).  Log-density evaluation and
reparameterized sampling are tape-aware, so they can sit inside the
variational objective.  The Gaussian fit and the kernel density estimator
operate on plain arrays; they are evaluation-time tools.

Component selection in ``gmm_sample`` is deliberately non-differentiable
(the index is drawn from the mixture weights by inverse CDF and treated as
a constant).  Gradients reach the mixture logits only through explicit
``gmm_log_pdf`` terms in the objective, and reach the chosen component's
mean and variance through the pathwise sample ``mu + sigma * eps``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, values

_LOG_2PI = math.log(2.0 * math.pi)

# network log-variance outputs are clamped to this range before exp to keep
# proposals from collapsing or exploding early in training
LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 4.0


class DegenerateEnsembleError(RuntimeError):
    """Raised when a particle cloud cannot support a Gaussian fit."""


@dataclass
class GmmParams:
    """Mixture of K diagonal Gaussians; fields may be Tensors or ndarrays."""

    logits: object  # (..., K)
    means: object  # (..., K, d)
    log_vars: object  # (..., K, d)

    @property
    def n_components(self) -> int:
        return values(self.logits).shape[-1]

    @property
    def dim(self) -> int:
        return values(self.means).shape[-1]

    def detached(self) -> "GmmParams":
        return GmmParams(
            Tensor(values(self.logits)), Tensor(values(self.means)), Tensor(values(self.log_vars))
        )


def gmm_log_pdf(params: GmmParams, x):
    """log sum_k pi_k N(x; mu_k, diag(sigma_k^2)) evaluated via logsumexp.

    ``x`` has shape (..., d) broadcasting against the parameter batch; the
    result drops the trailing dimension.
    """
    logits, means, log_vars = params.logits, params.means, params.log_vars
    x = ad.as_tensor(x)
    d = values(means).shape[-1]
    log_mix = ad.log_softmax(logits, axis=-1)
    xe = ad.reshape(x, x.shape[:-1] + (1, d))
    diff = ad.sub(xe, means)
    inv_var = ad.exp(ad.neg(log_vars))
    quad = ad.mul(ad.square(diff), inv_var)
    comp = ad.mul(ad.sum_(ad.add(quad, ad.add(log_vars, _LOG_2PI)), axis=-1), -0.5)
    return ad.logsumexp(ad.add(log_mix, comp), axis=-1)


def gmm_sample(params: GmmParams, rng: np.random.Generator):
    """Draw one sample per batch row; returns ``(sample, component_index)``.

    The Gaussian part is reparameterized (``mu + sigma * eps``) so gradients
    flow into the chosen component's mean and log-variance; the component
    index is chosen by inverse CDF on the mixture weights and carries no
    gradient.  Consumes rng in a fixed order: component uniform, then eps.
    """
    logits_v = values(params.logits)
    k_count = logits_v.shape[-1]
    batch = logits_v.shape[:-1]
    d = params.dim

    m = np.max(logits_v, axis=-1, keepdims=True)
    e = np.exp(logits_v - m)
    probs = e / e.sum(axis=-1, keepdims=True)
    u = rng.random(batch)
    cums = np.cumsum(probs, axis=-1)
    comp = np.sum(u[..., None] >= cums, axis=-1)
    comp = np.minimum(comp, k_count - 1)

    idx = comp.reshape(batch + (1, 1))
    idx = np.broadcast_to(idx, batch + (1, d))
    mu = ad.reshape(ad.take_along(params.means, idx, axis=-2), batch + (d,))
    lv = ad.reshape(ad.take_along(params.log_vars, idx, axis=-2), batch + (d,))
    eps = rng.standard_normal(batch + (d,))
    sample = ad.add(mu, ad.mul(ad.exp(ad.mul(lv, 0.5)), eps))
    return sample, comp


def single_gaussian(mean, log_var) -> GmmParams:
    """A K=1 mixture, convenient for diagonal-Gaussian densities."""
    mean_v = np.asarray(values(mean), dtype=np.float64)
    shape = mean_v.shape
    logits = np.zeros(shape[:-1] + (1,))
    means = ad.reshape(ad.as_tensor(mean), shape[:-1] + (1, shape[-1]))
    lvs = ad.reshape(ad.as_tensor(log_var), shape[:-1] + (1, shape[-1]))
    return GmmParams(Tensor(logits), means, lvs)


# ---------------------------------------------------------------------------
# full-covariance Gaussian fitted to a weighted particle cloud

class FittedGaussian:
    """Weighted-moment Gaussian with full covariance (evaluation only)."""

    def __init__(self, mean: np.ndarray, cov: np.ndarray):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.cov = np.asarray(cov, dtype=np.float64)
        try:
            self._chol = np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError as exc:
            raise DegenerateEnsembleError(
                f"covariance is singular even after jitter: {exc}"
            ) from exc
        self._log_det = 2.0 * np.sum(np.log(np.diag(self._chol)))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        diff = x - self.mean
        y = np.linalg.solve(self._chol, diff.T).T
        quad = np.sum(y * y, axis=-1)
        return -0.5 * (quad + self._log_det + self.dim * _LOG_2PI)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        eps = rng.standard_normal((n, self.dim))
        return self.mean + eps @ self._chol.T


def gaussian_fit(particles: np.ndarray, weights: np.ndarray, jitter: float = 1e-6) -> FittedGaussian:
    """Weighted mean and full covariance of a particle cloud, with jitter.

    ``weights`` must be normalized.  Requires at least two particles.
    """
    z = np.asarray(values(particles), dtype=np.float64)
    w = np.asarray(values(weights), dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise DegenerateEnsembleError(f"need >=2 particles, got shape {z.shape}")
    if abs(w.sum() - 1.0) > 1e-9:
        raise DegenerateEnsembleError(f"weights must be normalized, sum={w.sum()!r}")
    mean = w @ z
    diff = z - mean
    cov = (w[:, None] * diff).T @ diff + jitter * np.eye(z.shape[1])
    return FittedGaussian(mean, cov)


# ---------------------------------------------------------------------------
# Gaussian kernel density estimation

def scott_bandwidth(points: np.ndarray) -> np.ndarray:
    """Scott's rule per dimension: std * n^(-1/(d+4))."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n, d = pts.shape
    sd = pts.std(axis=0, ddof=1)
    return sd * n ** (-1.0 / (d + 4))


class GaussianKde:
    """Gaussian-kernel density estimate over a fixed sample set."""

    def __init__(self, points: np.ndarray, bandwidth=None):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.shape[0] < 1:
            raise ValueError("KDE needs at least one sample")
        self.points = pts
        if bandwidth is None:
            bandwidth = scott_bandwidth(pts)
        h = np.asarray(bandwidth, dtype=np.float64)
        if h.ndim == 0:
            h = np.full(pts.shape[1], float(h))
        if np.any(h <= 0):
            raise ValueError(f"bandwidth must be positive, got {h}")
        self.bandwidth = h
        self._log_norm = np.sum(np.log(h)) + pts.shape[1] * 0.5 * _LOG_2PI

    def log_pdf(self, x: np.ndarray, chunk: int = 2048) -> np.ndarray:
        """Log density at ``x`` of shape (m, d) or (d,); log-domain throughout."""
        q = np.asarray(x, dtype=np.float64)
        single = q.ndim == 1
        if single:
            q = q[None, :]
        n = self.points.shape[0]
        ps = self.points / self.bandwidth
        sq_p = np.sum(ps * ps, axis=1)
        out = np.empty(q.shape[0])
        for start in range(0, q.shape[0], chunk):
            xs = q[start : start + chunk] / self.bandwidth
            # squared distances via the matmul expansion (BLAS-friendly)
            expo = -0.5 * (
                np.sum(xs * xs, axis=1)[:, None] + sq_p[None, :] - 2.0 * (xs @ ps.T)
            )
            m = expo.max(axis=-1, keepdims=True)
            out[start : start + chunk] = (
                m[:, 0] + np.log(np.exp(expo - m).sum(axis=-1)) - math.log(n) - self._log_norm
            )
        return out[0] if single else out

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.integers(0, self.points.shape[0], size=n)
        eps = rng.standard_normal((n, self.points.shape[1]))
        return self.points[idx] + eps * self.bandwidth
