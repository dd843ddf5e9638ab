"""Particle filter engine: weighting, ESS, resampling, evidence.

The filter is generic over a model object providing

    propose(prev_particles, obs, rng)      -> (particles, log_q or None)
    transition_log_pdf(prev, particles)    -> (N,) log densities
    log_likelihood(particles, obs)         -> (N,) log densities

A bootstrap model returns ``log_q=None`` from ``propose``; the proposal and
transition densities then cancel and the weight update touches only the
likelihood (``transition_log_pdf`` is never called on that path).

Log-weight convention: carried log-weights are normalized to *mean one*
(uniform weights are all zeros, so ``sum(exp(lw)) == N``).  Under this
convention the per-step evidence increment is exactly

    log p(y_t | y_1:t-1) ~ logsumexp(log w_tilde) - log N

at every step, whether or not the previous step resampled, and equals the
linear-domain mean of the unnormalized weights.  Evidence is accumulated
strictly in the log domain.  The increment is computed before resampling;
resampling does not alter the current step's unnormalized weights.

During training the differentiable optimal-transport resampler keeps the
whole filter on the tape; at inference systematic resampling is used and
nothing is recorded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, values
from .container import read_container, write_container


class ParticleDeathError(RuntimeError):
    """All particle weights underflowed; the run aborts with diagnostics."""


class WeightUpdateError(RuntimeError):
    """A weight-update term went non-finite."""


@dataclass
class FilterConfig:
    n_particles: int = 28
    resample_threshold: float | None = None  # defaults to N/2
    resampler: str = "systematic"  # "systematic" | "ot"
    sinkhorn_eps: float = 0.5  # in mean-normalized cost units
    sinkhorn_max_iters: int = 100
    sinkhorn_tol: float = 1e-6
    sigma_v: float = 0.1

    def __post_init__(self):
        if self.resample_threshold is None:
            self.resample_threshold = self.n_particles / 2.0
        if not 1 <= self.resample_threshold <= self.n_particles:
            raise ValueError(
                f"resample threshold {self.resample_threshold} outside [1, {self.n_particles}]"
            )
        if self.resampler not in ("systematic", "ot"):
            raise ValueError(f"unknown resampler {self.resampler!r}")
        if self.sinkhorn_eps <= 0:
            raise ValueError(f"sinkhorn_eps must be positive, got {self.sinkhorn_eps}")


class ParticleEnsemble:
    """N particles with carried log-weights (mean-one convention)."""

    def __init__(self, particles, log_weights=None):
        self.particles = particles  # (N, d), Tensor while training
        n = values(particles).shape[0]
        if log_weights is None:
            log_weights = np.zeros(n)
        self.log_weights = log_weights  # (N,), mean-one convention
        self._norm = None

    @property
    def n(self) -> int:
        return values(self.particles).shape[0]

    def _normalized(self) -> np.ndarray:
        if self._norm is None:
            lw = values(self.log_weights)
            m = lw.max()
            w = np.exp(lw - m)
            self._norm = w / w.sum()
        return self._norm

    @property
    def normalized_weights(self) -> np.ndarray:
        return self._normalized()

    @property
    def ess(self) -> float:
        w = self._normalized()
        return float(1.0 / np.sum(w * w))

    def weighted_mean(self) -> np.ndarray:
        return self.normalized_weights @ values(self.particles)


def weight_update(prev_log_weight, log_lik, log_transition=None, log_proposal=None):
    """log w~ = log w_prev + log p(y|z) [+ log p(z|z') - log q(z|z',y)].

    The transition and proposal terms are both present or both absent (the
    bootstrap cancellation).  Raises naming the offending term if any input
    is non-finite.
    """
    terms = {"prev_log_weight": prev_log_weight, "log_likelihood": log_lik}
    if (log_transition is None) != (log_proposal is None):
        raise WeightUpdateError("transition and proposal terms must be paired")
    if log_transition is not None:
        terms["log_transition"] = log_transition
        terms["log_proposal"] = log_proposal
    for name, term in terms.items():
        if not np.all(np.isfinite(values(term))):
            raise WeightUpdateError(f"non-finite weight-update term {name!r}")
    out = ad.add(prev_log_weight, log_lik)
    if log_transition is not None:
        out = ad.sub(ad.add(out, log_transition), log_proposal)
    return out


def normalize_log_weights(log_w):
    """Normalization bundle for one step's unnormalized log-weights.

    Returns ``(log_norm, carried, increment, norm_w, ess)`` where
    ``log_norm`` are sum-one normalized log-weights (tape-aware),
    ``carried`` are the mean-one log-weights to carry forward, and
    ``increment`` is the evidence term ``logsumexp(log_w) - log N``.
    """
    lw = values(log_w)
    if np.any(np.isnan(lw)):
        raise WeightUpdateError("NaN log-weight after update")
    if np.all(np.isneginf(lw)):
        raise ParticleDeathError(
            "all log-weights underflowed to -inf (total particle death)"
        )
    n = lw.shape[0]
    log_z = ad.logsumexp(log_w)
    log_norm = ad.sub(log_w, log_z)
    carried = ad.add(log_norm, math.log(n))
    increment = ad.sub(log_z, math.log(n))
    norm_w = np.exp(values(log_norm))
    norm_w = norm_w / norm_w.sum()  # exact sum-one for resampling
    ess = float(1.0 / np.sum(norm_w * norm_w))
    return log_norm, carried, increment, norm_w, ess


def normalize_and_ess(log_w):
    """(normalized weights, ESS, evidence increment) for given log-weights."""
    _, _, increment, norm_w, ess = normalize_log_weights(log_w)
    return norm_w, ess, increment


# ---------------------------------------------------------------------------
# resampling

def systematic_indices(weights: np.ndarray, rng: np.random.Generator | None = None,
                       u: float | None = None) -> np.ndarray:
    """Offspring indices from one uniform draw and an evenly spaced comb."""
    w = np.asarray(weights, dtype=np.float64)
    n = w.shape[0]
    if u is None:
        u = float(rng.random()) / n
    positions = u + np.arange(n) / n
    cum = np.cumsum(w)
    cum[-1] = 1.0  # guard fp drift
    return np.minimum(np.searchsorted(cum, positions, side="right"), n - 1)


def systematic_resample(ensemble: ParticleEnsemble, rng: np.random.Generator) -> ParticleEnsemble:
    """Resample to uniform weights; operates on values (inference path)."""
    idx = systematic_indices(ensemble.normalized_weights, rng)
    return ParticleEnsemble(values(ensemble.particles)[idx].copy())


def sinkhorn_plan(log_a, cost, eps: float, max_iters: int, tol: float):
    """Entropy-regularized transport plan between weights ``exp(log_a)`` and
    the uniform measure, by log-domain Sinkhorn iterations (tape-aware).

    The cost matrix is normalized by its mean value before iterating, so
    ``eps`` is in scale-free units.  Returns ``(plan, converged, n_iters)``;
    row sums of the plan approach ``exp(log_a)`` and column sums ``1/N``.
    """
    n = values(log_a).shape[0]
    mean_c = ad.mean_(cost)
    if float(values(mean_c)) > 1e-12:
        cost = ad.div(cost, mean_c)
    log_b = -math.log(n)

    f = Tensor(np.zeros(n))
    g = Tensor(np.zeros(n))
    converged = False
    iters = 0
    for iters in range(1, max_iters + 1):
        gc = ad.reshape(g, (1, n))
        f = ad.mul(ad.sub(log_a, ad.logsumexp(ad.mul(ad.sub(gc, cost), 1.0 / eps), axis=1)), eps)
        fc = ad.reshape(f, (n, 1))
        g = ad.mul(
            ad.sub(log_b, ad.logsumexp(ad.mul(ad.sub(fc, cost), 1.0 / eps), axis=0)), eps
        )
        # marginal violation, checked on plain values
        log_t = (values(f)[:, None] + values(g)[None, :] - values(cost)) / eps
        t_val = np.exp(log_t)
        err = np.abs(t_val.sum(axis=1) - np.exp(values(log_a))).sum()
        if err < tol:
            converged = True
            break
    plan = ad.exp(
        ad.mul(ad.sub(ad.add(ad.reshape(f, (n, 1)), ad.reshape(g, (1, n))), cost), 1.0 / eps)
    )
    return plan, converged, iters


def squared_distance_matrix(particles):
    """Pairwise squared Euclidean distances, tape-aware."""
    z = ad.as_tensor(particles)
    n = z.shape[0]
    sq = ad.sum_(ad.square(z), axis=1)
    cross = ad.matmul(z, ad.transpose(z))
    c = ad.add(ad.reshape(sq, (n, 1)), ad.reshape(sq, (1, n)))
    c = ad.sub(c, ad.mul(cross, 2.0))
    # clamp tiny negatives from cancellation; keeps the cost matrix valid
    return ad.relu(c)


def ot_resample(particles, log_norm_weights, eps: float = 0.5,
                max_iters: int = 100, tol: float = 1e-6):
    """Differentiable ensemble-transform resampling.

    Sinkhorn iterations between the weighted source measure and the uniform
    target (both supported on the current particles, cost = squared
    distance) give a transport plan T; the new ensemble is ``N T^T Z`` with
    uniform weights.  Differentiable through particles and weights.
    Returns ``(new_particles, plan, converged, n_iters)``.
    """
    z = ad.as_tensor(particles)
    n = z.shape[0]
    cost = squared_distance_matrix(z)
    plan, converged, iters = sinkhorn_plan(log_norm_weights, cost, eps, max_iters, tol)
    new = ad.mul(ad.matmul(ad.transpose(plan), z), float(n))
    return new, plan, converged, iters


# ---------------------------------------------------------------------------
# the filter loop

@dataclass
class StepStats:
    increment: object  # scalar Tensor (tape-aware during training)
    ess: float
    resampled: bool
    ot_warning: bool = False
    # weighted posterior snapshot taken before any resampling
    pre_particles: np.ndarray | None = None
    pre_weights: np.ndarray | None = None


@dataclass
class FilterTrace:
    """Per-step filtering record; posterior snapshots are pre-resampling."""

    particles: np.ndarray  # (T, N, d)
    weights: np.ndarray  # (T, N) normalized, pre-resampling
    increments: np.ndarray  # (T,) log p(y_t | y_1:t-1)
    ess: np.ndarray  # (T,)
    resampled: np.ndarray  # (T,) bool
    ot_warnings: np.ndarray  # (T,) bool, Sinkhorn non-convergence flags
    log_evidence_tensor: object = None  # scalar Tensor when run on a tape

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.increments)

    @property
    def log_evidence(self) -> float:
        return float(self.increments.sum())

    def posterior_means(self) -> np.ndarray:
        return np.einsum("tn,tnd->td", self.weights, self.particles)

    def save(self, path, meta: dict | None = None) -> None:
        arrays = {
            "particles": self.particles,
            "weights": self.weights,
            "increments": self.increments,
            "ess": self.ess,
            "resampled": self.resampled.astype(np.uint8),
            "ot_warnings": self.ot_warnings.astype(np.uint8),
        }
        write_container(path, arrays, meta or {}, kind="trace")

    @classmethod
    def load(cls, path) -> "FilterTrace":
        arrays, _, kind = read_container(path)
        if kind != "trace":
            raise ValueError(f"{path} is a {kind!r} container, not a trace")
        return cls(
            particles=arrays["particles"],
            weights=arrays["weights"],
            increments=arrays["increments"],
            ess=arrays["ess"],
            resampled=arrays["resampled"].astype(bool),
            ot_warnings=arrays["ot_warnings"].astype(bool),
        )


def filter_step(ensemble: ParticleEnsemble, obs, model, config: FilterConfig,
                rng: np.random.Generator) -> tuple[ParticleEnsemble, StepStats]:
    """One propose / weight / normalize / evidence / maybe-resample cycle."""
    prev = ensemble.particles
    z, log_q = model.propose(prev, obs, rng)
    log_lik = model.log_likelihood(z, obs)
    if log_q is None:
        lw = weight_update(ensemble.log_weights, log_lik)
    else:
        log_p = model.transition_log_pdf(prev, z)
        lw = weight_update(ensemble.log_weights, log_lik, log_p, log_q)

    log_norm, carried, increment, norm_w, ess = normalize_log_weights(lw)

    resampled = ess < config.resample_threshold
    ot_warning = False
    if resampled:
        if config.resampler == "ot":
            new_z, _, converged, _ = ot_resample(
                z, log_norm, config.sinkhorn_eps, config.sinkhorn_max_iters,
                config.sinkhorn_tol,
            )
            ot_warning = not converged
        else:
            idx = systematic_indices(norm_w, rng)
            new_z = values(z)[idx].copy()
        out = ParticleEnsemble(new_z)  # uniform carried weights
    else:
        out = ParticleEnsemble(z, carried)

    stats = StepStats(increment=increment, ess=ess, resampled=resampled,
                      ot_warning=ot_warning, pre_particles=values(z).copy(),
                      pre_weights=norm_w)
    return out, stats


def run_filter(observations, model, config: FilterConfig, rng: np.random.Generator,
               init_particles) -> FilterTrace:
    """Run the filter over a sequence of observations.

    ``observations`` is an iterable of per-step observation objects in
    whatever form ``model`` understands.  ``init_particles`` is the (N, d)
    initial ensemble (uniform weights).  The trace snapshots the weighted
    posterior before any resampling at each step.
    """
    ensemble = ParticleEnsemble(ad.as_tensor(init_particles))
    particles_hist, weights_hist = [], []
    increments, ess_hist, res_hist, warn_hist = [], [], [], []
    log_ev = None
    for obs in observations:
        ensemble, stats = filter_step(ensemble, obs, model, config, rng)
        particles_hist.append(stats.pre_particles)
        weights_hist.append(stats.pre_weights)
        increments.append(float(values(stats.increment)))
        ess_hist.append(stats.ess)
        res_hist.append(stats.resampled)
        warn_hist.append(stats.ot_warning)
        log_ev = stats.increment if log_ev is None else ad.add(log_ev, stats.increment)
    return FilterTrace(
        particles=np.asarray(particles_hist),
        weights=np.asarray(weights_hist),
        increments=np.asarray(increments),
        ess=np.asarray(ess_hist),
        resampled=np.asarray(res_hist, dtype=bool),
        ot_warnings=np.asarray(warn_hist, dtype=bool),
        log_evidence_tensor=log_ev,
    )
