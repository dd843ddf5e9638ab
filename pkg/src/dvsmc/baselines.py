"""Reference filters: bootstrap particle filter and extended Kalman filter.

Both baselines treat the dynamics as unknown and track a 6-D augmented
state (position and velocity) under a constant-velocity transition model;
the simulator's dt is folded into the transition matrix.  Process noise
defaults (position std 0.5, matching the simulator's state noise, velocity
std 0.5) are untuned.  Baselines are initialized around the known initial
position with unit variance; velocities start at N(0, I).

The BPF proposes straight from the transition, so its weights touch only
the image likelihood (it defines no proposal or transition density).  The
EKF linearizes the Gaussian-blob renderer through the autodiff Jacobian,
masks unobserved pixels out of the innovation, and uses the Joseph-form
covariance update with an information-form gain so the cost stays linear
in the number of observed pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ssm
from .autodiff import values
from .smc import FilterConfig, FilterTrace, run_filter

POS_NOISE_STD = 0.5
VEL_NOISE_STD = 0.5


class ConstantVelocityBpf:
    """Bootstrap-filter model over [position, velocity] augmented states."""

    def __init__(self, dt: float = ssm.DT, pos_noise: float = POS_NOISE_STD,
                 vel_noise: float = VEL_NOISE_STD):
        self.dt = dt
        self.pos_noise = pos_noise
        self.vel_noise = vel_noise

    def propose(self, prev, obs, rng):
        p = values(prev)
        n = p.shape[0]
        pos = p[:, :3] + self.dt * p[:, 3:] + rng.normal(0.0, self.pos_noise, (n, 3))
        vel = p[:, 3:] + rng.normal(0.0, self.vel_noise, (n, 3))
        return np.concatenate([pos, vel], axis=1), None

    def log_likelihood(self, z, obs):
        return values(ssm.log_likelihood(values(z)[:, :3], obs.frame, obs.mask, obs.sigma_v))


def baseline_init(initial_position, n: int, rng: np.random.Generator) -> np.ndarray:
    """(n, 6) ensemble: positions N(initial, I), velocities N(0, I)."""
    pos = np.asarray(initial_position, dtype=np.float64) + rng.standard_normal((n, 3))
    vel = rng.standard_normal((n, 3))
    return np.concatenate([pos, vel], axis=1)


def run_bpf(observations, initial_position, n_particles: int,
            rng: np.random.Generator, model: ConstantVelocityBpf | None = None) -> FilterTrace:
    """Run the constant-velocity BPF; trace particles are 6-D."""
    model = model or ConstantVelocityBpf()
    init = baseline_init(initial_position, n_particles, rng)
    config = FilterConfig(n_particles=n_particles, resampler="systematic")
    return run_filter(observations, model, config, rng, init)


# ---------------------------------------------------------------------------
# extended Kalman filter

@dataclass
class EkfBelief:
    mean: np.ndarray  # (6,)
    cov: np.ndarray  # (6, 6), symmetric positive-definite


class EkfError(RuntimeError):
    pass


def cv_transition_matrices(dt: float = ssm.DT, pos_noise: float = POS_NOISE_STD,
                           vel_noise: float = VEL_NOISE_STD):
    f = np.eye(6)
    f[:3, 3:] = dt * np.eye(3)
    q = np.diag([pos_noise**2] * 3 + [vel_noise**2] * 3)
    return f, q


def ekf_predict(belief: EkfBelief, f: np.ndarray, q: np.ndarray) -> EkfBelief:
    mean = f @ belief.mean
    cov = f @ belief.cov @ f.T + q
    return EkfBelief(mean, 0.5 * (cov + cov.T))


def ekf_update(belief: EkfBelief, y: np.ndarray, h_val: np.ndarray,
               jac: np.ndarray, r_var: float) -> EkfBelief:
    """Joseph-form measurement update with an information-form gain.

    ``y`` are the observed values, ``h_val`` the predicted measurement and
    ``jac`` its Jacobian (M, 6); measurement noise is ``r_var * I``.  An
    empty measurement is a no-op.  Cost is O(M * 36), never O(M^2).
    """
    m = y.shape[0]
    if m == 0:
        return belief
    p = 0.5 * (belief.cov + belief.cov.T)
    try:
        p_inv = np.linalg.inv(p)
    except np.linalg.LinAlgError as exc:
        raise EkfError(f"prior covariance not invertible: {exc}") from exc
    info = p_inv + (jac.T @ jac) / r_var
    try:
        post = np.linalg.inv(info)
    except np.linalg.LinAlgError as exc:
        raise EkfError(f"innovation information matrix not invertible: {exc}") from exc
    gain = post @ jac.T / r_var  # (6, M)
    mean = belief.mean + gain @ (y - h_val)
    i_kh = np.eye(6) - gain @ jac
    cov = i_kh @ p @ i_kh.T + r_var * (gain @ gain.T)
    return EkfBelief(mean, 0.5 * (cov + cov.T))


class ImageEkf:
    """EKF on the Lorenz image stream with a constant-velocity model."""

    def __init__(self, dt: float = ssm.DT, pos_noise: float = POS_NOISE_STD,
                 vel_noise: float = VEL_NOISE_STD):
        self.f, self.q = cv_transition_matrices(dt, pos_noise, vel_noise)

    def init_belief(self, initial_position) -> EkfBelief:
        mean = np.zeros(6)
        mean[:3] = np.asarray(initial_position, dtype=np.float64)
        return EkfBelief(mean, np.eye(6))

    def step(self, belief: EkfBelief, obs: ssm.Observation) -> EkfBelief:
        pred = ekf_predict(belief, self.f, self.q)
        mask = np.asarray(obs.mask, dtype=bool).reshape(-1)
        if not mask.any():
            return pred
        img, jac3 = ssm.render_with_jacobian(pred.mean[:3])
        jac = np.zeros((int(mask.sum()), 6))
        jac[:, :3] = jac3[mask]
        y = np.asarray(obs.frame, dtype=np.float64).reshape(-1)[mask]
        return ekf_update(pred, y, img[mask], jac, float(obs.sigma_v) ** 2)

    def run(self, observations, initial_position):
        """Belief sequence plus a FilterTrace view (mean as one particle)."""
        belief = self.init_belief(initial_position)
        beliefs = []
        for obs in observations:
            belief = self.step(belief, obs)
            beliefs.append(belief)
        t = len(beliefs)
        particles = np.stack([b.mean[:3] for b in beliefs])[:, None, :]
        trace = FilterTrace(
            particles=particles,
            weights=np.ones((t, 1)),
            increments=np.zeros(t),
            ess=np.ones(t),
            resampled=np.zeros(t, dtype=bool),
            ot_warnings=np.zeros(t, dtype=bool),
        )
        return beliefs, trace
