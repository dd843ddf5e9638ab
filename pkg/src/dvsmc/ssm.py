"""Lorenz-63 state-space model with image observations.

The latent state follows the classic Lorenz system (sigma=10, rho=28,
beta=8/3) integrated with RK4 at dt=0.02 per filter step, plus additive
Gaussian state noise applied once per observation step.  The measurement
maps the (x, y) components of the state affinely from the box
[-BOX_HALF, BOX_HALF]^2 onto a 28x28 pixel grid and renders an isotropic
Gaussian blob (sigma 1.5 px, unit peak); the z component reaches the image
only through the dynamics.  Observations add pixel-wise Gaussian noise and
may drop 4x4-aligned blocks, keeping a boolean mask of surviving pixels.

Rendering is tape-aware, so the measurement log-likelihood is
differentiable with respect to the particle state, and the same machinery
yields the per-pixel Jacobian used by the EKF baseline.
"""

from __future__ import annotations

import math
from collections import namedtuple
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, values
from .container import read_container, write_container

LORENZ_SIGMA = 10.0
LORENZ_RHO = 28.0
LORENZ_BETA = 8.0 / 3.0
DT = 0.02
STATE_NOISE_STD = 0.5

IMG_SIZE = 28
N_PIXELS = IMG_SIZE * IMG_SIZE
BOX_HALF = 25.0
PSF_SIGMA = 1.5
PSF_AMPLITUDE = 1.0
# blob centers are clamped to the border region just outside the grid so the
# rendered image stays finite (and smooth) for off-attractor states
CENTER_CLAMP_LO = -2.0
CENTER_CLAMP_HI = float(IMG_SIZE + 1)
BLOCK = 4

_PIX_SCALE = (IMG_SIZE - 1) / (2.0 * BOX_HALF)  # state units -> pixels
_GRID = np.arange(IMG_SIZE, dtype=np.float64)
_GX = np.tile(_GRID, IMG_SIZE)  # column index per flat pixel
_GY = np.repeat(_GRID, IMG_SIZE)  # row index per flat pixel
_LOG_2PI = math.log(2.0 * math.pi)


class SimulationError(RuntimeError):
    """Raised on non-finite states or malformed simulation inputs."""


# one filter-step observation: flat (784,) frame, flat boolean mask, and the
# noise level the likelihood should assume
Observation = namedtuple("Observation", ["frame", "mask", "sigma_v"])


# ---------------------------------------------------------------------------
# dynamics

def lorenz_deriv(state: np.ndarray) -> np.ndarray:
    """Lorenz-63 vector field; accepts (..., 3)."""
    x, y, z = state[..., 0], state[..., 1], state[..., 2]
    return np.stack(
        [
            LORENZ_SIGMA * (y - x),
            x * (LORENZ_RHO - z) - y,
            x * y - LORENZ_BETA * z,
        ],
        axis=-1,
    )


def rk4_step(state: np.ndarray, dt: float = DT) -> np.ndarray:
    """One deterministic RK4 integration step of the Lorenz field."""
    k1 = lorenz_deriv(state)
    k2 = lorenz_deriv(state + 0.5 * dt * k1)
    k3 = lorenz_deriv(state + 0.5 * dt * k2)
    k4 = lorenz_deriv(state + dt * k3)
    return state + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def lorenz_step(state, dt: float = DT, rng: np.random.Generator | None = None,
                sigma_e: float = STATE_NOISE_STD) -> np.ndarray:
    """RK4 step plus additive Gaussian state noise (once per step)."""
    state = np.asarray(state, dtype=np.float64)
    if dt <= 0:
        raise SimulationError(f"dt must be positive, got {dt}")
    if not np.all(np.isfinite(state)):
        raise SimulationError(f"non-finite state {state!r}")
    out = rk4_step(state, dt)
    if rng is not None and sigma_e > 0:
        out = out + rng.normal(0.0, sigma_e, size=state.shape)
    return out


def simulate_noise_free(start, n_steps: int, dt: float = DT) -> np.ndarray:
    """Deterministic trajectory of ``n_steps`` states (start excluded)."""
    state = np.asarray(start, dtype=np.float64)
    out = np.empty((n_steps, 3))
    for i in range(n_steps):
        state = rk4_step(state, dt)
        out[i] = state
    return out


_REFERENCE_PATH: np.ndarray | None = None
_BURN_RANGE = (100, 1100)


def _reference_path() -> np.ndarray:
    global _REFERENCE_PATH
    if _REFERENCE_PATH is None:
        _REFERENCE_PATH = simulate_noise_free(np.array([1.0, 1.0, 1.0]), _BURN_RANGE[1])
    return _REFERENCE_PATH


def sample_initial_state(rng: np.random.Generator, dt: float = DT) -> np.ndarray:
    """On-attractor start: noise-free run from (1,1,1), random burn-in."""
    burn = int(rng.integers(_BURN_RANGE[0], _BURN_RANGE[1] + 1))
    if dt == DT:
        return _reference_path()[burn - 1].copy()
    return simulate_noise_free(np.array([1.0, 1.0, 1.0]), burn, dt)[-1]


# ---------------------------------------------------------------------------
# measurement: Gaussian PSF rendering

def _render_flat(states) -> Tensor:
    """Render (N, 3) states to (N, 784) images; tape-aware."""
    z = ad.as_tensor(states)
    n = z.shape[0]
    xy = ad.gather(z, [0, 1], axis=1)  # (N, 2)
    centers = ad.clip(
        ad.add(ad.mul(xy, _PIX_SCALE), BOX_HALF * _PIX_SCALE),
        CENTER_CLAMP_LO,
        CENTER_CLAMP_HI,
    )
    px = ad.gather(centers, [0], axis=1)  # (N, 1), column position
    py = ad.gather(centers, [1], axis=1)  # (N, 1), row position
    dx = ad.sub(_GX[None, :], px)
    dy = ad.sub(_GY[None, :], py)
    d2 = ad.add(ad.square(dx), ad.square(dy))
    img = ad.mul(ad.exp(ad.mul(d2, -0.5 / PSF_SIGMA**2)), PSF_AMPLITUDE)
    return img


def render(state) -> Tensor:
    """Render a single state to a (28, 28) image tensor."""
    state = ad.as_tensor(state)
    if state.shape != (3,):
        raise SimulationError(f"render expects a 3-vector, got shape {state.shape}")
    if not np.all(np.isfinite(state.data)):
        raise SimulationError(f"non-finite state {state.data!r}")
    flat = _render_flat(ad.reshape(state, (1, 3)))
    return ad.reshape(flat, (IMG_SIZE, IMG_SIZE))


def render_with_jacobian(state: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Image (784,) and its Jacobian (784, 3) at ``state``.

    The Jacobian comes from one reverse pass: each pixel depends only on its
    own copy of the blob center, so the gradient of the pixel sum with
    respect to a per-pixel center leaf is exactly the per-pixel derivative.
    The affine (and clamp) factor from state to center is chained on
    analytically at the end.
    """
    state = np.asarray(state, dtype=np.float64)
    raw = state[:2] * _PIX_SCALE + BOX_HALF * _PIX_SCALE
    center = np.clip(raw, CENTER_CLAMP_LO, CENTER_CLAMP_HI)
    active = (raw > CENTER_CLAMP_LO) & (raw < CENTER_CLAMP_HI)

    with ad.Tape() as tape:
        px = Tensor(np.full(N_PIXELS, center[0]))
        py = Tensor(np.full(N_PIXELS, center[1]))
        tape.watch(px, py)
        dx = ad.sub(_GX, px)
        dy = ad.sub(_GY, py)
        img = ad.mul(ad.exp(ad.mul(ad.add(ad.square(dx), ad.square(dy)),
                                   -0.5 / PSF_SIGMA**2)), PSF_AMPLITUDE)
        tape.backward(ad.sum_(img))
        d_px = px.grad if px.grad is not None else np.zeros(N_PIXELS)
        d_py = py.grad if py.grad is not None else np.zeros(N_PIXELS)
        image = img.data

    jac = np.zeros((N_PIXELS, 3))
    jac[:, 0] = d_px * (_PIX_SCALE if active[0] else 0.0)
    jac[:, 1] = d_py * (_PIX_SCALE if active[1] else 0.0)
    return image, jac


# ---------------------------------------------------------------------------
# observation noise and masking

def observe(clean: np.ndarray, sigma_v: float, observe_p: float,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """AWGN plus 4x4 block dropping; returns ``(frame, mask)`` as (28, 28).

    Noise is added pixel-wise first; afterwards each of the 49 aligned 4x4
    blocks survives independently with probability ``observe_p``.  Dropped
    pixels are stored as zero and excluded by the mask.
    """
    if not 0.0 <= observe_p <= 1.0:
        raise SimulationError(f"observe proportion must be in [0, 1], got {observe_p}")
    if sigma_v < 0:
        raise SimulationError(f"sigma_v must be >= 0, got {sigma_v}")
    clean = np.asarray(clean, dtype=np.float64).reshape(IMG_SIZE, IMG_SIZE)
    noisy = clean + rng.normal(0.0, 1.0, clean.shape) * sigma_v
    nb = IMG_SIZE // BLOCK
    keep = rng.random((nb, nb)) < observe_p
    mask = np.kron(keep, np.ones((BLOCK, BLOCK), dtype=bool))
    return noisy * mask, mask


def log_likelihood(particles, frame: np.ndarray, mask: np.ndarray, sigma_v: float):
    """Gaussian image log-likelihood summed over observed pixels.

    ``particles`` is (N, 3) (or a single 3-vector); differentiable through
    the renderer.  An empty mask carries no information and yields zero.
    """
    if sigma_v <= 0:
        raise SimulationError(f"sigma_v must be positive, got {sigma_v}")
    z = ad.as_tensor(particles)
    single = z.ndim == 1
    if single:
        z = ad.reshape(z, (1, 3))
    frame_flat = np.asarray(frame, dtype=np.float64).reshape(-1)
    mask_flat = np.asarray(mask).reshape(-1).astype(np.float64)
    m_obs = mask_flat.sum()
    img = _render_flat(z)
    resid = ad.sub(img, frame_flat[None, :])
    sse = ad.sum_(ad.mul(ad.square(resid), mask_flat[None, :]), axis=1)
    const = m_obs * (math.log(sigma_v) + 0.5 * _LOG_2PI)
    out = ad.sub(ad.mul(sse, -0.5 / sigma_v**2), const)
    return ad.reshape(out, ()) if single else out


# ---------------------------------------------------------------------------
# datasets

@dataclass
class Dataset:
    """Trajectory collection: states, observation frames and masks.

    ``states`` has shape (n, T+1, 3) with index 0 holding the initial state
    that precedes the first observation; ``frames`` and ``masks`` have shape
    (n, T, 784).  ``sigma_v`` and ``observe_p`` are per-trajectory.
    """

    states: np.ndarray
    frames: np.ndarray
    masks: np.ndarray
    sigma_v: np.ndarray
    observe_p: np.ndarray
    sigma_e: float
    dt: float
    seed: int

    @property
    def count(self) -> int:
        return self.states.shape[0]

    @property
    def n_steps(self) -> int:
        return self.states.shape[1] - 1

    def observations(self, i: int, limit: int | None = None) -> list[Observation]:
        """Per-step observation bundles for trajectory ``i``."""
        t = self.n_steps if limit is None else min(limit, self.n_steps)
        sv = float(self.sigma_v[i])
        return [Observation(self.frames[i, s], self.masks[i, s], sv) for s in range(t)]

    def save(self, path) -> None:
        write_container(
            path,
            {
                "states": self.states,
                "frames": self.frames,
                "masks": self.masks.astype(np.uint8),
                "sigma_v": self.sigma_v,
                "observe_p": self.observe_p,
            },
            meta={"sigma_e": self.sigma_e, "dt": self.dt, "seed": self.seed},
            kind="dataset",
        )

    @classmethod
    def load(cls, path) -> "Dataset":
        arrays, meta, kind = read_container(path)
        if kind != "dataset":
            raise SimulationError(f"{path} is a {kind!r} container, not a dataset")
        return cls(
            states=arrays["states"],
            frames=arrays["frames"],
            masks=arrays["masks"].astype(bool),
            sigma_v=arrays["sigma_v"],
            observe_p=arrays["observe_p"],
            sigma_e=float(meta["sigma_e"]),
            dt=float(meta["dt"]),
            seed=int(meta["seed"]),
        )

    def regenerate_observations(self, seed: int, sigma_v=None, observe_p=None) -> "Dataset":
        """Fresh noise and masks over the same ground-truth states.

        Used to evaluate across seeds and across noise/mask conditions
        without re-simulating dynamics; the clean frames are a deterministic
        function of the states.
        """
        n, t1, _ = self.states.shape
        t = t1 - 1
        sv = np.full(n, float(sigma_v)) if sigma_v is not None else self.sigma_v.copy()
        op = np.full(n, float(observe_p)) if observe_p is not None else self.observe_p.copy()
        frames = np.empty((n, t, N_PIXELS))
        masks = np.empty((n, t, N_PIXELS), dtype=bool)
        for i in range(n):
            rng = np.random.default_rng([seed, i])
            clean = values(_render_flat(self.states[i, 1:]))
            for step in range(t):
                frame, mask = observe(clean[step], sv[i], op[i], rng)
                frames[i, step] = frame.reshape(-1)
                masks[i, step] = mask.reshape(-1)
        return replace(
            self, frames=frames, masks=masks, sigma_v=sv, observe_p=op, seed=seed
        )


def _resolve_setting(spec, rng: np.random.Generator) -> float:
    """Scalar, (low, high) tuple for a uniform range, or list for a grid."""
    if np.isscalar(spec):
        return float(spec)
    if isinstance(spec, tuple) and len(spec) == 2:
        return float(rng.uniform(float(spec[0]), float(spec[1])))
    spec = list(spec)
    return float(spec[int(rng.integers(0, len(spec)))])


def generate_dataset(count: int, n_steps: int, sigma_v, observe_p,
                     seed: int, sigma_e: float = STATE_NOISE_STD, dt: float = DT) -> Dataset:
    """Simulate ``count`` trajectories of ``n_steps`` observed steps.

    ``sigma_v`` / ``observe_p`` may be scalars, (low, high) tuples, or grid
    lists, resolved per trajectory.  Each trajectory owns the rng stream
    ``default_rng([seed, index])`` and draws, in order: its noise settings,
    the burn-in length, then per step the state noise followed by the
    observation noise and block mask.
    """
    if count < 1 or n_steps < 1:
        raise SimulationError("count and n_steps must be >= 1")
    states = np.empty((count, n_steps + 1, 3))
    frames = np.empty((count, n_steps, N_PIXELS))
    masks = np.empty((count, n_steps, N_PIXELS), dtype=bool)
    sv_arr = np.empty(count)
    op_arr = np.empty(count)
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        sv = _resolve_setting(sigma_v, rng)
        op = _resolve_setting(observe_p, rng)
        sv_arr[i] = sv
        op_arr[i] = op
        state = sample_initial_state(rng, dt)
        states[i, 0] = state
        for t in range(n_steps):
            state = lorenz_step(state, dt, rng, sigma_e)
            states[i, t + 1] = state
        clean = values(_render_flat(states[i, 1:]))
        for t in range(n_steps):
            frame, mask = observe(clean[t], sv, op, rng)
            frames[i, t] = frame.reshape(-1)
            masks[i, t] = mask.reshape(-1)
    return Dataset(states, frames, masks, sv_arr, op_arr, sigma_e, dt, seed)
