"""Neural parameterizations: conv observation encoder, GMM proposal and
transition heads, and the supervised regression encoder baseline.

The encoder sees two input channels, the masked image and the binary mask
itself, so it can tell a zero pixel from an unobserved one.  Three conv
layers (3x3, ReLU, 2x2 max-pool, channel width doubling per layer) are
followed by one fully connected layer to the encoding.  Proposal and
transition heads are six-layer ReLU MLPs whose final layer emits, per
particle, K mixture logits, K*d mean offsets and K*d log-variances; means
are offsets from the previous particle so the zero-initialized heads start
as a unit-variance random walk.  Log-variances are clamped before exp.

Default sizes follow the experiment configuration (base width 8, encoding
256, MLP width 256, K=2, d=3); everything is parameterized so tests can
run tiny instances.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from . import ssm
from .autodiff import Tensor, values
from .distributions import LOG_VAR_MAX, LOG_VAR_MIN, GmmParams, gmm_log_pdf, gmm_sample

STATE_DIM = 3
ENCODING_DIM = 256
MLP_WIDTH = 256
MLP_LAYERS = 6
BASE_CHANNELS = 8
MIXTURE_COMPONENTS = 2


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 init_scale: float = 1.0):
        # init_scale < 1 keeps early outputs near zero without cutting the
        # gradient path to upstream layers the way exact zeros would
        w = init_scale * _kaiming_uniform(rng, (n_in, n_out), n_in)
        self.weight = Tensor(w)
        self.bias = Tensor(np.zeros(n_out))

    def __call__(self, x):
        return ad.add(ad.matmul(x, self.weight), self.bias)

    def params(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


class Conv2d:
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, kernel=3):
        fan_in = c_in * kernel * kernel
        self.weight = Tensor(_kaiming_uniform(rng, (c_out, c_in, kernel, kernel), fan_in))
        self.bias = Tensor(np.zeros(c_out))

    def __call__(self, x):
        return ad.conv2d(x, self.weight, self.bias)

    def params(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


class Mlp:
    """ReLU MLP; hidden activations after every layer except the last."""

    def __init__(self, dims, rng, last_init_scale: float = 1.0):
        self.layers = [
            Linear(dims[i], dims[i + 1], rng,
                   init_scale=(last_init_scale if i == len(dims) - 2 else 1.0))
            for i in range(len(dims) - 1)
        ]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
        return x

    def params(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            for key, p in layer.params().items():
                out[f"l{i + 1}.{key}"] = p
        return out


def _collect(prefix: str, parts: dict[str, dict[str, Tensor]]) -> dict[str, Tensor]:
    out = {}
    for part_name, params in parts.items():
        for key, p in params.items():
            out[f"{prefix}{part_name}.{key}"] = p
    return out


class EncoderNet:
    """28x28 (image, mask) pair -> encoding vector."""

    def __init__(self, rng: np.random.Generator, base_channels=BASE_CHANNELS,
                 encoding_dim=ENCODING_DIM):
        b = base_channels
        self.conv1 = Conv2d(2, b, rng)
        self.conv2 = Conv2d(b, 2 * b, rng)
        self.conv3 = Conv2d(2 * b, 4 * b, rng)
        self.fc = Linear(4 * b * 3 * 3, encoding_dim, rng)
        self.encoding_dim = encoding_dim

    def encode_batch(self, frames, masks):
        """(B, 784) frames and masks -> (B, encoding_dim)."""
        f = ad.as_tensor(frames)
        batch = f.shape[0]
        if f.shape[1] != ssm.N_PIXELS:
            raise ValueError(f"expected flat 28x28 frames, got shape {f.shape}")
        m = np.asarray(values(masks), dtype=np.float64).reshape(batch, 1, 28, 28)
        x = ad.concat([ad.reshape(f, (batch, 1, 28, 28)), Tensor(m)], axis=1)
        h = ad.maxpool2x2(ad.relu(self.conv1(x)))
        h = ad.maxpool2x2(ad.relu(self.conv2(h)))
        h = ad.maxpool2x2(ad.relu(self.conv3(h)))
        h = ad.reshape(h, (batch, -1))
        return self.fc(h)

    def encode(self, frame, mask):
        """Single frame -> (encoding_dim,) vector."""
        f = ad.as_tensor(frame)
        out = self.encode_batch(ad.reshape(f, (1, ssm.N_PIXELS)),
                                np.reshape(values(mask), (1, ssm.N_PIXELS)))
        return ad.reshape(out, (self.encoding_dim,))

    def params(self) -> dict[str, Tensor]:
        return _collect("", {"conv1": self.conv1.params(), "conv2": self.conv2.params(),
                             "conv3": self.conv3.params(), "fc": self.fc.params()})


def split_raw_gmm(raw, k: int, d: int):
    """Bijective split of (N, K(2d+1)) head output into GMM pieces.

    Returns ``(logits (N,K), mean_offsets (N,K,d), raw_log_vars (N,K,d))``.
    """
    n = values(raw).shape[0]
    logits = ad.gather(raw, np.arange(k), axis=1)
    offs = ad.reshape(ad.gather(raw, np.arange(k, k + k * d), axis=1), (n, k, d))
    lvs = ad.reshape(ad.gather(raw, np.arange(k + k * d, k + 2 * k * d), axis=1), (n, k, d))
    return logits, offs, lvs


def assemble_gmm(raw, prev, k: int, d: int) -> GmmParams:
    """Head output -> GmmParams; means are offsets from ``prev``, variances clamped."""
    n = values(raw).shape[0]
    logits, offs, lvs = split_raw_gmm(raw, k, d)
    means = ad.add(offs, ad.reshape(prev, (n, 1, d)))
    log_vars = ad.clip(lvs, LOG_VAR_MIN, LOG_VAR_MAX)
    return GmmParams(logits, means, log_vars)


class ProposalNet:
    """(previous particle, observation encoding) -> proposal GMM."""

    def __init__(self, rng, encoding_dim=ENCODING_DIM, width=MLP_WIDTH,
                 n_layers=MLP_LAYERS, k=MIXTURE_COMPONENTS, d=STATE_DIM):
        self.k, self.d = k, d
        self.encoding_dim = encoding_dim
        dims = [d + encoding_dim] + [width] * (n_layers - 1) + [k * (2 * d + 1)]
        self.mlp = Mlp(dims, rng, last_init_scale=0.05)

    def propose_params(self, prev, encoding) -> GmmParams:
        prev = ad.as_tensor(prev)
        # the encoding is shared across particles, so its share of the first
        # layer is computed once as a (1, width) row and broadcast
        l1 = self.mlp.layers[0]
        w_prev = ad.gather(l1.weight, np.arange(self.d), axis=0)
        w_enc = ad.gather(l1.weight, np.arange(self.d, self.d + self.encoding_dim), axis=0)
        enc_row = ad.matmul(ad.reshape(encoding, (1, self.encoding_dim)), w_enc)
        h = ad.relu(ad.add(ad.add(ad.matmul(prev, w_prev), enc_row), l1.bias))
        for i, layer in enumerate(self.mlp.layers[1:], start=1):
            h = layer(h)
            if i < len(self.mlp.layers) - 1:
                h = ad.relu(h)
        return assemble_gmm(h, prev, self.k, self.d)

    def params(self):
        return _collect("", {"mlp": self.mlp.params()})


class TransitionNet:
    """Previous particle -> transition GMM (no observation input)."""

    def __init__(self, rng, width=MLP_WIDTH, n_layers=MLP_LAYERS,
                 k=MIXTURE_COMPONENTS, d=STATE_DIM):
        self.k, self.d = k, d
        dims = [d] + [width] * (n_layers - 1) + [k * (2 * d + 1)]
        self.mlp = Mlp(dims, rng, last_init_scale=0.05)

    def transition_params(self, prev) -> GmmParams:
        prev = ad.as_tensor(prev)
        raw = self.mlp(prev)
        return assemble_gmm(raw, prev, self.k, self.d)

    def params(self):
        return _collect("", {"mlp": self.mlp.params()})


class SupervisedEncoder:
    """Image -> coordinate point estimate (the supervised baseline)."""

    def __init__(self, rng, base_channels=BASE_CHANNELS, encoding_dim=ENCODING_DIM,
                 width=MLP_WIDTH, n_layers=MLP_LAYERS, d=STATE_DIM):
        self.encoder = EncoderNet(rng, base_channels, encoding_dim)
        dims = [encoding_dim] + [width] * (n_layers - 1) + [d]
        self.mlp = Mlp(dims, rng)

    def predict_batch(self, frames, masks):
        return self.mlp(self.encoder.encode_batch(frames, masks))

    def predict(self, frame, mask) -> np.ndarray:
        out = self.predict_batch(np.reshape(values(frame), (1, ssm.N_PIXELS)),
                                 np.reshape(values(mask), (1, ssm.N_PIXELS)))
        return values(out)[0]

    def named_parameters(self) -> dict[str, Tensor]:
        return _collect("supervised.", {"encoder": self.encoder.params(),
                                        "mlp": self.mlp.params()})


class DpfModel:
    """Wires the networks to the particle filter interface.

    ``propose`` encodes the observation, builds per-particle proposal GMMs,
    samples with the reparameterization trick, and returns the sample with
    its proposal log-density (both tape-aware).  The initial ensemble is
    drawn from an estimated attractor prior rather than the true start.
    """

    def __init__(self, rng: np.random.Generator, base_channels=BASE_CHANNELS,
                 encoding_dim=ENCODING_DIM, width=MLP_WIDTH, n_layers=MLP_LAYERS,
                 k=MIXTURE_COMPONENTS, prior=None):
        self.encoder = EncoderNet(rng, base_channels, encoding_dim)
        self.proposal = ProposalNet(rng, encoding_dim, width, n_layers, k)
        self.transition = TransitionNet(rng, width, n_layers, k)
        self.prior = prior

    def named_parameters(self) -> dict[str, Tensor]:
        return _collect("", {
            "proposal.encoder": self.encoder.params(),
            "proposal.head": self.proposal.params(),
            "transition.head": self.transition.params(),
        })

    def watch(self, tape) -> None:
        tape.watch(*self.named_parameters().values())

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        for name, p in params.items():
            if name not in arrays:
                raise KeyError(f"checkpoint missing parameter {name!r}")
            if arrays[name].shape != p.data.shape:
                raise ValueError(
                    f"checkpoint shape mismatch for {name!r}: "
                    f"{arrays[name].shape} vs {p.data.shape}"
                )
            p.data = arrays[name].astype(np.float64).copy()

    def initial_particles(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.prior is None:
            raise RuntimeError("DpfModel has no attractor prior attached")
        return self.prior.sample(n, rng)

    # particle-filter interface -------------------------------------------
    def propose(self, prev, obs, rng):
        enc = self.encoder.encode(obs.frame, obs.mask)
        params = self.proposal.propose_params(prev, enc)
        z, _ = gmm_sample(params, rng)
        log_q = gmm_log_pdf(params, z)
        return z, log_q

    def transition_log_pdf(self, prev, z):
        return gmm_log_pdf(self.transition.transition_params(prev), z)

    def log_likelihood(self, z, obs):
        return ssm.log_likelihood(z, obs.frame, obs.mask, obs.sigma_v)
