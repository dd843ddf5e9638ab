"""Variational training: maximize the filter's log-marginal-likelihood estimate.

The objective for a batch of sequences is the mean cumulative log-evidence
of the differentiable filter (optimal-transport resampling), negated for
minimization.  Proposal and transition parameters are updated jointly by
one AdamW instance.  Sequence length follows a curriculum, lengthening at
epoch boundaries, which keeps early log-likelihoods from underflowing.

Every sequence owns the rng stream ``default_rng([seed, epoch, seq_index])``
so the objective is invariant to batch order and runs reproduce bit-exactly.
Gradients accumulate over per-sequence tapes in index order.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamW, AutodiffError, Tape, values
from .smc import FilterConfig, run_filter
from .ssm import Dataset


class TrainingDiverged(RuntimeError):
    """Objective went non-finite; training aborted with last-good state."""


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    n_particles: int = 28
    sinkhorn_eps: float = 0.5
    sinkhorn_max_iters: int = 100
    sinkhorn_tol: float = 1e-6
    # list of (first_epoch, sequence_length); defaults to 2/4/8 at thirds
    curriculum: list | None = None
    # per-sequence global-norm gradient clip; the pathwise gradient through
    # the sharply peaked image likelihood is heavy-tailed, and unclipped
    # spikes poison the optimizer's second-moment estimate
    max_grad_norm: float = 50.0
    seed: int = 0
    val_sequences: int = 4
    val_steps: int = 32

    def __post_init__(self):
        if self.curriculum is None:
            e = self.epochs
            self.curriculum = [(0, 2), (math.ceil(e / 3), 4), (math.ceil(2 * e / 3), 8)]
        lengths = [t for _, t in self.curriculum]
        if any(b > a for a, b in zip(lengths[1:], lengths)):
            raise ValueError(f"curriculum lengths must be non-decreasing: {lengths}")

    def sequence_length(self, epoch: int) -> int:
        t = self.curriculum[0][1]
        for start, length in self.curriculum:
            if epoch >= start:
                t = length
        return t

    def filter_config(self) -> FilterConfig:
        return FilterConfig(
            n_particles=self.n_particles,
            resampler="ot",
            sinkhorn_eps=self.sinkhorn_eps,
            sinkhorn_max_iters=self.sinkhorn_max_iters,
            sinkhorn_tol=self.sinkhorn_tol,
        )


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    objectives: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)
    val_errors: list = field(default_factory=list)
    aborted: bool = False

    def append(self, epoch, objective, grad_norm, wall, val_error):
        self.epochs.append(epoch)
        self.objectives.append(objective)
        self.grad_norms.append(grad_norm)
        self.wall_clock.append(wall)
        self.val_errors.append(val_error)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "objective", "grad_norm", "wall_clock_s", "val_error"])
            for row in zip(self.epochs, self.objectives, self.grad_norms,
                           self.wall_clock, self.val_errors):
                writer.writerow([row[0], repr(row[1]), repr(row[2]), f"{row[3]:.3f}",
                                 repr(row[4])])


def vsmc_objective(sequences, model, filter_config: FilterConfig, rngs):
    """Negated mean cumulative log-evidence over a batch (tape-aware).

    ``sequences`` is a list of ``(observations, init_particles)`` pairs and
    ``rngs`` one generator per sequence.  Returns ``(loss, per_sequence)``
    where ``loss`` is a scalar Tensor and ``per_sequence`` the plain
    log-evidence values.
    """
    if len(sequences) != len(rngs):
        raise ValueError("need exactly one rng per sequence")
    totals = None
    per_seq = []
    for (obs, init), rng in zip(sequences, rngs):
        trace = run_filter(obs, model, filter_config, rng, init)
        if not math.isfinite(trace.log_evidence):
            raise TrainingDiverged(
                f"non-finite log-evidence for sequence {len(per_seq)}"
            )
        per_seq.append(trace.log_evidence)
        t = trace.log_evidence_tensor
        totals = t if totals is None else ad.add(totals, t)
    loss = ad.mul(totals, -1.0 / len(sequences))
    return loss, per_seq


def _sequence_rng(seed: int, epoch: int, seq_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, int(seq_index)])


def _grad_norm(params) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


def _clip_sequence_gradient(params, fresh: dict, max_norm: float) -> None:
    """Clip one sequence's gradient contribution and fold it into ``fresh``.

    ``params[...].grad`` holds the just-backpropagated per-sequence gradient;
    after clipping to ``max_norm`` (global norm) it is added to ``fresh`` and
    the parameter grads are cleared for the next sequence.
    """
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = math.sqrt(total)
    scale = 1.0 if max_norm <= 0 or norm <= max_norm else max_norm / norm
    for name, p in params.items():
        if p.grad is not None:
            fresh[name] += scale * p.grad
            p.grad = None
    return norm


def _validation_error(model, dataset: Dataset, config: TrainConfig) -> float:
    """Mean tracking error on a few held-out sequences, inference mode."""
    from .evaluation import tracking_error  # local import to avoid a cycle

    fc = FilterConfig(n_particles=config.n_particles, resampler="systematic")
    count = min(config.val_sequences, dataset.count)
    errs = []
    for i in range(count):
        rng = np.random.default_rng([config.seed, 977, i])
        obs = dataset.observations(i, limit=config.val_steps)
        init = model.initial_particles(config.n_particles, rng)
        trace = run_filter(obs, model, fc, rng, init)
        truth = dataset.states[i, 1 : len(obs) + 1]
        errs.append(tracking_error(trace, truth).mean())
    return float(np.mean(errs))


def train(dataset: Dataset, model, config: TrainConfig,
          val_dataset: Dataset | None = None,
          progress: bool = False) -> TrainReport:
    """Train proposal and transition networks on ``dataset``.

    Mutates ``model`` parameters in place and returns the per-epoch report.
    On divergence (non-finite objective or gradients) the parameters are
    restored to the last epoch that finished cleanly and the report is
    marked aborted.
    """
    if dataset.count % config.batch_size != 0:
        raise ValueError(
            f"batch size {config.batch_size} must divide dataset size {dataset.count}"
        )
    params = model.named_parameters()
    opt = AdamW(params, lr=config.learning_rate, betas=config.betas,
                weight_decay=config.weight_decay)
    report = TrainReport()
    fc = config.filter_config()
    last_good = {name: p.data.copy() for name, p in params.items()}

    for epoch in range(config.epochs):
        start = time.perf_counter()
        t_cur = min(config.sequence_length(epoch), dataset.n_steps)
        order = np.random.default_rng([config.seed, 31, epoch]).permutation(dataset.count)
        epoch_logevs = []
        grad_norm = 0.0
        try:
            for b0 in range(0, dataset.count, config.batch_size):
                batch = order[b0 : b0 + config.batch_size]
                opt.zero_grad()
                accum = {name: np.zeros_like(p.data) for name, p in params.items()}
                for seq_idx in batch:
                    rng = _sequence_rng(config.seed, epoch, seq_idx)
                    obs = dataset.observations(seq_idx, limit=t_cur)
                    init = model.initial_particles(config.n_particles, rng)
                    with Tape() as tape:
                        model.watch(tape)
                        trace = run_filter(obs, model, fc, rng, init)
                        if not math.isfinite(trace.log_evidence):
                            raise TrainingDiverged(
                                f"non-finite log-evidence at epoch {epoch}, "
                                f"sequence {seq_idx}"
                            )
                        tape.backward(ad.mul(trace.log_evidence_tensor, -1.0))
                    _clip_sequence_gradient(params, accum, config.max_grad_norm)
                    epoch_logevs.append(trace.log_evidence)
                inv_b = 1.0 / len(batch)
                for name, p in params.items():
                    p.grad = accum[name] * inv_b
                grad_norm = _grad_norm(params)
                opt.step()
        except (TrainingDiverged, AutodiffError) as exc:
            for name, p in params.items():
                p.data = last_good[name]
            report.aborted = True
            report.append(epoch, float("nan"), grad_norm,
                          time.perf_counter() - start, float("nan"))
            if progress:
                print(f"epoch {epoch}: diverged ({exc}); restored last-good parameters")
            break

        objective = float(np.mean(epoch_logevs))
        val_err = (
            _validation_error(model, val_dataset, config)
            if val_dataset is not None
            else float("nan")
        )
        last_good = {name: p.data.copy() for name, p in params.items()}
        report.append(epoch, objective, grad_norm, time.perf_counter() - start, val_err)
        if progress:
            print(
                f"epoch {epoch}: T={t_cur} objective={objective:.3f} "
                f"grad_norm={grad_norm:.3f} val={val_err:.3f}"
            )
    return report


def save_train_checkpoint(path, model, opt: AdamW | None, meta: dict) -> None:
    arrays = {name: p for name, p in model.named_parameters().items()}
    if opt is not None:
        arrays.update(opt.state_arrays())
    ad.save_checkpoint(path, arrays, meta)


# ---------------------------------------------------------------------------
# supervised baseline training

@dataclass
class SupervisedConfig:
    epochs: int = 30
    batch_size: int = 256
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0


def train_supervised(dataset: Dataset, net, config: SupervisedConfig,
                     progress: bool = False) -> TrainReport:
    """Fit the regression encoder with the Euclidean-distance loss."""
    frames = dataset.frames.reshape(-1, dataset.frames.shape[-1])
    masks = dataset.masks.reshape(-1, dataset.masks.shape[-1])
    truth = dataset.states[:, 1:, :].reshape(-1, 3)
    n = frames.shape[0]
    params = net.named_parameters()
    opt = AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    report = TrainReport()

    for epoch in range(config.epochs):
        start = time.perf_counter()
        order = np.random.default_rng([config.seed, 57, epoch]).permutation(n)
        losses = []
        grad_norm = 0.0
        for b0 in range(0, n, config.batch_size):
            idx = order[b0 : b0 + config.batch_size]
            opt.zero_grad()
            with Tape() as tape:
                tape.watch(*params.values())
                pred = net.predict_batch(frames[idx], masks[idx])
                diff = ad.sub(pred, truth[idx])
                # small floor keeps sqrt differentiable at a perfect fit
                dist = ad.sqrt(ad.add(ad.sum_(ad.square(diff), axis=1), 1e-12))
                loss = ad.mean_(dist)
                tape.backward(loss)
            losses.append(float(values(loss)))
            grad_norm = _grad_norm(params)
            opt.step()
        report.append(epoch, float(np.mean(losses)), grad_norm,
                      time.perf_counter() - start, float("nan"))
        if progress:
            print(f"supervised epoch {epoch}: loss={np.mean(losses):.4f}")
    return report
