import math

import numpy as np
import pytest

from dvsmc import autodiff as ad
from dvsmc import ssm
from dvsmc.autodiff import AdamW, Tape, values
from dvsmc.models import DpfModel
from dvsmc.smc import FilterConfig
from dvsmc.training import (
    SupervisedConfig,
    TrainConfig,
    TrainReport,
    train,
    train_supervised,
    vsmc_objective,
)

from toys import GuidedLgss1d


def _gauss_logpdf(x, mu, var):
    return -0.5 * ((x - mu) ** 2 / var + math.log(var) + math.log(2 * math.pi))


# ---------------------------------------------------------------------------
# objective

def test_objective_t1_n1_collapses_to_single_weight():
    model = GuidedLgss1d()
    config = FilterConfig(n_particles=1, resample_threshold=1.0)
    init = np.array([[0.4]])
    y = 0.9
    rng_seed = 13
    loss, per_seq = vsmc_objective([([y], init)], model, config,
                                   [np.random.default_rng(rng_seed)])

    # replay the single proposal draw by hand
    p = {k: float(values(v)) for k, v in model.params.items()}
    eps = np.random.default_rng(rng_seed).standard_normal((1, 1))[0, 0]
    mu = p["prop.gain"] * 0.4 + p["prop.obs_gain"] * y + p["prop.bias"]
    z = mu + math.exp(p["prop.log_var"] / 2) * eps
    lq = _gauss_logpdf(z, mu, math.exp(p["prop.log_var"]))
    lp = _gauss_logpdf(z, p["trans.gain"] * 0.4, math.exp(p["trans.log_var"]))
    ll = _gauss_logpdf(y, model.c * z, model.r)
    expected = ll + lp - lq
    assert abs(per_seq[0] - expected) < 1e-12
    assert abs(float(values(loss)) + expected) < 1e-12


def test_objective_identical_sequences_equal_mean():
    model = GuidedLgss1d()
    config = FilterConfig(n_particles=4, resample_threshold=1.0)
    init = np.random.default_rng(0).normal(size=(4, 1))
    seq = (np.array([0.3, -0.1]), init)
    loss3, per_seq = vsmc_objective(
        [seq, seq, seq], model, config,
        [np.random.default_rng(5) for _ in range(3)],
    )
    loss1, _ = vsmc_objective([seq], model, config, [np.random.default_rng(5)])
    assert per_seq[0] == per_seq[1] == per_seq[2]
    assert abs(float(values(loss3)) - float(values(loss1))) < 1e-12


def test_objective_two_particle_hand_oracle():
    model = GuidedLgss1d()
    config = FilterConfig(n_particles=2, resample_threshold=1.0)  # never resamples
    init = np.array([[0.2], [-0.5]])
    ys = [0.7, -0.3]
    seed = 31
    loss, _ = vsmc_objective([(ys, init)], model, config, [np.random.default_rng(seed)])

    p = {k: float(values(v)) for k, v in model.params.items()}
    rng = np.random.default_rng(seed)
    z_prev = init[:, 0].copy()
    carried = np.zeros(2)
    total = 0.0
    for y in ys:
        eps = rng.standard_normal((2, 1))[:, 0]
        mu = p["prop.gain"] * z_prev + p["prop.obs_gain"] * y + p["prop.bias"]
        z = mu + math.exp(p["prop.log_var"] / 2) * eps
        lq = _gauss_logpdf(z, mu, math.exp(p["prop.log_var"]))
        lp = _gauss_logpdf(z, p["trans.gain"] * z_prev, math.exp(p["trans.log_var"]))
        ll = _gauss_logpdf(y, model.c * z, model.r)
        lw = carried + ll + lp - lq
        m = lw.max()
        lse = m + math.log(np.exp(lw - m).sum())
        total += lse - math.log(2)
        carried = lw - lse + math.log(2)
        z_prev = z
    assert abs(float(values(loss)) + total) < 1e-10


def test_objective_invariant_to_batch_order():
    model = GuidedLgss1d()
    config = FilterConfig(n_particles=4, resample_threshold=1.0)
    rng = np.random.default_rng(3)
    seqs = [(rng.normal(size=2), rng.normal(size=(4, 1))) for _ in range(3)]
    rngs = [np.random.default_rng([9, i]) for i in range(3)]
    _, fwd = vsmc_objective(seqs, model, config, rngs)
    _, rev = vsmc_objective(seqs[::-1], model, config,
                            [np.random.default_rng([9, i]) for i in (2, 1, 0)])
    np.testing.assert_array_equal(np.sort(fwd), np.sort(rev))
    assert abs(np.mean(fwd) - np.mean(rev)) < 1e-12


def test_toy_training_increases_objective():
    # plain gradient ascent on the evidence bound for the guided toy model
    model = GuidedLgss1d(gain=0.2, obs_gain=0.0, bias=0.0, log_var=0.5)
    config = FilterConfig(n_particles=8, resampler="ot", resample_threshold=4.0,
                          sinkhorn_tol=1e-6)
    data_rng = np.random.default_rng(7)
    true = GuidedLgss1d()
    seqs = []
    for _ in range(4):
        z = data_rng.normal()
        ys = []
        for _ in range(6):
            z = 0.9 * z + data_rng.normal() * math.sqrt(0.5)
            ys.append(1.0 * z + data_rng.normal() * math.sqrt(0.4))
        seqs.append((np.array(ys), data_rng.normal(size=(8, 1))))

    opt = AdamW(model.params, lr=0.02, weight_decay=0.0)

    def objective(epoch):
        rngs = [np.random.default_rng([11, epoch, i]) for i in range(len(seqs))]
        with Tape() as tape:
            tape.watch(*model.params.values())
            loss, per_seq = vsmc_objective(seqs, model, config, rngs)
            tape.backward(loss)
        return float(np.mean(per_seq))

    first = np.mean([objective(e) for e in range(3)])
    for p in model.params.values():
        p.grad = None
    for epoch in range(50):
        opt.zero_grad()
        objective(epoch)
        opt.step()
    opt.zero_grad()
    last = np.mean([objective(1000 + e) for e in range(3)])
    assert last > first, (first, last)


# ---------------------------------------------------------------------------
# curriculum and config validation

def test_default_curriculum_thirds():
    c = TrainConfig(epochs=9)
    assert c.sequence_length(0) == 2
    assert c.sequence_length(2) == 2
    assert c.sequence_length(3) == 4
    assert c.sequence_length(5) == 4
    assert c.sequence_length(6) == 8
    assert c.sequence_length(8) == 8


def test_curriculum_must_be_non_decreasing():
    with pytest.raises(ValueError, match="non-decreasing"):
        TrainConfig(epochs=4, curriculum=[(0, 8), (2, 4)])


def test_batch_size_must_divide_dataset():
    dataset = ssm.generate_dataset(6, 2, 0.1, 1.0, seed=0)
    model = _tiny_dpf()
    with pytest.raises(ValueError, match="divide"):
        train(dataset, model, TrainConfig(epochs=1, batch_size=4, n_particles=4))


# ---------------------------------------------------------------------------
# image-pipeline training at tiny scale

def _tiny_dpf(seed=0):
    from dvsmc.evaluation import build_attractor_prior

    prior = build_attractor_prior(n_steps=10_000, burn_in=200, max_points=256)
    return DpfModel(np.random.default_rng(seed), base_channels=2, encoding_dim=16,
                    width=16, n_layers=3, k=2, prior=prior)


def _tiny_config(**kw):
    defaults = dict(epochs=1, batch_size=2, n_particles=6, seed=0,
                    curriculum=[(0, 2)], sinkhorn_max_iters=30)
    defaults.update(kw)
    return TrainConfig(**defaults)


def test_zero_epochs_leaves_parameters_unchanged():
    dataset = ssm.generate_dataset(2, 2, 0.1, 1.0, seed=1)
    model = _tiny_dpf()
    before = {k: p.data.copy() for k, p in model.named_parameters().items()}
    report = train(dataset, model, _tiny_config(epochs=0))
    for k, p in model.named_parameters().items():
        np.testing.assert_array_equal(p.data, before[k])
    assert report.epochs == []


def test_gradients_finite_at_initialization():
    dataset = ssm.generate_dataset(2, 2, 0.1, 1.0, seed=2)
    model = _tiny_dpf(3)
    config = _tiny_config()
    fc = config.filter_config()
    rng = np.random.default_rng(0)
    obs = dataset.observations(0, limit=2)
    init = model.initial_particles(config.n_particles, rng)
    with Tape() as tape:
        model.watch(tape)
        from dvsmc.smc import run_filter

        trace = run_filter(obs, model, fc, rng, init)
        tape.backward(trace.log_evidence_tensor)
    for name, p in model.named_parameters().items():
        assert p.grad is not None and np.all(np.isfinite(p.grad)), name


def test_train_runs_and_is_deterministic():
    dataset = ssm.generate_dataset(4, 2, 0.1, 1.0, seed=3)

    def run():
        model = _tiny_dpf(5)
        report = train(dataset, model, _tiny_config(epochs=2))
        return report, {k: p.data.copy() for k, p in model.named_parameters().items()}

    r1, params1 = run()
    r2, params2 = run()
    assert r1.objectives == r2.objectives
    assert len(r1.epochs) == 2
    for k in params1:
        np.testing.assert_array_equal(params1[k], params2[k])


def test_train_report_csv(tmp_path):
    report = TrainReport()
    report.append(0, -1.5, 2.0, 0.1, 3.0)
    report.append(1, -1.2, 1.5, 0.1, 2.5)
    path = tmp_path / "report.csv"
    report.to_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "epoch,objective,grad_norm,wall_clock_s,val_error"
    assert len(lines) == 3


def test_supervised_training_reduces_loss():
    dataset = ssm.generate_dataset(8, 4, 0.1, 1.0, seed=4)
    from dvsmc.models import SupervisedEncoder

    net = SupervisedEncoder(np.random.default_rng(0), base_channels=2,
                            encoding_dim=16, width=16, n_layers=3)
    report = train_supervised(dataset, net, SupervisedConfig(epochs=8, batch_size=16,
                                                             seed=0))
    assert report.objectives[-1] < report.objectives[0]
