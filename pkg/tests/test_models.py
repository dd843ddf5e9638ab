import numpy as np
import pytest

from dvsmc import autodiff as ad
from dvsmc import models, ssm
from dvsmc.autodiff import Tape, Tensor, values
from dvsmc.distributions import gmm_log_pdf, gmm_sample
from dvsmc.models import (
    DpfModel,
    EncoderNet,
    ProposalNet,
    SupervisedEncoder,
    TransitionNet,
    split_raw_gmm,
)
from dvsmc.ssm import Observation

from oracles import central_diff_grad, rel_err


def _frame_and_mask(seed=0, sigma=0.1, p=1.0):
    rng = np.random.default_rng(seed)
    state = ssm.sample_initial_state(rng)
    clean = values(ssm.render(state))
    frame, mask = ssm.observe(clean, sigma, p, rng)
    return frame.reshape(-1), mask.reshape(-1), state


# ---------------------------------------------------------------------------
# encoder

def test_encoding_length_default_256():
    enc = EncoderNet(np.random.default_rng(0))
    frame, mask, _ = _frame_and_mask()
    out = enc.encode(frame, mask)
    assert out.shape == (256,)


def test_encoding_deterministic():
    enc = EncoderNet(np.random.default_rng(0), base_channels=2, encoding_dim=16)
    frame, mask, _ = _frame_and_mask()
    a = values(enc.encode(frame, mask))
    b = values(enc.encode(frame, mask))
    np.testing.assert_array_equal(a, b)


def test_zero_weight_encoder_outputs_zero():
    enc = EncoderNet(np.random.default_rng(0), base_channels=2, encoding_dim=8)
    for p in enc.params().values():
        p.data = np.zeros_like(p.data)
    frame, mask, _ = _frame_and_mask()
    np.testing.assert_array_equal(values(enc.encode(frame, mask)), np.zeros(8))


def test_encoder_rejects_wrong_size():
    enc = EncoderNet(np.random.default_rng(0), base_channels=2, encoding_dim=8)
    with pytest.raises(ValueError, match="28x28"):
        enc.encode_batch(np.zeros((1, 100)), np.zeros((1, 100)))


def test_encoder_batch_matches_single():
    enc = EncoderNet(np.random.default_rng(3), base_channels=2, encoding_dim=8)
    f1, m1, _ = _frame_and_mask(1)
    f2, m2, _ = _frame_and_mask(2)
    batch = values(enc.encode_batch(np.stack([f1, f2]), np.stack([m1, m2])))
    np.testing.assert_allclose(batch[0], values(enc.encode(f1, m1)), atol=1e-12)
    np.testing.assert_allclose(batch[1], values(enc.encode(f2, m2)), atol=1e-12)


# ---------------------------------------------------------------------------
# proposal / transition heads

def test_head_output_length_is_14_for_k2_d3():
    net = ProposalNet(np.random.default_rng(0), encoding_dim=16, width=16)
    assert net.mlp.layers[-1].weight.shape == (16, 14)
    tnet = TransitionNet(np.random.default_rng(0), width=16)
    assert tnet.mlp.layers[-1].weight.shape == (16, 14)


def test_zero_network_gives_equal_mixture_weights():
    net = ProposalNet(np.random.default_rng(0), encoding_dim=8, width=8)
    last = net.mlp.layers[-1]
    last.weight.data = np.zeros_like(last.weight.data)
    last.bias.data = np.zeros_like(last.bias.data)
    prev = np.random.default_rng(1).normal(size=(5, 3))
    params = net.propose_params(prev, Tensor(np.zeros(8)))
    logits = values(params.logits)
    np.testing.assert_array_equal(logits, np.zeros((5, 2)))
    # zeroed head: proposal is a unit-variance walk around prev
    np.testing.assert_allclose(values(params.means)[:, 0, :], prev, atol=1e-12)
    np.testing.assert_array_equal(values(params.log_vars), np.zeros((5, 2, 3)))


def test_fresh_head_starts_near_random_walk():
    net = ProposalNet(np.random.default_rng(0), encoding_dim=8, width=8)
    prev = np.random.default_rng(1).normal(size=(5, 3))
    params = net.propose_params(prev, Tensor(np.random.default_rng(2).normal(size=8)))
    # small-scale last-layer init: offsets and log-vars start close to zero
    assert np.max(np.abs(values(params.means) - prev[:, None, :])) < 0.5
    assert np.max(np.abs(values(params.log_vars))) < 0.5


def test_split_raw_gmm_roundtrip():
    rng = np.random.default_rng(4)
    raw = rng.normal(size=(6, 14))
    logits, offs, lvs = split_raw_gmm(Tensor(raw), k=2, d=3)
    rebuilt = np.concatenate(
        [values(logits), values(offs).reshape(6, 6), values(lvs).reshape(6, 6)], axis=1
    )
    np.testing.assert_array_equal(rebuilt, raw)


def test_split_raw_gmm_permutation_consistency():
    rng = np.random.default_rng(9)
    raw = rng.normal(size=(4, 14))
    # swap the two component slots in the raw layout
    perm = np.concatenate([
        [1, 0],                      # logits
        [5, 6, 7, 2, 3, 4],          # mean blocks
        [11, 12, 13, 8, 9, 10],      # log-var blocks
    ])
    swapped = raw[:, perm]
    l1, o1, v1 = split_raw_gmm(Tensor(raw), 2, 3)
    l2, o2, v2 = split_raw_gmm(Tensor(swapped), 2, 3)
    np.testing.assert_array_equal(values(l2), values(l1)[:, ::-1])
    np.testing.assert_array_equal(values(o2), values(o1)[:, ::-1, :])
    np.testing.assert_array_equal(values(v2), values(v1)[:, ::-1, :])


def test_transition_params_deterministic():
    net = TransitionNet(np.random.default_rng(2), width=8)
    prev = np.random.default_rng(0).normal(size=(3, 3))
    a = values(net.transition_params(prev).means)
    b = values(net.transition_params(prev).means)
    np.testing.assert_array_equal(a, b)


def test_log_var_clamped():
    net = TransitionNet(np.random.default_rng(2), width=8)
    # blow up the last layer to push raw log-vars out of range
    net.mlp.layers[-1].weight.data = np.full_like(net.mlp.layers[-1].weight.data, 50.0)
    net.mlp.layers[-1].bias.data = np.full_like(net.mlp.layers[-1].bias.data, 100.0)
    prev = np.random.default_rng(0).normal(size=(4, 3))
    lv = values(net.transition_params(prev).log_vars)
    assert lv.max() <= 4.0
    assert lv.min() >= -10.0


# ---------------------------------------------------------------------------
# supervised encoder

def test_supervised_output_shape_and_determinism():
    net = SupervisedEncoder(np.random.default_rng(0), base_channels=2,
                            encoding_dim=8, width=8)
    frame, mask, _ = _frame_and_mask()
    a = net.predict(frame, mask)
    b = net.predict(frame, mask)
    assert a.shape == (3,)
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# DPF model wiring

def _tiny_dpf(seed=0):
    return DpfModel(np.random.default_rng(seed), base_channels=2, encoding_dim=8,
                    width=8, n_layers=3, k=2)


def test_dpf_parameter_names_stable():
    dpf = _tiny_dpf()
    names = set(dpf.named_parameters())
    assert "proposal.encoder.conv1.weight" in names
    assert "proposal.head.mlp.l1.weight" in names
    assert "transition.head.mlp.l3.bias" in names


def test_dpf_checkpoint_roundtrip(tmp_path):
    from dvsmc.autodiff import load_checkpoint, save_checkpoint

    dpf = _tiny_dpf(1)
    path = tmp_path / "dpf.ckpt"
    save_checkpoint(path, dpf.named_parameters(), meta={"epoch": 0})
    dpf2 = _tiny_dpf(2)
    arrays, _ = load_checkpoint(path)
    dpf2.load_state(arrays)
    for name, p in dpf.named_parameters().items():
        np.testing.assert_array_equal(p.data, dpf2.named_parameters()[name].data)


def test_dpf_propose_shapes():
    dpf = _tiny_dpf()
    frame, mask, _ = _frame_and_mask()
    obs = Observation(frame, mask, 0.1)
    prev = np.random.default_rng(3).normal(size=(6, 3))
    z, log_q = dpf.propose(prev, obs, np.random.default_rng(0))
    assert values(z).shape == (6, 3)
    assert values(log_q).shape == (6,)
    ll = dpf.log_likelihood(z, obs)
    assert values(ll).shape == (6,)
    lp = dpf.transition_log_pdf(prev, z)
    assert values(lp).shape == (6,)


def test_end_to_end_gradient_matches_fd():
    # scalar loss through encode -> propose-params -> gmm-sample -> likelihood
    dpf = _tiny_dpf(7)
    frame, mask, _ = _frame_and_mask(5, sigma=0.2, p=0.8)
    obs = Observation(frame, mask, 0.2)
    prev = np.random.default_rng(11).normal(size=(4, 3)) * 3

    params = dpf.named_parameters()
    names = sorted(params)
    shapes = [params[n].data.shape for n in names]
    sizes = [int(np.prod(s)) for s in shapes]

    def set_flat(vec):
        at = 0
        for n, s, size in zip(names, shapes, sizes):
            params[n].data = vec[at: at + size].reshape(s).copy()
            at += size

    def get_flat():
        return np.concatenate([params[n].data.reshape(-1) for n in names])

    def loss_value(vec):
        set_flat(vec)
        rng = np.random.default_rng(23)
        z, log_q = dpf.propose(prev, obs, rng)
        ll = dpf.log_likelihood(z, obs)
        lp = dpf.transition_log_pdf(prev, z)
        out = ad.mean_(ad.sub(ad.add(ll, lp), log_q))
        return out

    base = get_flat()
    with Tape() as tape:
        tape.watch(*params.values())
        out = loss_value(base)
        tape.backward(out)
        g_ad = np.concatenate([
            (params[n].grad if params[n].grad is not None else np.zeros(shapes[i])).reshape(-1)
            for i, n in enumerate(names)
        ])
    g_fd = central_diff_grad(lambda v: float(values(loss_value(v))), base.copy(), eps=1e-5)
    set_flat(base)
    assert rel_err(g_ad, g_fd) < 1e-3
