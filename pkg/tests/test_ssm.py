import math

import numpy as np
import pytest
from scipy import integrate

from dvsmc import autodiff as ad
from dvsmc import ssm
from dvsmc.autodiff import Tape, Tensor
from dvsmc.ssm import (
    Dataset,
    SimulationError,
    generate_dataset,
    log_likelihood,
    lorenz_step,
    observe,
    render,
    render_with_jacobian,
    sample_initial_state,
    simulate_noise_free,
)

from oracles import central_diff_grad, rel_err


# ---------------------------------------------------------------------------
# dynamics

def test_origin_is_fixed_point():
    out = lorenz_step(np.zeros(3), rng=None, sigma_e=0.0)
    np.testing.assert_array_equal(out, np.zeros(3))


def test_c_plus_fixed_point():
    c = math.sqrt(72.0)
    state = np.array([c, c, 27.0])  # beta * (rho - 1) = 72
    out = lorenz_step(state, rng=None, sigma_e=0.0)
    assert np.max(np.abs(out - state)) < 1e-6


def test_step_deterministic_under_seed():
    s = np.array([1.0, 2.0, 3.0])
    a = lorenz_step(s, rng=np.random.default_rng(5))
    b = lorenz_step(s, rng=np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)


def test_nonfinite_state_rejected():
    with pytest.raises(SimulationError, match="non-finite"):
        lorenz_step(np.array([np.nan, 0.0, 0.0]))


def test_attractor_stays_in_box():
    rng = np.random.default_rng(0)
    state = sample_initial_state(rng)
    path = simulate_noise_free(state, 10_000)
    assert np.all(np.abs(path[:, 0]) <= 25.0)
    assert np.all(np.abs(path[:, 1]) <= 25.0)
    assert np.all(path[:, 2] >= 0.0)
    assert np.all(path[:, 2] <= 50.0)


def test_rk4_accuracy_against_fine_integration():
    # one dt=0.02 step vs 100 sub-steps of dt=0.0002
    s = np.array([2.0, 3.0, 15.0])
    coarse = lorenz_step(s, rng=None, sigma_e=0.0)
    fine = s.copy()
    for _ in range(100):
        fine = ssm.rk4_step(fine, ssm.DT / 100)
    assert np.max(np.abs(coarse - fine)) < 1e-5


# ---------------------------------------------------------------------------
# rendering

def test_blob_peak_at_projected_center():
    # state that lands exactly on pixel (14, 14)
    x = 14.0 / ssm._PIX_SCALE - ssm.BOX_HALF
    img = ad.values(render(np.array([x, x, 10.0])))
    peak = np.unravel_index(np.argmax(img), img.shape)
    assert peak == (14, 14)
    assert abs(img[peak] - ssm.PSF_AMPLITUDE) < 1e-12


def test_render_deterministic():
    s = np.array([3.0, -4.0, 20.0])
    a = ad.values(render(s))
    b = ad.values(render(s))
    np.testing.assert_array_equal(a, b)


def test_blob_mass_matches_truncated_gaussian_integral():
    s = np.array([1.0, -2.0, 20.0])  # interior blob
    img = ad.values(render(s))
    center = (s[:2] + ssm.BOX_HALF) * ssm._PIX_SCALE
    lo, hi = -0.5, ssm.IMG_SIZE - 0.5
    expected, _ = integrate.dblquad(
        lambda yy, xx: ssm.PSF_AMPLITUDE
        * math.exp(-((xx - center[0]) ** 2 + (yy - center[1]) ** 2) / (2 * ssm.PSF_SIGMA**2)),
        lo, hi, lambda _: lo, lambda _: hi,
    )
    assert abs(img.sum() - expected) < 1e-3


def test_far_state_clamps_to_border():
    img = ad.values(render(np.array([1e4, -1e4, 0.0])))
    assert np.all(np.isfinite(img))
    assert img.max() < 0.2  # blob pushed just outside the grid


def test_render_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    for _ in range(5):
        s = rng.uniform(-15, 15, size=3)
        w = rng.normal(size=(28, 28))

        def f(t):
            return ad.sum_(ad.mul(render(t), w))

        with Tape() as tape:
            st = Tensor(s.copy())
            tape.watch(st)
            tape.backward(f(st))
            g_ad = st.grad
        g_fd = central_diff_grad(lambda a: float(ad.values(f(Tensor(a)))), s.copy())
        assert rel_err(g_ad, g_fd) < 1e-4


def test_render_jacobian_matches_finite_differences():
    rng = np.random.default_rng(4)
    for _ in range(3):
        s = rng.uniform(-12, 12, size=3)
        img, jac = render_with_jacobian(s)
        np.testing.assert_allclose(img, ad.values(render(s)).reshape(-1), atol=1e-14)
        for d in range(3):
            def f(v, d=d):
                sv = s.copy()
                sv[d] = v[0]
                return ad.values(render(sv)).reshape(-1)

            eps = 1e-6
            up, dn = f(np.array([s[d] + eps])), f(np.array([s[d] - eps]))
            fd = (up - dn) / (2 * eps)
            assert np.max(np.abs(jac[:, d] - fd)) < 1e-6


def test_jacobian_z_column_zero():
    _, jac = render_with_jacobian(np.array([0.5, 0.5, 30.0]))
    np.testing.assert_array_equal(jac[:, 2], 0.0)


# ---------------------------------------------------------------------------
# observation

def test_observe_identity_when_noiseless_full():
    rng = np.random.default_rng(0)
    clean = ad.values(render(np.array([1.0, 1.0, 10.0])))
    frame, mask = observe(clean, sigma_v=0.0, observe_p=1.0, rng=rng)
    np.testing.assert_array_equal(frame, clean)
    assert mask.all()


def test_observe_p_zero_all_masked():
    rng = np.random.default_rng(0)
    frame, mask = observe(np.ones((28, 28)), sigma_v=0.1, observe_p=0.0, rng=rng)
    assert not mask.any()
    np.testing.assert_array_equal(frame, 0.0)


def test_observe_block_structure():
    rng = np.random.default_rng(8)
    _, mask = observe(np.ones((28, 28)), 0.0, 0.5, rng)
    blocks = mask.reshape(7, 4, 7, 4)
    for bi in range(7):
        for bj in range(7):
            block = blocks[bi, :, bj, :]
            assert block.all() or not block.any()


def test_observe_block_fraction_binomial():
    rng = np.random.default_rng(3)
    total_blocks = 0
    kept = 0
    trials = 10**5 // 49 + 1
    for _ in range(trials):
        _, mask = observe(np.zeros((28, 28)), 0.0, 0.5, rng)
        blocks = mask.reshape(7, 4, 7, 4)[:, 0, :, 0]
        kept += blocks.sum()
        total_blocks += 49
    p_hat = kept / total_blocks
    sd = math.sqrt(0.5 * 0.5 / total_blocks)
    assert abs(p_hat - 0.5) < 3 * sd


# ---------------------------------------------------------------------------
# log-likelihood

def test_loglik_zero_residual():
    s = np.array([2.0, -1.0, 15.0])
    frame = ad.values(render(s))
    mask = np.ones((28, 28), dtype=bool)
    sigma_v = 0.3
    out = log_likelihood(s, frame, mask, sigma_v)
    expected = 784 * (-math.log(sigma_v * math.sqrt(2 * math.pi)))
    assert abs(out.item() - expected) < 1e-9


def test_loglik_empty_mask_is_zero():
    out = log_likelihood(np.zeros(3), np.zeros((28, 28)), np.zeros((28, 28), bool), 0.1)
    assert out.item() == 0.0


def test_loglik_matches_scalar_oracle():
    rng = np.random.default_rng(12)
    s = rng.uniform(-10, 10, size=3)
    frame = rng.normal(size=(28, 28))
    mask = rng.random((28, 28)) < 0.6
    sigma_v = 0.25
    out = log_likelihood(s, frame, mask, sigma_v)

    img = ad.values(render(s))
    total = 0.0
    for r in range(28):
        for c in range(28):
            if mask[r, c]:
                resid = frame[r, c] - img[r, c]
                total += -0.5 * (resid / sigma_v) ** 2 - math.log(
                    sigma_v * math.sqrt(2 * math.pi)
                )
    assert abs(out.item() - total) < 1e-9


def test_loglik_batched_matches_single():
    rng = np.random.default_rng(9)
    particles = rng.uniform(-10, 10, size=(5, 3))
    frame = rng.normal(size=(28, 28))
    mask = rng.random((28, 28)) < 0.8
    batch = ad.values(log_likelihood(particles, frame, mask, 0.2))
    for i in range(5):
        single = log_likelihood(particles[i], frame, mask, 0.2).item()
        assert abs(batch[i] - single) < 1e-10


# ---------------------------------------------------------------------------
# datasets

def test_generate_dataset_shapes_and_determinism(tmp_path):
    d1 = generate_dataset(3, 4, sigma_v=0.2, observe_p=1.0, seed=11)
    d2 = generate_dataset(3, 4, sigma_v=0.2, observe_p=1.0, seed=11)
    assert d1.states.shape == (3, 5, 3)
    assert d1.frames.shape == (3, 4, 784)
    p1, p2 = tmp_path / "a.ds", tmp_path / "b.ds"
    d1.save(p1)
    d2.save(p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_dataset_roundtrip(tmp_path):
    d = generate_dataset(2, 3, sigma_v=(0.1, 0.6), observe_p=1.0, seed=7)
    path = tmp_path / "data.ds"
    d.save(path)
    back = Dataset.load(path)
    np.testing.assert_array_equal(back.states, d.states)
    np.testing.assert_array_equal(back.frames, d.frames)
    np.testing.assert_array_equal(back.masks, d.masks)
    np.testing.assert_array_equal(back.sigma_v, d.sigma_v)
    assert back.seed == d.seed


def test_dataset_noise_settings_per_trajectory():
    d = generate_dataset(16, 2, sigma_v=(0.1, 0.6), observe_p=[0.4, 0.8], seed=3)
    assert np.all((d.sigma_v >= 0.1) & (d.sigma_v <= 0.6))
    assert len(np.unique(d.sigma_v)) > 1
    assert set(np.unique(d.observe_p)) <= {0.4, 0.8}


def test_states_satisfy_recorded_dynamics():
    # re-running the recorded rng stream reproduces the stored states
    d = generate_dataset(2, 3, sigma_v=0.1, observe_p=1.0, seed=19)
    for i in range(2):
        rng = np.random.default_rng([19, i])
        _ = ssm._resolve_setting(0.1, rng)
        _ = ssm._resolve_setting(1.0, rng)
        state = sample_initial_state(rng)
        np.testing.assert_array_equal(state, d.states[i, 0])
        for t in range(3):
            state = lorenz_step(state, d.dt, rng, d.sigma_e)
            np.testing.assert_array_equal(state, d.states[i, t + 1])


def test_regenerate_observations_changes_noise_not_states():
    d = generate_dataset(2, 3, sigma_v=0.3, observe_p=0.6, seed=23)
    r = d.regenerate_observations(seed=99)
    np.testing.assert_array_equal(r.states, d.states)
    assert not np.array_equal(r.frames, d.frames)
    r2 = d.regenerate_observations(seed=99)
    np.testing.assert_array_equal(r.frames, r2.frames)


def test_regenerate_observations_override_condition():
    d = generate_dataset(2, 2, sigma_v=0.3, observe_p=1.0, seed=5)
    r = d.regenerate_observations(seed=1, sigma_v=0.5, observe_p=0.4)
    assert np.all(r.sigma_v == 0.5)
    assert np.all(r.observe_p == 0.4)
    assert r.masks.mean() < 0.9
