"""Schedules, forward/reverse kernels, and the closed-form denoiser.

Derived expected values were computed with the independent oracles in
dmemm.oracle (iterative reverse denoising, Monte-Carlo variance) and frozen
here at full precision.
"""

import numpy as np
import pytest

from dmemm.diffusion import (
    EMBED_DIM,
    NoiseNet,
    accumulated_variance,
    denoised_estimate,
    denoised_estimate_batch,
    denoised_estimate_pullback,
    denoised_mean_from_iterates,
    forward_diffuse,
    forward_kernel_step,
    make_noise_net,
    make_schedule,
    reverse_mean,
    reverse_step,
)
from dmemm.errors import ConfigError, ShapeError, StepRangeError
from dmemm.nn import clone_net, net_init
from dmemm.oracle import finite_diff, iterative_denoise, mc_reverse_variance, rel_err

from conftest import constant_noise_net, rng_for, tiny_noise_net

# denoised_estimate with the all-ones net on the K=2 linear schedule
# (beta = [0.1, 0.2]), tau0 = 1, eps = 0, k = 2; equals the iterative
# reverse oracle and the hand expression 1 - (0.1/0.3 + 0.2/sqrt(0.2016)).
ONES_NET_DENOISED_K2 = 0.22123126347929284


def ones_noise_net(horizon, traj_dim, n_steps, value=1.0):
    net = net_init([horizon * traj_dim + EMBED_DIM, 4, horizon * traj_dim],
                   activation="tanh", precision="f64", seed=0)
    for w in net.weights:
        w[:] = 0.0
    net.biases[0][:] = 0.0
    net.biases[1][:] = value
    return NoiseNet(net=net, horizon=horizon, traj_dim=traj_dim, n_steps=n_steps)


def zero_noise_net(horizon, traj_dim, n_steps):
    return ones_noise_net(horizon, traj_dim, n_steps, value=0.0)


def test_linear_schedule_k2(sched_k2):
    assert np.allclose(sched_k2.betas, [0.1, 0.2], atol=1e-15)
    assert np.allclose(sched_k2.alphas, [0.9, 0.8], atol=1e-15)
    assert np.allclose(sched_k2.alpha_bars, [0.9, 0.72], atol=1e-15)
    assert np.array_equal(sched_k2.sigma2, sched_k2.betas)


def test_schedule_k1():
    sched = make_schedule("linear", 1, 0.5, 0.5)
    assert sched.alpha_bars[0] == 0.5
    assert sched.sigma2[0] == 0.5


@pytest.mark.parametrize("kind,n", [("linear", 16), ("cosine", 16), ("cosine", 100)])
def test_alpha_bar_strictly_decreasing(kind, n):
    sched = make_schedule(kind, n, 1e-4, 0.02)
    assert np.all(np.diff(sched.alpha_bars) < 0)
    assert np.all(sched.betas > 0) and np.all(sched.betas <= 0.999)
    assert np.all(sched.sigma2 > 0)


def test_schedule_rejects_bad_bounds():
    for args in [("linear", 0, 0.1, 0.2), ("linear", 2, 0.0, 0.2),
                 ("linear", 2, 0.3, 0.2), ("linear", 2, 0.1, 1.0),
                 ("triangle", 2, 0.1, 0.2)]:
        with pytest.raises(ConfigError):
            make_schedule(*args)


def test_step_range_checked(sched_k2):
    nnet = zero_noise_net(2, 1, 2)
    tau = np.zeros((2, 1))
    for k in (0, 3, -1):
        with pytest.raises(StepRangeError):
            forward_diffuse(sched_k2, tau, k, tau)
        with pytest.raises(StepRangeError):
            reverse_mean(sched_k2, nnet, tau, k)
        with pytest.raises(StepRangeError):
            accumulated_variance(sched_k2, k)


def test_forward_examples(sched_k2):
    tau0 = np.ones((2, 1))
    out = forward_diffuse(sched_k2, tau0, 2, np.zeros((2, 1)))
    assert np.allclose(out, np.sqrt(0.72), atol=1e-15)
    out = forward_diffuse(sched_k2, tau0, 1, np.ones((2, 1)))
    assert np.allclose(out, np.sqrt(0.9) + np.sqrt(0.1), atol=1e-15)


def test_forward_limit_is_noise():
    sched = make_schedule("cosine", 100, 1e-4, 0.02)
    tau0 = np.full((3, 2), 5.0)
    eps = rng_for(8).standard_normal((3, 2))
    out = forward_diffuse(sched, tau0, 100, eps)
    assert np.max(np.abs(out - eps)) < 0.05 * np.max(np.abs(tau0))


def test_forward_shape_error(sched_k2):
    with pytest.raises(ShapeError):
        forward_diffuse(sched_k2, np.zeros((2, 1)), 1, np.zeros((3, 1)))


def test_reverse_mean_zero_net(sched_k2):
    nnet = zero_noise_net(2, 1, 2)
    mu = reverse_mean(sched_k2, nnet, np.ones((2, 1)), 2)
    assert np.allclose(mu, 1.0 / np.sqrt(0.8), atol=1e-15)


def test_reverse_mean_ones_net(sched_k2):
    nnet = ones_noise_net(2, 1, 2)
    mu = reverse_mean(sched_k2, nnet, np.ones((2, 1)), 1)
    expected = (1.0 - 0.1 / np.sqrt(0.1)) / np.sqrt(0.9)
    assert np.allclose(mu, expected, atol=1e-15)


def test_reverse_mean_linear_net_is_linear(sched_k2):
    nnet = tiny_noise_net(2, 2, 2, seed=3, hidden=())
    nnet.net.weights[0][:, 4:] = 0.0
    nnet.net.biases[0][:] = 0.0
    a = rng_for(1).standard_normal((2, 2))
    b = rng_for(2).standard_normal((2, 2))
    mua = reverse_mean(sched_k2, nnet, a, 2)
    mub = reverse_mean(sched_k2, nnet, b, 2)
    muab = reverse_mean(sched_k2, nnet, a + b, 2)
    # affine-with-zero-bias net makes mu additive up to rounding
    assert np.allclose(muab, mua + mub, atol=1e-12)


def test_reverse_step_modes(sched_k2):
    nnet = tiny_noise_net(2, 1, 2, seed=4)
    tau = rng_for(4).standard_normal((2, 1))
    mu = reverse_mean(sched_k2, nnet, tau, 2)
    assert np.array_equal(reverse_step(sched_k2, nnet, tau, 2), mu)
    z = rng_for(5).standard_normal((2, 1))
    a = reverse_step(sched_k2, nnet, tau, 2, z)
    b = reverse_step(sched_k2, nnet, tau, 2, z)
    assert np.array_equal(a, b)
    assert np.allclose(a, mu + np.sqrt(0.2) * z, atol=1e-15)


def test_reverse_step_empirical_variance(sched_k2):
    """Sample variance over 1e5 draws matches sigma_2^2 = 0.2 within 3%."""
    nnet = tiny_noise_net(2, 1, 2, seed=6)
    tau = np.ones((2, 1))
    rng = rng_for(6, 1)
    draws = np.stack([
        reverse_step(sched_k2, nnet, tau, 2, rng.standard_normal((2, 1)))
        for _ in range(100_000)
    ])
    var = draws.var(axis=0, ddof=1)
    assert np.all(np.abs(var - 0.2) / 0.2 < 0.03)


def test_denoised_identity_when_everything_zero(sched_k2):
    nnet = zero_noise_net(2, 3, 2)
    tau0 = rng_for(7).standard_normal((2, 3))
    out = denoised_estimate(sched_k2, nnet, tau0, 2, np.zeros((2, 3)))
    assert np.array_equal(out, tau0)


def test_denoised_k1_single_term(sched_k2):
    nnet = tiny_noise_net(2, 2, 2, seed=8)
    tau0 = rng_for(8).standard_normal((2, 2))
    eps = rng_for(8, 1).standard_normal((2, 2))
    out = denoised_estimate(sched_k2, nnet, tau0, 1, eps)
    tau1 = np.sqrt(0.9) * tau0 + np.sqrt(0.1) * eps
    expected = tau0 + np.sqrt(0.1 / 0.9) * eps \
        - 0.1 / np.sqrt(0.1 * 0.9) * nnet(tau1, 1)
    assert np.allclose(out, expected, atol=1e-14)


def test_denoised_constant_net_frozen_value(sched_k2):
    """Frozen oracle value for the all-ones net, plus the hand expression."""
    nnet = ones_noise_net(2, 1, 2)
    tau0 = np.ones((2, 1))
    est = denoised_estimate(sched_k2, nnet, tau0, 2, np.zeros((2, 1)))
    assert np.allclose(est, ONES_NET_DENOISED_K2, atol=1e-15)
    hand = 1.0 - (0.1 / 0.3 + 0.2 / np.sqrt(0.2016))
    assert np.allclose(est, hand, atol=1e-12)

    tau2 = forward_diffuse(sched_k2, tau0, 2, np.zeros((2, 1)))
    final, _ = iterative_denoise(sched_k2, nnet, tau2, 2)
    assert np.max(np.abs(est - final)) < 1e-12


@pytest.mark.parametrize("trial", range(10))
def test_prop1_closed_form_matches_iterative(trial):
    """Iterated noise-free reverse steps equal the closed-form mean."""
    rng = rng_for(100, trial)
    K = int(rng.integers(2, 9))
    k = int(rng.integers(1, K + 1))
    H, d = int(rng.integers(2, 5)), int(rng.integers(1, 4))
    sched = make_schedule("cosine" if trial % 2 else "linear", K, 1e-3, 0.05)
    nnet = tiny_noise_net(H, d, K, seed=200 + trial)
    tau_k = rng.standard_normal((H, d))
    final, iterates = iterative_denoise(sched, nnet, tau_k, k)
    mu = denoised_mean_from_iterates(sched, nnet, iterates)
    assert np.max(np.abs(mu - final)) < 1e-10


@pytest.mark.parametrize("trial", range(10))
def test_prop1_constant_net_denoised_estimate(trial):
    """For nets constant in tau the estimate itself matches the oracle."""
    rng = rng_for(101, trial)
    K = int(rng.integers(2, 9))
    k = int(rng.integers(1, K + 1))
    H, d = int(rng.integers(2, 5)), int(rng.integers(1, 4))
    sched = make_schedule("linear", K, 1e-3, 0.05)
    nnet = constant_noise_net(H, d, K, seed=300 + trial)
    tau0 = rng.standard_normal((H, d))
    eps = rng.standard_normal((H, d))
    est = denoised_estimate(sched, nnet, tau0, k, eps)
    tau_k = forward_diffuse(sched, tau0, k, eps)
    final, _ = iterative_denoise(sched, nnet, tau_k, k)
    assert np.max(np.abs(est - final)) < 1e-12


def test_accumulated_variance_examples(sched_k2):
    assert accumulated_variance(sched_k2, 1) == 0.1
    assert accumulated_variance(sched_k2, 2) == pytest.approx(0.1 + 0.2 / 0.9, abs=1e-15)


def test_accumulated_variance_matches_mc(sched_k2):
    for k in (1, 2):
        mc = mc_reverse_variance(sched_k2, 1.0, k, 20_000, seed=40 + k)
        expected = accumulated_variance(sched_k2, k)
        assert np.all(np.abs(mc - expected) / expected < 0.05)


def test_denoised_batch_matches_single(sched_k2):
    nnet = tiny_noise_net(3, 2, 2, seed=9)
    rng = rng_for(9)
    tau0s = rng.standard_normal((4, 3, 2))
    epss = rng.standard_normal((4, 3, 2))
    ks = np.array([1, 2, 2, 1])
    batch = denoised_estimate_batch(sched_k2, nnet, tau0s, ks, epss)
    for b in range(4):
        single = denoised_estimate(sched_k2, nnet, tau0s[b], int(ks[b]), epss[b])
        assert np.allclose(batch[b], single, atol=1e-13)


def _param_loss(sched, nnet, tau0s, ks, epss, upstreams, flat_params):
    probe_net = clone_net(nnet.net)
    ofs = 0
    for arr in probe_net.params():
        arr.flat[:] = flat_params[ofs : ofs + arr.size]
        ofs += arr.size
    probe = NoiseNet(net=probe_net, horizon=nnet.horizon,
                     traj_dim=nnet.traj_dim, n_steps=nnet.n_steps)
    outs = denoised_estimate_batch(sched, probe, tau0s, ks, epss)
    return float(np.sum(outs * upstreams))


def test_denoised_pullback_matches_fd(sched_k8):
    nnet = tiny_noise_net(2, 2, 8, seed=10, hidden=(6,))
    rng = rng_for(10)
    tau0s = rng.standard_normal((3, 2, 2))
    epss = rng.standard_normal((3, 2, 2))
    ks = np.array([3, 8, 1])
    upstreams = rng.standard_normal((3, 2, 2))
    grads = denoised_estimate_pullback(sched_k8, nnet, tau0s, ks, epss, upstreams)
    flat = np.concatenate([g.ravel() for g in grads])
    flat_params = np.concatenate([p.ravel() for p in nnet.net.params()])
    fd = finite_diff(
        lambda pv: _param_loss(sched_k8, nnet, tau0s, ks, epss, upstreams, pv),
        flat_params.copy(),
    )
    assert rel_err(flat, fd) < 1e-6


def test_denoised_pullback_last_term_only(sched_k2):
    """grad_through_all=False keeps only the i=k evaluation's VJP."""
    nnet = tiny_noise_net(2, 1, 2, seed=11)
    rng = rng_for(11)
    tau0s = rng.standard_normal((2, 2, 1))
    epss = rng.standard_normal((2, 2, 1))
    upstreams = rng.standard_normal((2, 2, 1))
    ks = np.array([1, 1])
    full = denoised_estimate_pullback(sched_k2, nnet, tau0s, ks, epss, upstreams)
    last = denoised_estimate_pullback(sched_k2, nnet, tau0s, ks, epss, upstreams,
                                      grad_through_all=False)
    for f, l in zip(full, last):
        assert np.allclose(f, l, atol=1e-14)
    ks = np.array([2, 2])
    full = denoised_estimate_pullback(sched_k2, nnet, tau0s, ks, epss, upstreams)
    last = denoised_estimate_pullback(sched_k2, nnet, tau0s, ks, epss, upstreams,
                                      grad_through_all=False)
    assert any(not np.allclose(f, l, atol=1e-12) for f, l in zip(full, last))


def test_forward_kernel_composition_quick(sched_k8):
    """Composed single-step kernels reproduce the marginal within 5% at 2e4."""
    rng = rng_for(12)
    tau0 = np.array([[0.7, -0.4]])
    n = 20_000
    samples = np.broadcast_to(tau0, (n, 1, 2)).copy()
    for k in range(1, 9):
        z = rng.standard_normal(samples.shape)
        samples = np.sqrt(sched_k8.alpha(k)) * samples + np.sqrt(sched_k8.beta(k)) * z
    mean = samples.mean(axis=0)
    var = samples.var(axis=0, ddof=1)
    ab = sched_k8.alpha_bar(8)
    assert np.max(np.abs(mean - np.sqrt(ab) * tau0)) < 0.05
    assert np.max(np.abs(var - (1 - ab)) / (1 - ab)) < 0.05


def test_make_noise_net_shape_contract():
    nnet = make_noise_net(4, 3, 10, hidden=(8,), activation="tanh",
                          precision="f64", seed=13)
    tau = rng_for(13).standard_normal((4, 3))
    out = nnet(tau, 5)
    assert out.shape == (4, 3)
    with pytest.raises(ConfigError):
        make_noise_net(1, 3, 10, hidden=(8,), activation="tanh",
                       precision="f64", seed=13)


def test_shape_preservation_everywhere(sched_k2):
    nnet = tiny_noise_net(3, 4, 2, seed=14)
    tau = rng_for(14).standard_normal((3, 4))
    eps = rng_for(14, 1).standard_normal((3, 4))
    assert forward_diffuse(sched_k2, tau, 2, eps).shape == (3, 4)
    assert forward_kernel_step(sched_k2, tau, 2, eps).shape == (3, 4)
    assert reverse_mean(sched_k2, nnet, tau, 1).shape == (3, 4)
    assert denoised_estimate(sched_k2, nnet, tau, 2, eps).shape == (3, 4)
