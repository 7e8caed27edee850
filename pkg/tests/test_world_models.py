"""Transition ensemble and reward regressor: training, aggregation, gradients."""

import numpy as np
import pytest

from dmemm.dataset import collect_dataset, fit_normalizer, scale_reward, transition_arrays
from dmemm.envs import linear_point_default
from dmemm.errors import ConfigError, ShapeError
from dmemm.nn import net_init
from dmemm.oracle import finite_diff, rel_err
from dmemm.world_models import (
    RewardModel,
    TransitionModel,
    WorldModelConfig,
    reward_grad,
    train_reward,
    train_transition,
    transition_logprob_grad,
    transition_predict,
)

from conftest import rng_for

STANDARD_NORMAL_LOGP_AT_MODE = -0.9189385332046727  # -0.5 ln(2 pi)


def _member(ds, da, seed, hidden=(8,)):
    return net_init([ds + da, *hidden, 2 * ds], activation="tanh",
                    precision="f64", seed=seed)


def _model(ds=2, da=2, E=3, seed=0):
    return TransitionModel(
        members=[_member(ds, da, seed + e) for e in range(E)],
        state_dim=ds, action_dim=da, logvar_min=-10.0, logvar_max=2.0,
    )


def _fixed_member(ds, da, delta, logvar):
    """A member with constant output: zero weights, biases set the output."""
    net = _member(ds, da, seed=0)
    for w in net.weights:
        w[:] = 0.0
    net.biases[0][:] = 0.0
    net.biases[1][:ds] = delta
    net.biases[1][ds:] = logvar
    return net


def small_config(**kw):
    base = dict(ensemble_size=2, epochs=8, batch_size=32, lr=3e-3, seed=0,
                hidden=(24, 24), activation="tanh", precision="f64")
    base.update(kw)
    return WorldModelConfig(**base)


def _dataset(n_episodes=40, seed=0, horizon=15):
    return collect_dataset(linear_point_default(horizon), "mixed", n_episodes, 0.2, seed)


def test_identical_members_no_disagreement():
    ds, da = 2, 1
    member = _fixed_member(ds, da, 0.3, -1.0)
    model = TransitionModel(members=[member, member, member], state_dim=ds,
                            action_dim=da, logvar_min=-10.0, logvar_max=2.0)
    s = np.array([0.1, -0.2])
    mean, var = transition_predict(model, s, np.array([0.5]))
    assert np.allclose(mean, s + 0.3, atol=1e-15)
    assert np.allclose(var, np.exp(-1.0), atol=1e-15)


def test_zero_delta_predicts_current_state():
    model = TransitionModel(members=[_fixed_member(2, 1, 0.0, 0.0)], state_dim=2,
                            action_dim=1, logvar_min=-10.0, logvar_max=2.0)
    s = np.array([0.4, 0.7])
    mean, _ = transition_predict(model, s, np.array([0.0]))
    assert np.array_equal(mean, s)


def test_two_member_variance_arithmetic():
    """Members at +1/-1 with variance 0.5 aggregate to 0.5 + 1.0 = 1.5."""
    ds, da = 1, 1
    lv = float(np.log(0.5))
    model = TransitionModel(
        members=[_fixed_member(ds, da, 1.0, lv), _fixed_member(ds, da, -1.0, lv)],
        state_dim=ds, action_dim=da, logvar_min=-10.0, logvar_max=2.0,
    )
    _, var = transition_predict(model, np.zeros(1), np.zeros(1))
    assert np.allclose(var, 1.5, atol=1e-14)


def test_variance_strictly_positive_and_clamped():
    model = TransitionModel(
        members=[_fixed_member(1, 1, 0.0, 99.0), _fixed_member(1, 1, 0.0, -99.0)],
        state_dim=1, action_dim=1, logvar_min=-10.0, logvar_max=2.0,
    )
    _, var = transition_predict(model, np.zeros(1), np.zeros(1))
    expected = 0.5 * (np.exp(2.0) + np.exp(-10.0))
    assert np.allclose(var, expected, atol=1e-14)
    assert np.all(var > 0)


def test_permutation_invariance():
    members = [_member(2, 2, seed) for seed in (5, 6, 7)]
    a = TransitionModel(members=members, state_dim=2, action_dim=2,
                        logvar_min=-10.0, logvar_max=2.0)
    b = TransitionModel(members=members[::-1], state_dim=2, action_dim=2,
                        logvar_min=-10.0, logvar_max=2.0)
    s, act = rng_for(15).standard_normal(2), rng_for(16).standard_normal(2)
    ma, va = transition_predict(a, s, act)
    mb, vb = transition_predict(b, s, act)
    assert np.allclose(ma, mb, atol=1e-12)
    assert np.allclose(va, vb, atol=1e-12)


def test_predict_shape_errors():
    model = _model()
    with pytest.raises(ShapeError):
        transition_predict(model, np.zeros(3), np.zeros(2))
    with pytest.raises(ShapeError):
        transition_predict(model, np.zeros(2), np.zeros(1))


def test_logprob_standard_normal_at_mode():
    model = TransitionModel(members=[_fixed_member(1, 1, 0.0, 0.0)], state_dim=1,
                            action_dim=1, logvar_min=-10.0, logvar_max=2.0)
    s = np.array([0.2])
    logp, grads = transition_logprob_grad(model, s, np.zeros(1), s.copy())
    assert logp == pytest.approx(STANDARD_NORMAL_LOGP_AT_MODE, abs=1e-12)
    # at the mode the density is maximal in s_next
    assert abs(grads[2][0]) < 1e-12


@pytest.mark.parametrize("trial", range(12))
def test_logprob_grads_match_fd(trial):
    rng = rng_for(17, trial)
    ds, da = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    model = _model(ds, da, E=int(rng.integers(1, 4)), seed=60 + trial)
    s = rng.standard_normal(ds)
    a = rng.standard_normal(da)
    sn = rng.standard_normal(ds)
    _, (dS, dA, dSn) = transition_logprob_grad(model, s, a, sn)

    fd_s = finite_diff(lambda v: transition_logprob_grad(model, v, a, sn)[0], s.copy())
    fd_a = finite_diff(lambda v: transition_logprob_grad(model, s, v, sn)[0], a.copy())
    fd_sn = finite_diff(lambda v: transition_logprob_grad(model, s, a, v)[0], sn.copy())
    assert rel_err(dS, fd_s) < 1e-5
    assert rel_err(dA, fd_a) < 1e-5
    assert rel_err(dSn, fd_sn) < 1e-5


@pytest.mark.parametrize("trial", range(8))
def test_reward_grads_match_fd(trial):
    rng = rng_for(18, trial)
    ds, da = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    net = net_init([ds + da, 10, 1], activation="gelu", precision="f64",
                   seed=80 + trial)
    model = RewardModel(net=net, state_dim=ds, action_dim=da)
    s, a = rng.standard_normal(ds), rng.standard_normal(da)
    _, (dS, dA) = reward_grad(model, s, a)
    fd_s = finite_diff(lambda v: reward_grad(model, v, a)[0], s.copy())
    fd_a = finite_diff(lambda v: reward_grad(model, s, v)[0], a.copy())
    assert rel_err(dS, fd_s) < 1e-5
    assert rel_err(dA, fd_a) < 1e-5


def test_zero_reward_net():
    net = net_init([4, 6, 1], activation="tanh", precision="f64", seed=3)
    for w in net.weights:
        w[:] = 0.0
    for b in net.biases:
        b[:] = 0.0
    model = RewardModel(net=net, state_dim=2, action_dim=2)
    r, (dS, dA) = reward_grad(model, np.ones(2), np.ones(2))
    assert r == 0.0
    assert np.all(dS == 0) and np.all(dA == 0)


def test_train_zero_epochs_is_init():
    data = _dataset(n_episodes=6)
    cfg_a = small_config(ensemble_size=1, epochs=0)
    model = train_transition(data, cfg_a)
    fresh = train_transition(data, cfg_a)
    for w1, w2 in zip(model.members[0].params(), fresh.members[0].params()):
        assert np.array_equal(w1, w2)


def test_train_deterministic():
    data = _dataset(n_episodes=8)
    cfg = small_config(epochs=2)
    a, b = train_transition(data, cfg), train_transition(data, cfg)
    for ma, mb in zip(a.members, b.members):
        for pa, pb in zip(ma.params(), mb.params()):
            assert np.array_equal(pa, pb)
    ra, rb = train_reward(data, cfg), train_reward(data, cfg)
    for pa, pb in zip(ra.net.params(), rb.net.params()):
        assert np.array_equal(pa, pb)


def test_transition_heldout_mse():
    """Deterministic dynamics: normalized one-step MSE under 1e-3."""
    train_data = _dataset(n_episodes=60, seed=0)
    held = _dataset(n_episodes=12, seed=500)
    cfg = small_config(ensemble_size=3, epochs=60)
    model = train_transition(train_data, cfg)

    nrm = fit_normalizer(train_data)
    X, dY, _ = transition_arrays(held, nrm)
    S, A = X[:, :2], X[:, 2:]
    mean, _ = model.predict(S, A)
    pred_delta = mean - S
    mse = float(np.mean((pred_delta - dY) ** 2))
    assert mse < 1e-3


def test_reward_heldout_mse():
    train_data = _dataset(n_episodes=60, seed=0)
    held = _dataset(n_episodes=12, seed=500)
    cfg = small_config(epochs=300)
    model = train_reward(train_data, cfg)
    nrm = fit_normalizer(train_data)
    X, _, _ = transition_arrays(held, nrm)
    # targets scaled with the training stats the model was fit against
    raw = np.concatenate([ep.rewards for ep in held.episodes])
    R = scale_reward(train_data, raw)
    pred = model.predict(X[:, :2], X[:, 2:])
    mse = float(np.mean((pred - R) ** 2))
    assert mse < 1e-3


def test_variance_shrinks_with_data():
    """Aggregate variance on a probe set drops >= 20% from 20 to 200 episodes."""
    cfg = small_config(ensemble_size=3, epochs=25)
    small = train_transition(_dataset(n_episodes=20, seed=1), cfg)
    large = train_transition(_dataset(n_episodes=200, seed=1), cfg)
    probe = _dataset(n_episodes=5, seed=900)
    nrm = fit_normalizer(probe)
    X, _, _ = transition_arrays(probe, nrm)
    S, A = X[:, :2], X[:, 2:]
    v_small = float(np.mean(small.predict(S, A)[1]))
    v_large = float(np.mean(large.predict(S, A)[1]))
    assert v_large < 0.8 * v_small


def test_empty_dataset_rejected():
    cfg = small_config()
    with pytest.raises(ConfigError):
        train_transition(None, cfg)
    with pytest.raises(ConfigError):
        train_reward(None, cfg)


def test_config_validation():
    with pytest.raises(ConfigError):
        WorldModelConfig(ensemble_size=0).validate()
    with pytest.raises(ConfigError):
        WorldModelConfig(logvar_min=3.0, logvar_max=2.0).validate()
