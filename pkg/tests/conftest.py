"""Shared helpers for the test suite."""

import numpy as np
import pytest

from dmemm.nn import net_init
from dmemm.diffusion import EMBED_DIM, NoiseNet, make_schedule


def rng_for(*parts: int) -> np.random.Generator:
    return np.random.default_rng(list(parts))


def tiny_net(in_dim: int, out_dim: int, seed: int, hidden=(8,), activation="tanh"):
    return net_init([in_dim, *hidden, out_dim], activation=activation,
                    precision="f64", seed=seed)


def tiny_noise_net(horizon: int, traj_dim: int, n_steps: int, seed: int,
                   hidden=(16,), activation="tanh") -> NoiseNet:
    d = horizon * traj_dim
    net = net_init([d + EMBED_DIM, *hidden, d], activation=activation,
                   precision="f64", seed=seed)
    return NoiseNet(net=net, horizon=horizon, traj_dim=traj_dim, n_steps=n_steps)


def constant_noise_net(horizon: int, traj_dim: int, n_steps: int, seed: int,
                       hidden=(16,)) -> NoiseNet:
    """A noise net whose output ignores the trajectory but still varies with k.

    Zeroing the first-layer columns that read the flattened trajectory makes
    the net constant in tau while the step embedding keeps it k-dependent.
    """
    nnet = tiny_noise_net(horizon, traj_dim, n_steps, seed, hidden=hidden)
    d = horizon * traj_dim
    nnet.net.weights[0][:, :d] = 0.0
    return nnet


@pytest.fixture
def sched_k8():
    return make_schedule("cosine", 8, 1e-4, 0.02)


@pytest.fixture
def sched_k2():
    return make_schedule("linear", 2, 0.1, 0.2)
