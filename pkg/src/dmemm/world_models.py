"""Learned environment models: a Gaussian transition ensemble and a reward net.

The transition model is an ensemble of dense nets mapping a normalized
(state, action) pair to a residual next-state delta plus per-dimension
log-variances (clamped to a fixed range). Members are trained on bootstrap
resamples with a Gaussian negative log-likelihood. The ensemble aggregates
to a single Gaussian per query:

  mean     = state + average of member delta means
  variance = average member variance + variance of member means (per dim,
             population convention, so two members at +1/-1 contribute 1.0)

The reward model is a plain regressor trained with squared error on
[0, 1]-scaled rewards.

Both models expose exact input gradients (hand-chained through the
aggregation and the member nets) because the training losses and the
planner's guidance differentiate through them. Everything operates in
normalized coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import OfflineDataset, fit_normalizer, transition_arrays
from .errors import ConfigError, ShapeError
from .nn import (
    DenseNet,
    net_forward,
    net_grad_batch,
    net_init,
    opt_state_init,
    opt_step,
)


@dataclass(eq=False)
class WorldModelConfig:
    ensemble_size: int = 5
    epochs: int = 150
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    precision: str = "f64"
    logvar_min: float = -10.0
    logvar_max: float = 2.0

    def validate(self) -> None:
        if self.ensemble_size < 1:
            raise ConfigError(f"ensemble_size must be >= 1, got {self.ensemble_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.logvar_min >= self.logvar_max:
            raise ConfigError("logvar_min must be < logvar_max")


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _stack(S: np.ndarray, A: np.ndarray) -> np.ndarray:
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    if S.shape[0] != A.shape[0]:
        raise ShapeError(f"batch sizes differ: {S.shape[0]} vs {A.shape[0]}")
    return np.concatenate([S, A], axis=1)


@dataclass(eq=False)
class TransitionModel:
    members: list[DenseNet]
    state_dim: int
    action_dim: int
    logvar_min: float = -10.0
    logvar_max: float = 2.0

    @property
    def ensemble_size(self) -> int:
        return len(self.members)

    def _member_parts(self, X: np.ndarray):
        """Per-member (mean, clamped logvar, clamp mask) stacks of shape (E, n, ds)."""
        ds = self.state_dim
        means, logvars, masks = [], [], []
        for net in self.members:
            out = np.asarray(net_forward(net, X), dtype=np.float64)
            means.append(out[:, :ds])
            raw = out[:, ds:]
            lv = np.clip(raw, self.logvar_min, self.logvar_max)
            logvars.append(lv)
            masks.append((raw > self.logvar_min) & (raw < self.logvar_max))
        return np.stack(means), np.stack(logvars), np.stack(masks)

    def _aggregate(self, S: np.ndarray, A: np.ndarray):
        X = _stack(S, A)
        means, logvars, masks = self._member_parts(X)
        variances = np.exp(logvars)
        mbar = means.mean(axis=0)
        mu = np.atleast_2d(np.asarray(S, dtype=np.float64)) + mbar
        var = variances.mean(axis=0) + np.mean((means - mbar) ** 2, axis=0)
        return X, means, variances, masks, mbar, mu, var

    def predict(self, S: np.ndarray, A: np.ndarray):
        """Aggregated Gaussian over the next state: (mean, variance), batched."""
        _, _, _, _, _, mu, var = self._aggregate(S, A)
        return mu, var

    def logprob_and_input_grad(self, S: np.ndarray, A: np.ndarray, S_next: np.ndarray):
        """Per-row log-density of S_next under the aggregated Gaussian,
        with exact gradients w.r.t. S, A, and S_next."""
        S2 = np.atleast_2d(np.asarray(S, dtype=np.float64))
        Sn = np.atleast_2d(np.asarray(S_next, dtype=np.float64))
        X, means, variances, masks, mbar, mu, var = self._aggregate(S, A)
        if Sn.shape != mu.shape:
            raise ShapeError(f"S_next shape {Sn.shape} != {mu.shape}")
        delta = Sn - mu
        logp = -0.5 * np.sum(np.log(2.0 * np.pi * var) + delta * delta / var, axis=1)

        dmu = delta / var
        dvar = -0.5 / var + 0.5 * (delta * delta) / (var * var)
        e = self.ensemble_size
        ds = self.state_dim
        dX = np.zeros_like(X)
        for idx, net in enumerate(self.members):
            u_mean = dmu / e + dvar * (2.0 / e) * (means[idx] - mbar)
            u_lv = dvar * (variances[idx] / e) * masks[idx]
            _, dx = net_grad_batch(net, X, np.concatenate([u_mean, u_lv], axis=1),
                                   need_param_grads=False)
            dX += dx
        dS = dX[:, :ds] + dmu  # residual path: mu = s + mean of deltas
        dA = dX[:, ds:]
        dSn = -dmu
        return logp, dS, dA, dSn

    def mean_vjp(self, S: np.ndarray, A: np.ndarray, U: np.ndarray):
        """VJP of the aggregated mean with upstream U; returns (dS, dA)."""
        X = _stack(S, A)
        U = np.atleast_2d(np.asarray(U, dtype=np.float64))
        ds = self.state_dim
        if U.shape != (X.shape[0], ds):
            raise ShapeError(f"upstream shape {U.shape} != ({X.shape[0]}, {ds})")
        e = self.ensemble_size
        dX = np.zeros_like(X)
        zeros = np.zeros_like(U)
        for net in self.members:
            _, dx = net_grad_batch(net, X, np.concatenate([U / e, zeros], axis=1),
                                   need_param_grads=False)
            dX += dx
        return dX[:, :ds] + U, dX[:, ds:]


@dataclass(eq=False)
class RewardModel:
    net: DenseNet
    state_dim: int
    action_dim: int

    def predict(self, S: np.ndarray, A: np.ndarray) -> np.ndarray:
        X = _stack(S, A)
        return np.asarray(net_forward(self.net, X), dtype=np.float64)[:, 0]

    def value_and_input_grad(self, S: np.ndarray, A: np.ndarray):
        """Per-row reward and the gradient of each row's reward w.r.t. its input."""
        X = _stack(S, A)
        r = np.asarray(net_forward(self.net, X), dtype=np.float64)[:, 0]
        ones = np.ones((X.shape[0], 1), dtype=np.float64)
        _, dX = net_grad_batch(self.net, X, ones, need_param_grads=False)
        ds = self.state_dim
        return r, dX[:, :ds], dX[:, ds:]


# --- vector wrappers ---------------------------------------------------------


def transition_predict(model: TransitionModel, s: np.ndarray, a: np.ndarray):
    mu, var = model.predict(np.asarray(s)[None], np.asarray(a)[None])
    return mu[0], var[0]


def transition_logprob_grad(model: TransitionModel, s: np.ndarray, a: np.ndarray,
                            s_next: np.ndarray):
    logp, dS, dA, dSn = model.logprob_and_input_grad(
        np.asarray(s)[None], np.asarray(a)[None], np.asarray(s_next)[None]
    )
    return float(logp[0]), (dS[0], dA[0], dSn[0])


def reward_grad(model: RewardModel, s: np.ndarray, a: np.ndarray):
    r, dS, dA = model.value_and_input_grad(np.asarray(s)[None], np.asarray(a)[None])
    return float(r[0]), (dS[0], dA[0])


# --- training ----------------------------------------------------------------


def _minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo : lo + batch_size]


def _require_transitions(dataset):
    if dataset is None or not getattr(dataset, "episodes", None):
        raise ConfigError("training requires a dataset with at least one transition")


def train_transition(dataset: OfflineDataset, config: WorldModelConfig) -> TransitionModel:
    """Fit the ensemble on bootstrap resamples of the dataset's transitions."""
    config.validate()
    _require_transitions(dataset)
    nrm = fit_normalizer(dataset)
    X, dY, _ = transition_arrays(dataset, nrm)
    n, ds = dY.shape
    da = X.shape[1] - ds
    members = []
    for e in range(config.ensemble_size):
        rng = np.random.default_rng([config.seed, 7, e])
        net = net_init(
            [ds + da, *config.hidden, 2 * ds],
            activation=config.activation,
            precision=config.precision,
            seed=_derive_seed(config.seed, 7, e),
        )
        boot = rng.integers(0, n, n)
        Xb, Yb = X[boot], dY[boot]
        state = opt_state_init(net.params(), config.lr)
        for _ in range(config.epochs):
            for idx in _minibatches(n, config.batch_size, rng):
                xb, yb = Xb[idx], Yb[idx]
                out = net_forward(net, xb)
                mean = out[:, :ds]
                raw = out[:, ds:]
                lv = np.clip(raw, config.logvar_min, config.logvar_max)
                clamp_mask = (raw > config.logvar_min) & (raw < config.logvar_max)
                inv_var = np.exp(-lv)
                resid = yb - mean
                b = xb.shape[0]
                # Gaussian NLL per sample: 0.5 * sum_d [(resid^2) e^{-lv} + lv]
                d_mean = -(resid * inv_var) / b
                d_lv = 0.5 * (1.0 - resid * resid * inv_var) * clamp_mask / b
                grads, _ = net_grad_batch(net, xb, np.concatenate([d_mean, d_lv], axis=1))
                new_params, state = opt_step(net.params(), grads, state)
                net.set_params(new_params)
        members.append(net)
    return TransitionModel(
        members=members,
        state_dim=ds,
        action_dim=da,
        logvar_min=config.logvar_min,
        logvar_max=config.logvar_max,
    )


def train_reward(dataset: OfflineDataset, config: WorldModelConfig) -> RewardModel:
    """Fit the reward regressor on [0, 1]-scaled per-step rewards."""
    config.validate()
    _require_transitions(dataset)
    nrm = fit_normalizer(dataset)
    X, dY, R = transition_arrays(dataset, nrm)
    ds = dY.shape[1]
    da = X.shape[1] - ds
    n = X.shape[0]
    rng = np.random.default_rng([config.seed, 11])
    net = net_init(
        [ds + da, *config.hidden, 1],
        activation=config.activation,
        precision=config.precision,
        seed=_derive_seed(config.seed, 11),
    )
    state = opt_state_init(net.params(), config.lr)
    for _ in range(config.epochs):
        for idx in _minibatches(n, config.batch_size, rng):
            xb, rb = X[idx], R[idx]
            pred = net_forward(net, xb)[:, 0]
            upstream = (2.0 * (pred - rb) / xb.shape[0])[:, None]
            grads, _ = net_grad_batch(net, xb, upstream)
            new_params, state = opt_step(net.params(), grads, state)
            net.set_params(new_params)
    return RewardModel(net=net, state_dim=ds, action_dim=da)
