"""Trajectory diffusion: noise schedules, kernels, and denoised estimates.

Steps are indexed k = 1..K. With beta_k the per-step noise level,
alpha_k = 1 - beta_k and abar_k = prod_{i<=k} alpha_i:

  * forward marginal:   tau_k = sqrt(abar_k) tau_0 + sqrt(1 - abar_k) eps
  * single-step kernel: tau_k = sqrt(alpha_k) tau_{k-1} + sqrt(beta_k) z
  * reverse mean:       (tau_k - (1 - alpha_k) / sqrt(1 - abar_k) * eps_net) / sqrt(alpha_k)
  * reverse variance:   sigma_k^2 = beta_k for every k, so sigma_1 > 0.

Unrolling the reverse mean k times telescopes into a closed form: the
denoised mean is tau_k / sqrt(abar_k) minus a weighted sum of the k network
evaluations, with weights (1 - alpha_i) / sqrt((1 - abar_i) abar_i). The
matching accumulated variance is sigma_1^2 + sum_{i>=2} sigma_i^2 / abar_{i-1}.
denoised_estimate re-expresses that closed form directly in terms of a clean
trajectory and one shared noise draw, which is what the modulated training
losses differentiate; its parameter gradient flows through all k network
evaluations.

A trajectory is an (H, ds + da) array whose row t holds (s_t, a_t). The
noise network consumes the flattened trajectory concatenated with a step
embedding: [sin, cos] pairs at four fixed frequencies plus k / K.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, StepRangeError
from .nn import DenseNet, net_forward, net_grad_batch, net_init

# Half-cycle, non-dyadic frequencies: at small step counts (K = 2..16) every
# column stays non-constant over k = 1..K, which full-cycle dyadic choices
# like sin(2 pi * 4 * k / 8) = sin(pi k) = 0 do not.
EMBED_FREQS = (1.0, 2.0, 3.0, 5.0)
EMBED_DIM = 2 * len(EMBED_FREQS) + 1

SCHEDULE_KINDS = ("linear", "cosine")
_COSINE_S = 0.008
_BETA_MAX = 0.999


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    kind: str
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigma2: np.ndarray
    beta_start: float
    beta_end: float

    @property
    def n_steps(self) -> int:
        return self.betas.shape[0]

    def check_step(self, k: int) -> int:
        k = int(k)
        if not 1 <= k <= self.n_steps:
            raise StepRangeError(f"step {k} outside [1, {self.n_steps}]")
        return k

    def alpha(self, k: int) -> float:
        return float(self.alphas[self.check_step(k) - 1])

    def beta(self, k: int) -> float:
        return float(self.betas[self.check_step(k) - 1])

    def alpha_bar(self, k: int) -> float:
        return float(self.alpha_bars[self.check_step(k) - 1])

    def sigma2_at(self, k: int) -> float:
        return float(self.sigma2[self.check_step(k) - 1])


def make_schedule(kind: str, n_steps: int, beta_start: float = 1e-4,
                  beta_end: float = 0.02) -> NoiseSchedule:
    if kind not in SCHEDULE_KINDS:
        raise ConfigError(f"unknown schedule kind: {kind!r}")
    n_steps = int(n_steps)
    if n_steps < 1:
        raise ConfigError(f"n_steps must be >= 1, got {n_steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, n_steps)
    else:
        ts = np.arange(n_steps + 1, dtype=np.float64) / n_steps
        f = np.cos((ts + _COSINE_S) / (1.0 + _COSINE_S) * np.pi / 2.0) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], 1e-12, _BETA_MAX)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(
        kind=kind,
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        sigma2=betas.copy(),
        beta_start=float(beta_start),
        beta_end=float(beta_end),
    )


def step_embedding(k: int, n_steps: int) -> np.ndarray:
    """Embedding for a single step; see step_embedding_batch."""
    return step_embedding_batch(np.asarray([k]), n_steps)[0]


def step_embedding_batch(ks: np.ndarray, n_steps: int) -> np.ndarray:
    u = np.asarray(ks, dtype=np.float64) / float(n_steps)
    cols = []
    for f in EMBED_FREQS:
        cols.append(np.sin(np.pi * f * u))
        cols.append(np.cos(np.pi * f * u))
    cols.append(u)
    return np.stack(cols, axis=-1)


@dataclass(eq=False)
class NoiseNet:
    """Dense noise-prediction net over flattened trajectories plus a step embedding."""

    net: DenseNet
    horizon: int
    traj_dim: int
    n_steps: int

    def __post_init__(self):
        want_in = self.horizon * self.traj_dim + EMBED_DIM
        want_out = self.horizon * self.traj_dim
        if self.net.in_dim != want_in or self.net.out_dim != want_out:
            raise ShapeError(
                f"net dims ({self.net.in_dim}, {self.net.out_dim}) do not match "
                f"horizon {self.horizon} x traj_dim {self.traj_dim}"
            )
        if self.horizon < 2:
            raise ConfigError(f"horizon must be >= 2, got {self.horizon}")

    def _check(self, taus: np.ndarray):
        if taus.shape[-2:] != (self.horizon, self.traj_dim):
            raise ShapeError(
                f"trajectory shape {taus.shape} != (.., {self.horizon}, {self.traj_dim})"
            )

    def _inputs(self, taus: np.ndarray, ks) -> np.ndarray:
        b = taus.shape[0]
        ks = np.broadcast_to(np.asarray(ks, dtype=np.int64), (b,))
        if np.any(ks < 1) or np.any(ks > self.n_steps):
            raise StepRangeError(f"step outside [1, {self.n_steps}]")
        emb = step_embedding_batch(ks, self.n_steps)
        return np.concatenate([taus.reshape(b, -1), emb], axis=1)

    def __call__(self, tau: np.ndarray, k: int) -> np.ndarray:
        return self.batch(np.asarray(tau, dtype=np.float64)[None], k)[0]

    def batch(self, taus: np.ndarray, ks) -> np.ndarray:
        taus = np.asarray(taus, dtype=np.float64)
        self._check(taus)
        out = net_forward(self.net, self._inputs(taus, ks))
        return np.asarray(out, dtype=np.float64).reshape(taus.shape)

    def vjp(self, taus: np.ndarray, ks, upstreams: np.ndarray) -> list[np.ndarray]:
        """Parameter cotangents summed over the batch."""
        taus = np.asarray(taus, dtype=np.float64)
        self._check(taus)
        upstreams = np.asarray(upstreams, dtype=np.float64)
        if upstreams.shape != taus.shape:
            raise ShapeError("upstream shape must match trajectory batch shape")
        grads, _ = net_grad_batch(
            self.net, self._inputs(taus, ks), upstreams.reshape(taus.shape[0], -1)
        )
        return grads


def make_noise_net(horizon: int, traj_dim: int, n_steps: int, hidden=(64, 64),
                   activation: str = "tanh", precision: str = "f64",
                   seed: int = 0) -> NoiseNet:
    sizes = [horizon * traj_dim + EMBED_DIM, *hidden, horizon * traj_dim]
    return NoiseNet(
        net=net_init(sizes, activation=activation, precision=precision, seed=seed),
        horizon=int(horizon),
        traj_dim=int(traj_dim),
        n_steps=int(n_steps),
    )


def _pair_check(tau: np.ndarray, other: np.ndarray, name: str):
    if tau.shape != other.shape:
        raise ShapeError(f"{name} shape {other.shape} != trajectory shape {tau.shape}")


def forward_diffuse(sched: NoiseSchedule, tau0: np.ndarray, k: int,
                    eps: np.ndarray) -> np.ndarray:
    """Sample the k-step forward marginal given the noise draw eps."""
    k = sched.check_step(k)
    tau0 = np.asarray(tau0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    _pair_check(tau0, eps, "eps")
    ab = sched.alpha_bar(k)
    return np.sqrt(ab) * tau0 + np.sqrt(1.0 - ab) * eps


def forward_kernel_step(sched: NoiseSchedule, tau_prev: np.ndarray, k: int,
                        z: np.ndarray) -> np.ndarray:
    """One forward kernel application: sqrt(alpha_k) tau_{k-1} + sqrt(beta_k) z."""
    k = sched.check_step(k)
    tau_prev = np.asarray(tau_prev, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    _pair_check(tau_prev, z, "z")
    return np.sqrt(sched.alpha(k)) * tau_prev + np.sqrt(sched.beta(k)) * z


def reverse_mean(sched: NoiseSchedule, nnet: NoiseNet, tau_k: np.ndarray,
                 k: int) -> np.ndarray:
    k = sched.check_step(k)
    tau_k = np.asarray(tau_k, dtype=np.float64)
    a = sched.alpha(k)
    ab = sched.alpha_bar(k)
    eps = nnet(tau_k, k)
    return (tau_k - (1.0 - a) / np.sqrt(1.0 - ab) * eps) / np.sqrt(a)


def reverse_step(sched: NoiseSchedule, nnet: NoiseNet, tau_k: np.ndarray, k: int,
                 z: np.ndarray | None = None) -> np.ndarray:
    """One reverse sample; z = None means deterministic (noise-free) mode."""
    mu = reverse_mean(sched, nnet, tau_k, k)
    if z is None:
        return mu
    z = np.asarray(z, dtype=np.float64)
    _pair_check(mu, z, "z")
    return mu + np.sqrt(sched.sigma2_at(k)) * z


def _closed_form_coeffs(sched: NoiseSchedule, k: int) -> np.ndarray:
    i = np.arange(1, k + 1)
    al = sched.alphas[i - 1]
    ab = sched.alpha_bars[i - 1]
    return (1.0 - al) / np.sqrt((1.0 - ab) * ab)


def denoised_mean_from_iterates(sched: NoiseSchedule, nnet: NoiseNet,
                                iterates: list[np.ndarray]) -> np.ndarray:
    """Closed-form denoised mean evaluated at recorded reverse iterates.

    iterates must be [tau_k, tau_{k-1}, ..., tau_1]; the result equals
    applying the reverse mean k times to tau_k when the iterates came from
    that same recursion.
    """
    k = sched.check_step(len(iterates))
    coeffs = _closed_form_coeffs(sched, k)
    out = np.asarray(iterates[0], dtype=np.float64) / np.sqrt(sched.alpha_bar(k))
    for i in range(1, k + 1):
        out = out - coeffs[i - 1] * nnet(np.asarray(iterates[k - i]), i)
    return out


def accumulated_variance(sched: NoiseSchedule, k: int) -> float:
    """Variance accumulated by k noisy reverse steps (per coordinate)."""
    k = sched.check_step(k)
    total = sched.sigma2[0]
    for i in range(2, k + 1):
        total += sched.sigma2[i - 1] / sched.alpha_bars[i - 2]
    return float(total)


def denoised_estimate(sched: NoiseSchedule, nnet: NoiseNet, tau0: np.ndarray,
                      k: int, eps: np.ndarray) -> np.ndarray:
    """Closed-form denoised trajectory from a clean one and a shared noise draw."""
    tau0 = np.asarray(tau0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    _pair_check(tau0, eps, "eps")
    out = denoised_estimate_batch(sched, nnet, tau0[None], np.asarray([k]), eps[None])
    return out[0]


def denoised_estimate_batch(sched: NoiseSchedule, nnet: NoiseNet,
                            tau0s: np.ndarray, ks: np.ndarray,
                            epss: np.ndarray) -> np.ndarray:
    """Batched denoised estimates; element b uses its own step ks[b]."""
    tau0s = np.asarray(tau0s, dtype=np.float64)
    epss = np.asarray(epss, dtype=np.float64)
    ks = np.asarray(ks, dtype=np.int64)
    if tau0s.shape != epss.shape:
        raise ShapeError("tau0s and epss must have identical shapes")
    if ks.shape != (tau0s.shape[0],):
        raise ShapeError(f"ks shape {ks.shape} != ({tau0s.shape[0]},)")
    for k in ks:
        sched.check_step(int(k))
    ab = sched.alpha_bars[ks - 1][:, None, None]
    out = tau0s + np.sqrt((1.0 - ab) / ab) * epss
    kmax = int(ks.max())
    coeffs = _closed_form_coeffs(sched, kmax)
    for i in range(1, kmax + 1):
        mask = ks >= i
        if not np.any(mask):
            continue
        abi = sched.alpha_bars[i - 1]
        noised = np.sqrt(abi) * tau0s[mask] + np.sqrt(1.0 - abi) * epss[mask]
        out[mask] -= coeffs[i - 1] * nnet.batch(noised, i)
    return out


def denoised_estimate_pullback(sched: NoiseSchedule, nnet: NoiseNet,
                               tau0s: np.ndarray, ks: np.ndarray,
                               epss: np.ndarray, upstreams: np.ndarray,
                               grad_through_all: bool = True) -> list[np.ndarray]:
    """Parameter cotangents of denoised_estimate_batch, summed over the batch.

    The evaluation points do not depend on the parameters, so each of the k
    network evaluations contributes an independent VJP weighted by its
    closed-form coefficient. grad_through_all=False keeps only the final
    (i = k) evaluation's contribution.
    """
    tau0s = np.asarray(tau0s, dtype=np.float64)
    epss = np.asarray(epss, dtype=np.float64)
    ks = np.asarray(ks, dtype=np.int64)
    upstreams = np.asarray(upstreams, dtype=np.float64)
    if upstreams.shape != tau0s.shape:
        raise ShapeError("upstream shape must match batch shape")
    kmax = int(ks.max())
    coeffs = _closed_form_coeffs(sched, kmax)
    grads = [np.zeros_like(p) for p in nnet.net.params()]
    for i in range(1, kmax + 1):
        mask = (ks >= i) if grad_through_all else (ks == i)
        if not np.any(mask):
            continue
        abi = sched.alpha_bars[i - 1]
        noised = np.sqrt(abi) * tau0s[mask] + np.sqrt(1.0 - abi) * epss[mask]
        contrib = nnet.vjp(noised, i, -coeffs[i - 1] * upstreams[mask])
        for g, c in zip(grads, contrib):
            g += c
    return grads
