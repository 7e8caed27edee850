"""Independent numerical oracles used to validate the analytic code paths.

Each oracle is deliberately implemented from first principles rather than
by calling the code it checks: finite differences never touch the network
VJPs, the iterative denoiser applies the one-step reverse mean repeatedly
instead of the closed form, the Monte-Carlo variance estimate simulates the
noisy reverse chain directly, the control optimum comes from a backward
Riccati recursion, and the grid search enumerates action sequences.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffusion import NoiseNet, NoiseSchedule, reverse_mean
from .envs import LinearPointSpec
from .errors import ConfigError

_BRUTE_BUDGET = 10**8


def finite_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_err(approx: np.ndarray, ref: np.ndarray) -> float:
    """Max-norm relative disagreement, floored so an all-zero ref is safe."""
    approx = np.asarray(approx, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    denom = max(float(np.max(np.abs(ref))), 1e-12)
    return float(np.max(np.abs(approx - ref))) / denom


def iterative_denoise(sched: NoiseSchedule, nnet: NoiseNet, tau_k: np.ndarray,
                      k: int):
    """Apply the one-step reverse mean k times with zero noise.

    Returns (final trajectory, [tau_k, tau_{k-1}, ..., tau_1]) where the
    recorded list holds the input of each application.
    """
    k = sched.check_step(k)
    tau = np.asarray(tau_k, dtype=np.float64)
    iterates = []
    for i in range(k, 0, -1):
        iterates.append(tau)
        tau = reverse_mean(sched, nnet, tau, i)
    return tau, iterates


def mc_reverse_variance(sched: NoiseSchedule, const_value, k: int,
                        n_samples: int, seed: int, shape=(2, 3)) -> np.ndarray:
    """Elementwise sample variance of the noisy reverse chain from a fixed
    start, with the noise prediction frozen to a constant."""
    k = sched.check_step(k)
    if n_samples < 10**4:
        raise ConfigError(f"n_samples must be >= 1e4, got {n_samples}")
    const = np.broadcast_to(np.asarray(const_value, dtype=np.float64), shape)
    rng = np.random.default_rng(seed)
    x = np.ones((n_samples, *shape))
    for i in range(k, 0, -1):
        a = sched.alpha(i)
        ab = sched.alpha_bar(i)
        mu = (x - (1.0 - a) / np.sqrt(1.0 - ab) * const) / np.sqrt(a)
        x = mu + np.sqrt(sched.sigma2_at(i)) * rng.standard_normal(x.shape)
    return x.var(axis=0, ddof=1)


def lqr_optimal(spec: LinearPointSpec, s0: np.ndarray, horizon: int | None = None):
    """Exact optimum of the linear-quadratic episode via a backward recursion.

    The episode cost is sum_{t<T} (s_t - g)^T Q (s_t - g) + a_t^T Rw a_t with
    no terminal term, matching how the environment charges rewards. Returns
    (actions (T, da), optimal return).
    """
    if not isinstance(spec, LinearPointSpec):
        raise ConfigError("closed-form optimum is only defined for linear_point")
    if spec.sigma_env != 0:
        raise ConfigError("closed-form optimum requires sigma_env = 0")
    T = spec.horizon if horizon is None else int(horizon)
    if T < 1:
        raise ConfigError(f"horizon must be >= 1, got {T}")
    A, B, Q, R, g = spec.A, spec.B, spec.Q, spec.Rw, spec.goal
    ds, da = spec.state_dim, spec.action_dim
    c = A @ g - g  # affine drift of the goal-error dynamics

    # Value function V_t(e) = e^T P e + 2 q^T e + r for e = s - g.
    P = np.zeros((ds, ds))
    q = np.zeros(ds)
    r = 0.0
    gains = []
    for _ in range(T):
        M = R + B.T @ P @ B
        u = B.T @ (P @ c + q)
        K = np.linalg.solve(M, B.T @ P @ A)
        d = np.linalg.solve(M, u)
        P_new = Q + A.T @ P @ A - A.T @ P @ B @ K
        q_new = A.T @ (P @ c + q) - K.T @ u
        r_new = r + c @ P @ c + 2.0 * q @ c - u @ d
        P, q, r = 0.5 * (P_new + P_new.T), q_new, r_new
        gains.append((K, d))
    gains.reverse()

    s0 = np.asarray(s0, dtype=np.float64)
    e0 = s0 - g
    cost = float(e0 @ P @ e0 + 2.0 * q @ e0 + r)
    actions = np.empty((T, da))
    s = s0
    for t, (K, d) in enumerate(gains):
        a = -K @ (s - g) - d
        actions[t] = a
        s = A @ s + B @ a
    return actions, -cost


def brute_force_actions(spec: LinearPointSpec, s0: np.ndarray, horizon: int,
                        grid_step: float) -> float:
    """Best return over a uniform grid of action sequences in [-1, 1]^da per step."""
    if not isinstance(spec, LinearPointSpec):
        raise ConfigError("grid search is only defined for linear_point")
    if spec.sigma_env != 0:
        raise ConfigError("grid search requires sigma_env = 0")
    T = int(horizon)
    da = spec.action_dim
    if T < 1 or T > 3 or da > 2:
        raise ConfigError("grid search supports horizon <= 3 and action_dim <= 2")
    if grid_step <= 0:
        raise ConfigError(f"grid_step must be positive, got {grid_step}")
    npts = int(round(2.0 / grid_step)) + 1
    dims = da * T
    total = npts**dims
    if total > _BRUTE_BUDGET:
        raise ConfigError(f"grid of {total} combinations exceeds budget {_BRUTE_BUDGET}")
    values = np.linspace(-1.0, 1.0, npts)
    s0 = np.asarray(s0, dtype=np.float64)
    best = -np.inf
    chunk = 10**6
    for lo in range(0, total, chunk):
        idx = np.arange(lo, min(lo + chunk, total))
        digits = np.empty((idx.size, dims), dtype=np.int64)
        rem = idx.copy()
        for d in range(dims - 1, -1, -1):
            digits[:, d] = rem % npts
            rem //= npts
        acts = values[digits].reshape(idx.size, T, da)
        s = np.broadcast_to(s0, (idx.size, spec.state_dim)).copy()
        ret = np.zeros(idx.size)
        for t in range(T):
            err = s - spec.goal
            a = acts[:, t]
            ret -= np.einsum("bi,ij,bj->b", err, spec.Q, err)
            ret -= np.einsum("bi,ij,bj->b", a, spec.Rw, a)
            s = s @ spec.A.T + a @ spec.B.T
        best = max(best, float(ret.max()))
    return best


@dataclass
class OracleReport:
    """One oracle-vs-artifact comparison, appendable to a CSV report."""

    name: str
    max_rel_err: float
    tolerance: float
    passed: bool
    n_samples: int


def write_oracle_report(rows: list[OracleReport], path) -> Path:
    """Append report rows to a CSV, writing the header if the file is new."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(["name", "max_rel_err", "tolerance", "passed", "n_samples"])
        for row in rows:
            writer.writerow([row.name, repr(row.max_rel_err), repr(row.tolerance),
                             row.passed, row.n_samples])
    return path
