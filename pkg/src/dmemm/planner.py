"""Guided trajectory sampling and receding-horizon evaluation.

Each reverse step perturbs the learned mean with a guidance gradient that
combines two signals over the whole trajectory: the learned reward's
gradient at every row, and the gradient of the learned transition
log-density over every consecutive state pair (weighted by lambda_guide).
The sample is then conditioned by overwriting row 0's state block with the
current (normalized) environment state; conditioning is always applied
last, after noise.

Guidance is evaluated at the pre-step trajectory tau_k by default.
Planning starts from pure noise, applies K guided reverse steps, and
denormalizes the result. Several candidates can be drawn and ranked by
predicted reward. The final reverse step adds no noise so the executed
action is not jittered; pass last_step_noise=True to sample it too.

Receding-horizon control replans every environment step, executes the
plan's first action, and repeats until done or horizon.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Normalizer, denormalize_traj, normalize_states
from .diffusion import NoiseNet, NoiseSchedule, reverse_mean
from .envs import EnvSpec, env_reset, env_step
from .errors import ConfigError, NumericError, ShapeError
from .training import Checkpoint


@dataclass(eq=False)
class GuidanceConfig:
    alpha: float = 0.001
    lambda_guide: float = 0.1
    reward_guided: bool = True
    transition_guided: bool = True
    n_candidates: int = 1
    eval_at_mean: bool = False  # alternative guidance point; off by default

    def validate(self) -> None:
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.lambda_guide < 0:
            raise ConfigError(f"lambda_guide must be >= 0, got {self.lambda_guide}")
        if self.n_candidates < 1:
            raise ConfigError(f"n_candidates must be >= 1, got {self.n_candidates}")


def guidance_gradient(reward, transition, traj: np.ndarray, lambda_guide: float,
                      reward_guided: bool = True,
                      transition_guided: bool = True) -> np.ndarray:
    """Gradient of sum_t R(s_t, a_t) + lambda * sum_t log T(s_{t+1} | s_t, a_t)
    with respect to the full (H, ds + da) trajectory."""
    traj = np.asarray(traj, dtype=np.float64)
    model = reward if reward is not None else transition
    if model is None:
        raise ConfigError("guidance needs at least one model")
    ds = model.state_dim
    if traj.ndim != 2 or traj.shape[1] <= ds:
        raise ShapeError(f"trajectory shape {traj.shape} incompatible with state dim {ds}")
    g = np.zeros_like(traj)
    S = traj[:, :ds]
    A = traj[:, ds:]
    if reward_guided:
        if reward is None:
            raise ConfigError("reward guidance requires a reward model")
        _, dS, dA = reward.value_and_input_grad(S, A)
        g[:, :ds] += dS
        g[:, ds:] += dA
    if transition_guided and lambda_guide > 0 and traj.shape[0] >= 2:
        if transition is None:
            raise ConfigError("transition guidance requires a transition model")
        _, dS0, dA0, dS1 = transition.logprob_and_input_grad(S[:-1], A[:-1], S[1:])
        g[:-1, :ds] += lambda_guide * dS0
        g[:-1, ds:] += lambda_guide * dA0
        g[1:, :ds] += lambda_guide * dS1
    return g


def guided_reverse_step(sched: NoiseSchedule, nnet: NoiseNet, reward, transition,
                        tau_k: np.ndarray, k: int, s_now_norm: np.ndarray,
                        cfg: GuidanceConfig, z: np.ndarray | None = None) -> np.ndarray:
    """One reverse step with mean perturbation and conditioning applied last.

    s_now_norm is the current environment state already in normalized
    coordinates; it replaces row 0's state block exactly.
    """
    tau_k = np.asarray(tau_k, dtype=np.float64)
    out = reverse_mean(sched, nnet, tau_k, k)
    guided = cfg.alpha > 0 and (cfg.reward_guided or cfg.transition_guided)
    s2 = sched.sigma2_at(k)
    if guided:
        point = out if cfg.eval_at_mean else tau_k
        g = guidance_gradient(reward, transition, point, cfg.lambda_guide,
                              reward_guided=cfg.reward_guided,
                              transition_guided=cfg.transition_guided)
        out = out + cfg.alpha * s2 * g
    if z is not None:
        z = np.asarray(z, dtype=np.float64)
        if z.shape != out.shape:
            raise ShapeError(f"z shape {z.shape} != {out.shape}")
        out = out + np.sqrt(s2) * z
    s_now_norm = np.asarray(s_now_norm, dtype=np.float64)
    out[0, : s_now_norm.shape[0]] = s_now_norm
    return out


def _plan_once(sched, nnet, reward, transition, s_norm, cfg, rng,
               last_step_noise: bool) -> np.ndarray:
    tau = rng.standard_normal((nnet.horizon, nnet.traj_dim))
    for k in range(sched.n_steps, 0, -1):
        z = rng.standard_normal(tau.shape) if (k > 1 or last_step_noise) else None
        tau = guided_reverse_step(sched, nnet, reward, transition, tau, k,
                                  s_norm, cfg, z)
    return tau


def plan_candidates(sched: NoiseSchedule, nnet: NoiseNet, reward, transition,
                    normalizer: Normalizer, s_now: np.ndarray, cfg: GuidanceConfig,
                    seed: int, last_step_noise: bool = False):
    """All candidate plans in normalized coordinates, their scores, and the
    index of the best; used by plan and exposed for inspection."""
    cfg.validate()
    if cfg.alpha > 0:
        if cfg.reward_guided and reward is None:
            raise ConfigError("guided planning requires a reward model")
        if cfg.transition_guided and transition is None:
            raise ConfigError("guided planning requires a transition model")
    if cfg.n_candidates > 1 and reward is None:
        raise ConfigError("candidate ranking requires a reward model")
    ds = normalizer.state_dim
    s_now = np.asarray(s_now, dtype=np.float64)
    if s_now.shape != (ds,):
        raise ShapeError(f"state shape {s_now.shape} != ({ds},)")
    s_norm = normalize_states(normalizer, s_now)
    rng = np.random.default_rng(seed)
    cands, scores = [], []
    for _ in range(cfg.n_candidates):
        tau = _plan_once(sched, nnet, reward, transition, s_norm, cfg, rng,
                         last_step_noise)
        if not np.all(np.isfinite(tau)):
            raise NumericError("non-finite values in sampled plan")
        cands.append(tau)
        if reward is not None:
            scores.append(float(np.sum(reward.predict(tau[:, :ds], tau[:, ds:]))))
        else:
            scores.append(0.0)
    best = int(np.argmax(scores))
    return cands, scores, best


def plan(sched: NoiseSchedule, nnet: NoiseNet, reward, transition,
         normalizer: Normalizer, s_now: np.ndarray, cfg: GuidanceConfig,
         seed: int, last_step_noise: bool = False) -> np.ndarray:
    """Sample a guided plan conditioned on s_now; returns it denormalized."""
    cands, _, best = plan_candidates(sched, nnet, reward, transition, normalizer,
                                     s_now, cfg, seed, last_step_noise)
    return denormalize_traj(normalizer, cands[best])


@dataclass(eq=False)
class EpisodeResult:
    episode: int
    seed: int
    ret: float
    steps: int
    success: bool


@dataclass(eq=False)
class EvalStats:
    mean_return: float
    std_return: float
    success_rate: float
    episodes: list[EpisodeResult]


def rollout_eval(spec: EnvSpec, checkpoint: Checkpoint, reward, transition,
                 cfg: GuidanceConfig, n_episodes: int, seed: int,
                 last_step_noise: bool = False) -> EvalStats:
    """Receding-horizon evaluation: replan each step, execute the first action.

    Episode i resets with seed + i and draws its stream from [seed, i], so
    runs are reproducible and episodes are pairable across checkpoints.
    """
    if n_episodes < 1:
        raise ConfigError(f"n_episodes must be >= 1, got {n_episodes}")
    if spec.state_dim != checkpoint.state_dim or spec.action_dim != checkpoint.action_dim:
        raise ConfigError(
            f"environment dims ({spec.state_dim}, {spec.action_dim}) do not match "
            f"checkpoint dims ({checkpoint.state_dim}, {checkpoint.action_dim})"
        )
    cfg.validate()
    sched = checkpoint.schedule()
    nnet = checkpoint.noise_net()
    nrm = checkpoint.normalizer
    ds = spec.state_dim
    results = []
    for ep in range(n_episodes):
        ep_seed = seed + ep
        state = env_reset(spec, ep_seed)
        rng = np.random.default_rng([seed, ep])
        total, steps, success = 0.0, 0, False
        for _ in range(spec.horizon):
            plan_seed = int(rng.integers(0, 2**63))
            traj = plan(sched, nnet, reward, transition, nrm, state, cfg,
                        plan_seed, last_step_noise)
            action = traj[0, ds:]
            state, r, done = env_step(spec, state, action, rng=rng)
            total += r
            steps += 1
            if done:
                success = True
                break
        results.append(EpisodeResult(ep, ep_seed, total, steps, success))
    rets = np.asarray([r.ret for r in results])
    return EvalStats(
        mean_return=float(rets.mean()),
        std_return=float(rets.std()),
        success_rate=float(np.mean([r.success for r in results])),
        episodes=results,
    )
