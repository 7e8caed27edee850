"""Modulated diffusion training.

The total objective is a reward-weighted noise-prediction loss plus two
world-model terms evaluated on the closed-form denoised trajectory:

  loss_total = loss_wdiff + lambda_tr * loss_tr + lambda_rd * loss_rd

  * loss_wdiff: per-trajectory squared noise-prediction error, weighted by
    the trajectory's normalized cumulative reward,
  * loss_tr: squared inconsistency between consecutive denoised states and
    the learned transition mean, averaged over the H - 1 transitions,
  * loss_rd: negative sum of the learned reward over denoised rows.

Ablation flags zero out individual terms; with weighting disabled the plain
(unweighted) noise-prediction loss is used. All gradients are exact VJPs:
the world models are frozen, so parameter gradients flow only through the
noise network, including all k evaluations inside the denoised estimate.

Training samples fixed-length windows uniformly from episodes, one
diffusion step per element, and logs a CSV of loss components. Runs are
bitwise reproducible from the config seed, and the degenerate-weight case
(all rewards equal, both lambdas zero) takes the same floating-point path
as plain diffusion training.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import (
    Normalizer,
    OfflineDataset,
    fit_normalizer,
    normalize_actions,
    normalize_states,
)
from .diffusion import (
    NoiseNet,
    NoiseSchedule,
    denoised_estimate_batch,
    denoised_estimate_pullback,
    make_noise_net,
    make_schedule,
)
from .errors import ConfigError, NumericError, ShapeError
from .nn import opt_state_init, opt_step

LOG_COLUMNS = ("step", "loss_total", "loss_wdiff", "loss_tr", "loss_rd")


@dataclass(eq=False)
class TrainConfig:
    lambda_tr: float = 0.1
    lambda_rd: float = 0.05
    weight_floor: float = 0.01
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    horizon: int = 8
    diffusion_steps: int = 100
    schedule: str = "cosine"
    beta_start: float = 1e-4
    beta_end: float = 0.02
    use_weighting: bool = True
    use_transition_loss: bool = True
    use_reward_loss: bool = True
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    precision: str = "f64"
    log_interval: int = 50
    grad_through_all_steps: bool = True

    def validate(self) -> None:
        if self.lambda_tr < 0 or self.lambda_rd < 0:
            raise ConfigError("lambda_tr and lambda_rd must be >= 0")
        if not 0.0 < self.weight_floor <= 1.0:
            raise ConfigError(f"weight_floor must be in (0, 1], got {self.weight_floor}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.horizon < 2:
            raise ConfigError(f"horizon must be >= 2, got {self.horizon}")
        if self.diffusion_steps < 1:
            raise ConfigError(f"diffusion_steps must be >= 1, got {self.diffusion_steps}")
        if self.log_interval < 1:
            raise ConfigError(f"log_interval must be >= 1, got {self.log_interval}")


@dataclass(eq=False)
class Checkpoint:
    """In-memory training result; persisted through the checkpoint file format."""

    net: "object"          # DenseNet backing the noise model
    horizon: int
    state_dim: int
    action_dim: int
    schedule_kind: str
    diffusion_steps: int
    beta_start: float
    beta_end: float
    normalizer: Normalizer
    config: TrainConfig
    step_count: int
    seed: int
    rng_summary: str
    stats: dict = field(default_factory=dict)

    def noise_net(self) -> NoiseNet:
        return NoiseNet(
            net=self.net,
            horizon=self.horizon,
            traj_dim=self.state_dim + self.action_dim,
            n_steps=self.diffusion_steps,
        )

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.schedule_kind, self.diffusion_steps,
                             self.beta_start, self.beta_end)


def traj_weight(rewards: np.ndarray, t_max: int, r_max: float, r_min: float,
                w_min: float = 0.01) -> float:
    """Normalized cumulative-reward weight in [w_min, 1].

    Each step's reward is mapped onto [0, 1] by the dataset's min/max, the
    sum is divided by the dataset's longest episode length, and the result
    clamped. A degenerate reward range (r_max == r_min) yields exactly 1.
    """
    if r_max == r_min:
        return 1.0
    rewards = np.asarray(rewards, dtype=np.float64)
    total = float(np.sum((rewards - r_min) / (r_max - r_min))) / float(t_max)
    return float(min(max(total, w_min), 1.0))


# --- losses ------------------------------------------------------------------


def _noised_inputs(sched: NoiseSchedule, taus: np.ndarray, ks: np.ndarray,
                   epss: np.ndarray) -> np.ndarray:
    ab = sched.alpha_bars[np.asarray(ks, dtype=np.int64) - 1][:, None, None]
    return np.sqrt(ab) * taus + np.sqrt(1.0 - ab) * epss


def _check_batch(taus, ks, epss, sched):
    taus = np.asarray(taus, dtype=np.float64)
    epss = np.asarray(epss, dtype=np.float64)
    ks = np.asarray(ks, dtype=np.int64)
    if taus.ndim != 3 or taus.shape != epss.shape:
        raise ShapeError("expected matching (B, H, D) arrays for taus and epss")
    if ks.shape != (taus.shape[0],):
        raise ShapeError(f"ks shape {ks.shape} != ({taus.shape[0]},)")
    for k in ks:
        sched.check_step(int(k))
    return taus, ks, epss


def loss_wdiff_grad(nnet: NoiseNet, sched: NoiseSchedule, taus, ks, epss, weights):
    taus, ks, epss = _check_batch(taus, ks, epss, sched)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (taus.shape[0],):
        raise ShapeError(f"weights shape {weights.shape} != ({taus.shape[0]},)")
    b = taus.shape[0]
    noised = _noised_inputs(sched, taus, ks, epss)
    pred = nnet.batch(noised, ks)
    resid = pred - epss
    per = np.sum(resid * resid, axis=(1, 2))
    value = float(np.mean(weights * per))
    upstream = (2.0 * weights / b)[:, None, None] * resid
    grads = nnet.vjp(noised, ks, upstream)
    return value, grads


def loss_wdiff(nnet, sched, taus, ks, epss, weights) -> float:
    taus, ks, epss = _check_batch(taus, ks, epss, sched)
    weights = np.asarray(weights, dtype=np.float64)
    noised = _noised_inputs(sched, taus, ks, epss)
    resid = nnet.batch(noised, ks) - epss
    return float(np.mean(weights * np.sum(resid * resid, axis=(1, 2))))


def loss_diff(nnet, sched, taus, ks, epss) -> float:
    """Unweighted noise-prediction loss (weighting fixed to exactly one)."""
    return loss_wdiff(nnet, sched, taus, ks, epss, np.ones(np.shape(taus)[0]))


def loss_diff_grad(nnet, sched, taus, ks, epss):
    return loss_wdiff_grad(nnet, sched, taus, ks, epss, np.ones(np.shape(taus)[0]))


def _tr_value_upstream(transition, tau_hats: np.ndarray):
    """Transition-consistency value and its cotangent w.r.t. the denoised batch."""
    b, h, d = tau_hats.shape
    ds = transition.state_dim
    S = tau_hats[:, :, :ds]
    A = tau_hats[:, :, ds:]
    S0 = S[:, :-1].reshape(-1, ds)
    A0 = A[:, :-1].reshape(-1, d - ds)
    S1 = S[:, 1:].reshape(-1, ds)
    mu, _ = transition.predict(S0, A0)
    resid = S1 - mu
    value = float(np.mean(np.sum(resid * resid, axis=1).reshape(b, h - 1).mean(axis=1)))
    up = 2.0 * resid / ((h - 1) * b)
    dS0, dA0 = transition.mean_vjp(S0, A0, -up)
    dtau = np.zeros_like(tau_hats)
    dtau[:, 1:, :ds] += up.reshape(b, h - 1, ds)
    dtau[:, :-1, :ds] += dS0.reshape(b, h - 1, ds)
    dtau[:, :-1, ds:] += dA0.reshape(b, h - 1, d - ds)
    return value, dtau


def _rd_value_upstream(reward, tau_hats: np.ndarray):
    """Negative predicted-reward value and its cotangent w.r.t. the denoised batch."""
    b, h, d = tau_hats.shape
    ds = reward.state_dim
    S = tau_hats[:, :, :ds].reshape(-1, ds)
    A = tau_hats[:, :, ds:].reshape(-1, d - ds)
    r, dS, dA = reward.value_and_input_grad(S, A)
    value = float(-np.sum(r) / b)
    dtau = np.empty_like(tau_hats)
    dtau[:, :, :ds] = -dS.reshape(b, h, ds) / b
    dtau[:, :, ds:] = -dA.reshape(b, h, d - ds) / b
    return value, dtau


def loss_tr_grad(nnet, sched, transition, taus, ks, epss, grad_through_all=True):
    if transition is None:
        raise ConfigError("transition-consistency loss needs a trained transition model")
    taus, ks, epss = _check_batch(taus, ks, epss, sched)
    if taus.shape[1] < 2:
        raise ShapeError("transition-consistency loss needs horizon >= 2")
    tau_hats = denoised_estimate_batch(sched, nnet, taus, ks, epss)
    value, dtau = _tr_value_upstream(transition, tau_hats)
    grads = denoised_estimate_pullback(sched, nnet, taus, ks, epss, dtau,
                                       grad_through_all=grad_through_all)
    return value, grads


def loss_tr(nnet, sched, transition, taus, ks, epss) -> float:
    if transition is None:
        raise ConfigError("transition-consistency loss needs a trained transition model")
    taus, ks, epss = _check_batch(taus, ks, epss, sched)
    tau_hats = denoised_estimate_batch(sched, nnet, taus, ks, epss)
    return _tr_value_upstream(transition, tau_hats)[0]


def loss_rd_grad(nnet, sched, reward, taus, ks, epss, grad_through_all=True):
    if reward is None:
        raise ConfigError("reward-shaping loss needs a trained reward model")
    taus, ks, epss = _check_batch(taus, ks, epss, sched)
    tau_hats = denoised_estimate_batch(sched, nnet, taus, ks, epss)
    value, dtau = _rd_value_upstream(reward, tau_hats)
    grads = denoised_estimate_pullback(sched, nnet, taus, ks, epss, dtau,
                                       grad_through_all=grad_through_all)
    return value, grads


def loss_rd(nnet, sched, reward, taus, ks, epss) -> float:
    if reward is None:
        raise ConfigError("reward-shaping loss needs a trained reward model")
    taus, ks, epss = _check_batch(taus, ks, epss, sched)
    tau_hats = denoised_estimate_batch(sched, nnet, taus, ks, epss)
    return _rd_value_upstream(reward, tau_hats)[0]


def _active_terms(config: TrainConfig):
    tr_on = config.use_transition_loss and config.lambda_tr > 0
    rd_on = config.use_reward_loss and config.lambda_rd > 0
    return tr_on, rd_on


def loss_total(nnet, sched, transition, reward, taus, ks, epss, weights,
               config: TrainConfig) -> dict:
    """All loss components; disabled terms are reported as 0.0."""
    if not config.use_weighting:
        weights = np.ones(np.shape(taus)[0])
    l_wdiff = loss_wdiff(nnet, sched, taus, ks, epss, weights)
    tr_on, rd_on = _active_terms(config)
    l_tr = l_rd = 0.0
    if tr_on or rd_on:
        if tr_on and transition is None:
            raise ConfigError("transition-consistency loss needs a trained transition model")
        if rd_on and reward is None:
            raise ConfigError("reward-shaping loss needs a trained reward model")
        taus, ks, epss = _check_batch(taus, ks, epss, sched)
        tau_hats = denoised_estimate_batch(sched, nnet, taus, ks, epss)
        if tr_on:
            if taus.shape[1] < 2:
                raise ShapeError("transition-consistency loss needs horizon >= 2")
            l_tr = _tr_value_upstream(transition, tau_hats)[0]
        if rd_on:
            l_rd = _rd_value_upstream(reward, tau_hats)[0]
    total = l_wdiff + config.lambda_tr * l_tr + config.lambda_rd * l_rd
    return {"loss_total": total, "loss_wdiff": l_wdiff, "loss_tr": l_tr, "loss_rd": l_rd}


def loss_total_grad(nnet, sched, transition, reward, taus, ks, epss, weights,
                    config: TrainConfig):
    """(component dict, parameter gradients) for one batch.

    The transition and reward terms share one denoised-estimate chain and one
    pullback; the pullback is linear in its upstream, so the combined
    cotangent gives the same gradients as two separate passes.
    """
    if not config.use_weighting:
        weights = np.ones(np.shape(taus)[0])
    l_wdiff, grads = loss_wdiff_grad(nnet, sched, taus, ks, epss, weights)
    tr_on, rd_on = _active_terms(config)
    l_tr = l_rd = 0.0
    if tr_on or rd_on:
        if tr_on and transition is None:
            raise ConfigError("transition-consistency loss needs a trained transition model")
        if rd_on and reward is None:
            raise ConfigError("reward-shaping loss needs a trained reward model")
        taus, ks, epss = _check_batch(taus, ks, epss, sched)
        if tr_on and taus.shape[1] < 2:
            raise ShapeError("transition-consistency loss needs horizon >= 2")
        tau_hats = denoised_estimate_batch(sched, nnet, taus, ks, epss)
        dtau = np.zeros_like(tau_hats)
        if tr_on:
            l_tr, d_tr = _tr_value_upstream(transition, tau_hats)
            dtau += config.lambda_tr * d_tr
        if rd_on:
            l_rd, d_rd = _rd_value_upstream(reward, tau_hats)
            dtau += config.lambda_rd * d_rd
        extra = denoised_estimate_pullback(
            sched, nnet, taus, ks, epss, dtau,
            grad_through_all=config.grad_through_all_steps)
        for g, e in zip(grads, extra):
            g += e
    total = l_wdiff + config.lambda_tr * l_tr + config.lambda_rd * l_rd
    comps = {"loss_total": total, "loss_wdiff": l_wdiff, "loss_tr": l_tr, "loss_rd": l_rd}
    return comps, grads


# --- training loop -----------------------------------------------------------


class _WindowSampler:
    """Uniform fixed-length windows over normalized episodes, with weights."""

    def __init__(self, dataset: OfflineDataset, nrm: Normalizer, horizon: int,
                 weight_floor: float):
        self.horizon = horizon
        self.trajs = []
        self.rewards = []
        shortest = min(ep.steps for ep in dataset.episodes)
        if horizon > shortest:
            raise ConfigError(
                f"window horizon {horizon} exceeds shortest episode length {shortest}"
            )
        for ep in dataset.episodes:
            s = normalize_states(nrm, ep.states[:-1])
            a = normalize_actions(nrm, ep.actions)
            self.trajs.append(np.concatenate([s, a], axis=1))
            self.rewards.append(ep.rewards)
        self.t_max = dataset.t_max
        self.r_max = dataset.r_max
        self.r_min = dataset.r_min
        self.weight_floor = weight_floor

    def sample(self, rng: np.random.Generator, batch_size: int):
        h = self.horizon
        taus = np.empty((batch_size, h, self.trajs[0].shape[1]))
        weights = np.empty(batch_size)
        for b in range(batch_size):
            e = int(rng.integers(0, len(self.trajs)))
            t0 = int(rng.integers(0, self.trajs[e].shape[0] - h + 1))
            taus[b] = self.trajs[e][t0 : t0 + h]
            weights[b] = traj_weight(self.rewards[e][t0 : t0 + h], self.t_max,
                                     self.r_max, self.r_min, self.weight_floor)
        return taus, weights


def train_diffusion(dataset: OfflineDataset, transition, reward,
                    config: TrainConfig, log_path=None) -> Checkpoint:
    """Train the noise network; returns an in-memory checkpoint.

    transition / reward may be None when the corresponding loss term is
    disabled. When log_path is given a CSV of loss components is written:
    one row for the initial parameters (step 0, measured on a probe batch
    from a side stream so the training stream is untouched) and one row per
    log_interval steps.
    """
    config.validate()
    tr_on, rd_on = _active_terms(config)
    if tr_on and transition is None:
        raise ConfigError("lambda_tr > 0 requires a trained transition model")
    if rd_on and reward is None:
        raise ConfigError("lambda_rd > 0 requires a trained reward model")

    nrm = fit_normalizer(dataset)
    sampler = _WindowSampler(dataset, nrm, config.horizon, config.weight_floor)
    sched = make_schedule(config.schedule, config.diffusion_steps,
                          config.beta_start, config.beta_end)
    d = dataset.state_dim + dataset.action_dim
    nnet = make_noise_net(
        config.horizon, d, config.diffusion_steps,
        hidden=config.hidden, activation=config.activation,
        precision=config.precision,
        seed=int(np.random.SeedSequence([config.seed, 3]).generate_state(1)[0]),
    )
    k_hi = config.diffusion_steps + 1
    rng = np.random.default_rng([config.seed, 5])
    opt = opt_state_init(nnet.net.params(), config.lr)
    rows = []

    def batch_losses_and_grads(gen, want_grads):
        taus, weights = sampler.sample(gen, config.batch_size)
        ks = gen.integers(1, k_hi, config.batch_size)
        epss = gen.standard_normal(taus.shape)
        if want_grads:
            return loss_total_grad(nnet, sched, transition, reward, taus, ks,
                                   epss, weights, config)
        return loss_total(nnet, sched, transition, reward, taus, ks, epss,
                          weights, config), None

    probe = np.random.default_rng([config.seed, 9])
    comps, _ = batch_losses_and_grads(probe, want_grads=False)
    rows.append((0, comps))

    for step in range(1, config.steps + 1):
        comps, grads = batch_losses_and_grads(rng, want_grads=True)
        if not np.isfinite(comps["loss_total"]):
            raise NumericError(f"non-finite training loss at step {step}")
        new_params, opt = opt_step(nnet.net.params(), grads, opt)
        nnet.net.set_params(new_params)
        if step % config.log_interval == 0:
            rows.append((step, comps))

    if log_path is not None:
        path = Path(log_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_COLUMNS)
            for step, comps in rows:
                writer.writerow(
                    [step] + [repr(float(comps[c])) for c in LOG_COLUMNS[1:]]
                )

    state = rng.bit_generator.state["state"]["state"]
    stats = {
        "t_max": dataset.t_max,
        "r_max": dataset.r_max,
        "r_min": dataset.r_min,
        "final_loss_total": float(comps["loss_total"]),
    }
    return Checkpoint(
        net=nnet.net,
        horizon=config.horizon,
        state_dim=dataset.state_dim,
        action_dim=dataset.action_dim,
        schedule_kind=config.schedule,
        diffusion_steps=config.diffusion_steps,
        beta_start=config.beta_start,
        beta_end=config.beta_end,
        normalizer=nrm,
        config=config,
        step_count=config.steps,
        seed=config.seed,
        rng_summary=f"pcg64:{state % 10**12:012d}",
        stats=stats,
    )
