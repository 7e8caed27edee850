"""Run configuration: one JSON document driving the whole pipeline.

A run config aggregates the environment, data collection, world-model,
diffusion-training, guidance, and evaluation settings. Parsing is strict:
any key not in the schema is rejected with its full dotted path (for
example "training.lamda_tr"), so typos fail fast instead of silently
falling back to defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .envs import (
    EnvSpec,
    linear_point_default,
    linear_point_scalar,
    point_maze_default,
    spec_from_dict,
    spec_to_dict,
    POLICIES,
)
from .errors import ConfigError
from .planner import GuidanceConfig
from .training import TrainConfig
from .world_models import WorldModelConfig

ENV_NAMES = ("linear_point", "linear_point_scalar", "point_maze")

_ENV_KEYS = {
    "name", "horizon", "kind", "A", "B", "goal", "Q", "Rw", "sigma_env",
    "start_low", "start_high", "walls", "goal_center", "goal_radius",
    "start", "start_jitter", "dt", "action_clip",
}
_DATA_KEYS = {"policy", "n_episodes", "noise_scale", "seed"}
_WORLD_KEYS = {
    "ensemble_size", "epochs", "batch_size", "lr", "seed", "hidden",
    "activation", "precision", "logvar_min", "logvar_max",
}
_TRAIN_KEYS = {
    "lambda_tr", "lambda_rd", "weight_floor", "steps", "batch_size", "lr",
    "seed", "horizon", "diffusion_steps", "schedule", "beta_start",
    "beta_end", "use_weighting", "use_transition_loss", "use_reward_loss",
    "hidden", "activation", "precision", "log_interval",
    "grad_through_all_steps",
}
_GUIDE_KEYS = {
    "alpha", "lambda_guide", "reward_guided", "transition_guided",
    "n_candidates", "eval_at_mean",
}
_EVAL_KEYS = {"n_episodes", "seed"}
_TOP_KEYS = {"env", "data", "world_models", "training", "guidance", "eval"}


@dataclass
class DataConfig:
    policy: str = "mixed"
    n_episodes: int = 100
    noise_scale: float = 0.1
    seed: int = 0

    def validate(self):
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}; choose from {POLICIES}")
        if self.n_episodes < 1:
            raise ConfigError("data.n_episodes must be >= 1")
        if self.noise_scale < 0:
            raise ConfigError("data.noise_scale must be >= 0")


@dataclass
class EvalConfig:
    n_episodes: int = 20
    seed: int = 0

    def validate(self):
        if self.n_episodes < 1:
            raise ConfigError("eval.n_episodes must be >= 1")


@dataclass
class RunConfig:
    env: EnvSpec = field(default_factory=linear_point_default)
    data: DataConfig = field(default_factory=DataConfig)
    world: WorldModelConfig = field(default_factory=WorldModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        self.data.validate()
        self.world.validate()
        self.training.validate()
        self.guidance.validate()
        self.eval.validate()
        if self.training.horizon > self.env.horizon:
            raise ConfigError(
                "training.horizon exceeds the environment horizon "
                f"({self.training.horizon} > {self.env.horizon})"
            )


def _reject_unknown(doc: dict, allowed: set, path: str):
    unknown = sorted(set(doc) - allowed)
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(f"unknown config key: {where!r}")


def _apply(obj, doc: dict, allowed: set, path: str):
    """Overlay a JSON section onto a dataclass with defaults left intact."""
    _reject_unknown(doc, allowed, path)
    for key, value in doc.items():
        current = getattr(obj, key)
        if isinstance(current, tuple):
            value = tuple(value)
        elif isinstance(current, bool):
            value = bool(value)
        elif isinstance(current, int) and not isinstance(current, bool):
            value = int(value)
        elif isinstance(current, float):
            value = float(value)
        setattr(obj, key, value)
    return obj


def _env_from_section(doc: dict) -> EnvSpec:
    _reject_unknown(doc, _ENV_KEYS, "env")
    if "kind" in doc:
        if "name" in doc:
            raise ConfigError("env section takes either 'name' or 'kind', not both")
        return spec_from_dict(doc)
    name = doc.get("name", "linear_point")
    extra = set(doc) - {"name", "horizon"}
    if extra:
        raise ConfigError(
            f"unknown config key: 'env.{sorted(extra)[0]}' (named envs accept only 'horizon')"
        )
    if name == "linear_point":
        return linear_point_default(int(doc.get("horizon", 20)))
    if name == "linear_point_scalar":
        return linear_point_scalar(int(doc.get("horizon", 2)))
    if name == "point_maze":
        return point_maze_default(int(doc.get("horizon", 60)))
    raise ConfigError(f"unknown env name {name!r}; choose from {ENV_NAMES}")


def run_config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a JSON object")
    _reject_unknown(doc, _TOP_KEYS, "")
    cfg = RunConfig()
    if "env" in doc:
        cfg.env = _env_from_section(doc["env"])
    if "data" in doc:
        _apply(cfg.data, doc["data"], _DATA_KEYS, "data")
    if "world_models" in doc:
        _apply(cfg.world, doc["world_models"], _WORLD_KEYS, "world_models")
    if "training" in doc:
        _apply(cfg.training, doc["training"], _TRAIN_KEYS, "training")
    if "guidance" in doc:
        _apply(cfg.guidance, doc["guidance"], _GUIDE_KEYS, "guidance")
    if "eval" in doc:
        _apply(cfg.eval, doc["eval"], _EVAL_KEYS, "eval")
    cfg.validate()
    return cfg


def load_run_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError:
        raise
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    return run_config_from_dict(doc)


def run_config_echo(cfg: RunConfig) -> dict:
    """Full-precision dict echo of a run config, written into artifacts."""
    from .checkpoint import train_config_to_dict

    return {
        "env": spec_to_dict(cfg.env),
        "data": {
            "policy": cfg.data.policy,
            "n_episodes": cfg.data.n_episodes,
            "noise_scale": cfg.data.noise_scale,
            "seed": cfg.data.seed,
        },
        "world_models": {
            "ensemble_size": cfg.world.ensemble_size,
            "epochs": cfg.world.epochs,
            "batch_size": cfg.world.batch_size,
            "lr": cfg.world.lr,
            "seed": cfg.world.seed,
            "hidden": list(cfg.world.hidden),
            "activation": cfg.world.activation,
            "precision": cfg.world.precision,
            "logvar_min": cfg.world.logvar_min,
            "logvar_max": cfg.world.logvar_max,
        },
        "training": train_config_to_dict(cfg.training),
        "guidance": {
            "alpha": cfg.guidance.alpha,
            "lambda_guide": cfg.guidance.lambda_guide,
            "reward_guided": cfg.guidance.reward_guided,
            "transition_guided": cfg.guidance.transition_guided,
            "n_candidates": cfg.guidance.n_candidates,
            "eval_at_mean": cfg.guidance.eval_at_mean,
        },
        "eval": {"n_episodes": cfg.eval.n_episodes, "seed": cfg.eval.seed},
    }
