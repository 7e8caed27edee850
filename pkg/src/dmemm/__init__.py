"""Trajectory diffusion planning with learned environment models.

The pipeline: collect an offline dataset from a toy control environment,
fit an ensemble transition model and a reward model, train a trajectory
diffusion model whose loss is modulated by those models, then plan with
reward- and transition-guided reverse diffusion in a receding-horizon loop.
"""

from .dataset import (
    Episode,
    Normalizer,
    OfflineDataset,
    collect_dataset,
    fit_normalizer,
    load_dataset,
    save_dataset,
)
from .diffusion import (
    NoiseNet,
    NoiseSchedule,
    accumulated_variance,
    denoised_estimate,
    denoised_mean_from_iterates,
    forward_diffuse,
    forward_kernel_step,
    make_noise_net,
    make_schedule,
    reverse_mean,
    reverse_step,
)
from .envs import (
    LinearPointSpec,
    PointMazeSpec,
    env_reset,
    env_step,
    linear_point_default,
    linear_point_scalar,
    point_maze_default,
    policy_action,
)
from .errors import (
    BlobLengthError,
    ConfigError,
    DmemmError,
    NumericError,
    ShapeError,
    StepRangeError,
    UnsupportedVersionError,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import DataConfig, EvalConfig, RunConfig, load_run_config, run_config_from_dict
from .planner import (
    EvalStats,
    GuidanceConfig,
    guidance_gradient,
    guided_reverse_step,
    plan,
    plan_candidates,
    rollout_eval,
)
from .training import (
    Checkpoint,
    TrainConfig,
    loss_diff,
    loss_rd,
    loss_tr,
    loss_total,
    loss_wdiff,
    traj_weight,
    train_diffusion,
)
from .world_models import (
    RewardModel,
    TransitionModel,
    WorldModelConfig,
    train_reward,
    train_transition,
)

__version__ = "0.1.0"

__all__ = [
    "BlobLengthError",
    "Checkpoint",
    "ConfigError",
    "DataConfig",
    "DmemmError",
    "Episode",
    "EvalConfig",
    "EvalStats",
    "GuidanceConfig",
    "LinearPointSpec",
    "NoiseNet",
    "NoiseSchedule",
    "Normalizer",
    "NumericError",
    "OfflineDataset",
    "PointMazeSpec",
    "RewardModel",
    "RunConfig",
    "ShapeError",
    "StepRangeError",
    "TrainConfig",
    "TransitionModel",
    "UnsupportedVersionError",
    "WorldModelConfig",
    "accumulated_variance",
    "collect_dataset",
    "denoised_estimate",
    "denoised_mean_from_iterates",
    "env_reset",
    "env_step",
    "fit_normalizer",
    "forward_diffuse",
    "forward_kernel_step",
    "guidance_gradient",
    "guided_reverse_step",
    "linear_point_default",
    "linear_point_scalar",
    "load_checkpoint",
    "load_dataset",
    "load_run_config",
    "loss_diff",
    "loss_rd",
    "loss_total",
    "loss_tr",
    "loss_wdiff",
    "make_noise_net",
    "make_schedule",
    "plan",
    "plan_candidates",
    "point_maze_default",
    "policy_action",
    "reverse_mean",
    "reverse_step",
    "rollout_eval",
    "run_config_from_dict",
    "save_checkpoint",
    "save_dataset",
    "traj_weight",
    "train_diffusion",
    "train_reward",
    "train_transition",
]
