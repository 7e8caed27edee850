"""Command-line surface: gen-data, train, plan-eval, sweep.

Every command is deterministic given (config, seed) and writes a config
echo into each artifact it produces. Exit codes: 0 success, 2 configuration
error, 3 I/O error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_run_config, run_config_echo
from .dataset import collect_dataset, load_dataset, save_dataset
from .envs import spec_from_dict
from .errors import ConfigError, DmemmError, NumericError, BlobLengthError
from .planner import GuidanceConfig, rollout_eval
from .training import train_diffusion
from .world_models import train_reward, train_transition

ABLATIONS = {
    "none": (),
    "w/o-weighting": ("weighting",),
    "w/o-tr": ("tr",),
    "w/o-lambda-tr": ("tr",),
    "w/o-rd": ("rd",),
    "w/o-lambda-rd": ("rd",),
    "w/o-tr-guide": ("tr-guide",),
    "baseline": ("weighting", "tr", "rd", "tr-guide"),
}

SWEEP_PARAMS = ("lambda_tr", "lambda_rd", "alpha")


def threads_from_env() -> int:
    """Validated DMEMM_THREADS value (0 = auto); echoed into artifacts."""
    raw = os.environ.get("DMEMM_THREADS", "0")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"DMEMM_THREADS must be an integer >= 0, got {raw!r}")
    if value < 0:
        raise ConfigError(f"DMEMM_THREADS must be >= 0, got {value}")
    return value


def apply_ablation(cfg: RunConfig, name: str) -> RunConfig:
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    cfg = copy.deepcopy(cfg)
    parts = ABLATIONS[name]
    if "weighting" in parts:
        cfg.training.use_weighting = False
    if "tr" in parts:
        cfg.training.use_transition_loss = False
    if "rd" in parts:
        cfg.training.use_reward_loss = False
    if "tr-guide" in parts:
        cfg.guidance.transition_guided = False
    return cfg


def _echo(cfg: RunConfig, ablation: str = "none") -> dict:
    doc = run_config_echo(cfg)
    doc["ablation"] = ablation
    doc["dmemm_threads"] = threads_from_env()
    return doc


def _manifest_path(path_arg, default_name: str = "manifest.json") -> Path:
    p = Path(path_arg)
    return p / default_name if p.is_dir() else p


def _guidance_from_doc(doc: dict) -> GuidanceConfig:
    cfg = GuidanceConfig()
    for key in ("alpha", "lambda_guide", "n_candidates"):
        if key in doc:
            setattr(cfg, key, type(getattr(cfg, key))(doc[key]))
    for key in ("reward_guided", "transition_guided", "eval_at_mean"):
        if key in doc:
            setattr(cfg, key, bool(doc[key]))
    return cfg


def _write_results(out: Path, stats, echo: dict, extra: dict):
    lines = ["episode,seed,return,steps,success"]
    for ep in stats.episodes:
        lines.append(f"{ep.episode},{ep.seed},{ep.ret!r},{ep.steps},{int(ep.success)}")
    (out / "results.csv").write_text("\n".join(lines) + "\n")
    aggregate = {
        "mean_return": stats.mean_return,
        "std_return": stats.std_return,
        "success_rate": stats.success_rate,
        "n_episodes": len(stats.episodes),
        **extra,
        "config_echo": echo,
    }
    (out / "aggregate.json").write_text(json.dumps(aggregate, indent=2, sort_keys=True))


def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config)
    dataset = collect_dataset(
        cfg.env, cfg.data.policy, cfg.data.n_episodes, cfg.data.noise_scale,
        cfg.data.seed,
    )
    manifest = save_dataset(dataset, args.out, cfg.env, config_echo=_echo(cfg))
    print(f"wrote {manifest}")
    print(
        f"episodes={dataset.n_episodes} t_max={dataset.t_max} "
        f"r_max={dataset.r_max!r} r_min={dataset.r_min!r}"
    )
    return 0


def _train_models(cfg: RunConfig, dataset):
    """Train the transition ensemble and reward model for one run config."""
    transition = train_transition(dataset, cfg.world)
    reward = train_reward(dataset, cfg.world)
    return transition, reward


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    cfg = apply_ablation(cfg, args.ablation)
    dataset, _, _ = load_dataset(_manifest_path(args.dataset))
    if (dataset.state_dim, dataset.action_dim) != (cfg.env.state_dim, cfg.env.action_dim):
        raise ConfigError(
            f"dataset dims ({dataset.state_dim}, {dataset.action_dim}) do not "
            f"match env dims ({cfg.env.state_dim}, {cfg.env.action_dim})"
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    transition, reward = _train_models(cfg, dataset)
    ckpt = train_diffusion(dataset, transition, reward, cfg.training,
                           log_path=out / "train_log.csv")
    echo = _echo(cfg, ablation=args.ablation)
    manifest = save_checkpoint(out / "checkpoint.json", ckpt, transition, reward,
                               guidance=echo["guidance"], config_echo=echo)
    print(f"wrote {manifest}")
    print(f"steps={ckpt.step_count} final_loss={ckpt.stats.get('final_loss_total')!r}")
    return 0


def cmd_plan_eval(args) -> int:
    loaded = load_checkpoint(_manifest_path(args.checkpoint, "checkpoint.json"))
    echo = loaded.config_echo
    if "env" not in echo:
        raise ConfigError("checkpoint carries no environment echo; cannot evaluate")
    spec = spec_from_dict(echo["env"])
    gcfg = _guidance_from_doc(loaded.guidance)
    if args.guide_alpha is not None:
        gcfg.alpha = args.guide_alpha
    if args.no_transition_guide:
        gcfg.transition_guided = False
    if args.candidates is not None:
        gcfg.n_candidates = args.candidates
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stats = rollout_eval(spec, loaded.checkpoint, loaded.reward, loaded.transition,
                         gcfg, args.episodes, args.seed)
    echo = dict(echo)
    echo["dmemm_threads"] = threads_from_env()
    extra = {
        "eval_seed": args.seed,
        "guidance": {
            "alpha": gcfg.alpha,
            "lambda_guide": gcfg.lambda_guide,
            "reward_guided": gcfg.reward_guided,
            "transition_guided": gcfg.transition_guided,
            "n_candidates": gcfg.n_candidates,
            "eval_at_mean": gcfg.eval_at_mean,
        },
    }
    _write_results(out, stats, echo, extra)
    print(f"wrote {out / 'results.csv'}")
    print(
        f"episodes={len(stats.episodes)} mean_return={stats.mean_return!r} "
        f"success_rate={stats.success_rate!r}"
    )
    return 0


def _sweep_point(cfg: RunConfig, param: str, value: float) -> RunConfig:
    cfg = copy.deepcopy(cfg)
    if param == "lambda_tr":
        cfg.training.lambda_tr = value
    elif param == "lambda_rd":
        cfg.training.lambda_rd = value
    elif param == "alpha":
        cfg.guidance.alpha = value
    else:
        raise ConfigError(f"unknown sweep param {param!r}; choose from {SWEEP_PARAMS}")
    cfg.validate()
    return cfg


def _seed_shift(cfg: RunConfig, s: int) -> RunConfig:
    """Seed offsets for sweep repetition s; eval seeds stay paired across values."""
    cfg = copy.deepcopy(cfg)
    cfg.data.seed += s
    cfg.world.seed += s
    cfg.training.seed += s
    return cfg


def cmd_sweep(args) -> int:
    if args.param not in SWEEP_PARAMS:
        raise ConfigError(f"unknown sweep param {args.param!r}; choose from {SWEEP_PARAMS}")
    try:
        values = [float(v) for v in args.values.split(",") if v.strip() != ""]
    except ValueError:
        raise ConfigError(f"--values must be a comma-separated list of numbers, got {args.values!r}")
    if not values:
        raise ConfigError("--values must name at least one value")
    if args.seeds < 1:
        raise ConfigError(f"--seeds must be >= 1, got {args.seeds}")
    base = load_run_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for s in range(args.seeds):
        seeded = _seed_shift(base, s)
        dataset = collect_dataset(
            seeded.env, seeded.data.policy, seeded.data.n_episodes,
            seeded.data.noise_scale, seeded.data.seed,
        )
        transition, reward = _train_models(seeded, dataset)
        ckpt_cache = None
        for value in values:
            point = _sweep_point(seeded, args.param, value)
            if args.param == "alpha":
                if ckpt_cache is None:
                    ckpt_cache = train_diffusion(dataset, transition, reward,
                                                 point.training)
                ckpt = ckpt_cache
            else:
                ckpt = train_diffusion(dataset, transition, reward, point.training)
            stats = rollout_eval(point.env, ckpt, reward, transition,
                                 point.guidance, point.eval.n_episodes,
                                 point.eval.seed)
            rows.append((args.param, value, s, stats.mean_return))
            print(f"{args.param}={value!r} seed={s} mean_return={stats.mean_return!r}")

    lines = ["param,value,seed,mean_return"]
    for param, value, s, mean in rows:
        lines.append(f"{param},{value!r},{s},{mean!r}")
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    by_value = {
        repr(v): float(np.mean([m for p, vv, s, m in rows if vv == v]))
        for v in values
    }
    echo = _echo(base)
    doc = {
        "param": args.param,
        "values": values,
        "seeds": args.seeds,
        "mean_return_by_value": by_value,
        "rows": [
            {"param": p, "value": v, "seed": s, "mean_return": m}
            for p, v, s, m in rows
        ],
        "config_echo": echo,
    }
    (out / "sweep.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    print(f"wrote {out / 'sweep.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dmemm",
        description="Trajectory diffusion planning with learned environment models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="collect an offline dataset")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train world models and the diffusion model")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--dataset", required=True, help="dataset manifest or directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--ablation", default="none", help=f"one of {sorted(ABLATIONS)}")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("plan-eval", help="receding-horizon evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint manifest or directory")
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--guide-alpha", type=float, default=None,
                   help="override the guidance scale")
    p.add_argument("--no-transition-guide", action="store_true")
    p.add_argument("--candidates", type=int, default=None,
                   help="override the number of ranked plan candidates")
    p.set_defaults(func=cmd_plan_eval)

    p = sub.add_parser("sweep", help="train+eval over a parameter grid")
    p.add_argument("--param", required=True, help=f"one of {SWEEP_PARAMS}")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seeds", type=int, default=5, help="number of seed repetitions")
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        threads_from_env()
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except BlobLengthError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, DmemmError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
