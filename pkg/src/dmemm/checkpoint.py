"""Checkpoint persistence: one JSON manifest plus one binary blob.

The manifest declares every array (name, shape) in blob order together with
the network metadata grouped by role ("noise", "transition", "reward"), the
noise schedule, the normalizer, the training config, and a config echo.
The blob is the concatenation of all arrays as little-endian 32-bit floats
in the declared order. Reading validates the format version and the exact
blob length; writing after reading reproduces the blob byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import Normalizer
from .errors import BlobLengthError, ConfigError, UnsupportedVersionError
from .nn import DTYPES, DenseNet
from .training import Checkpoint, TrainConfig
from .world_models import RewardModel, TransitionModel

CHECKPOINT_VERSION = "dmemm-ckpt-1"


@dataclass(eq=False)
class LoadedCheckpoint:
    checkpoint: Checkpoint
    transition: TransitionModel | None
    reward: RewardModel | None
    guidance: dict
    config_echo: dict


def _net_meta(net: DenseNet) -> dict:
    return {
        "layer_sizes": list(net.layer_sizes),
        "activation": net.activation,
        "precision": net.precision,
    }


def _net_arrays(prefix: str, net: DenseNet):
    out = []
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        out.append((f"{prefix}/layer{i}/W", w))
        out.append((f"{prefix}/layer{i}/b", b))
    return out


def _net_from_arrays(meta: dict, arrays: dict, prefix: str) -> DenseNet:
    sizes = tuple(int(s) for s in meta["layer_sizes"])
    dtype = DTYPES[meta["precision"]]
    weights, biases = [], []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = arrays[f"{prefix}/layer{i}/W"]
        b = arrays[f"{prefix}/layer{i}/b"]
        if w.shape != (n_out, n_in) or b.shape != (n_out,):
            raise ConfigError(f"checkpoint array shapes disagree with {prefix} metadata")
        weights.append(w.astype(dtype))
        biases.append(b.astype(dtype))
    return DenseNet(sizes, weights, biases, meta["activation"], meta["precision"])


def save_checkpoint(manifest_path, checkpoint: Checkpoint,
                    transition: TransitionModel | None = None,
                    reward: RewardModel | None = None,
                    guidance: dict | None = None,
                    config_echo: dict | None = None) -> Path:
    """Write <manifest_path> and its sibling blob; returns the manifest path."""
    path = Path(manifest_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_name = path.stem + ".bin"

    arrays = _net_arrays("noise", checkpoint.net)
    roles: dict = {
        "noise": {
            **_net_meta(checkpoint.net),
            "horizon": checkpoint.horizon,
            "state_dim": checkpoint.state_dim,
            "action_dim": checkpoint.action_dim,
        }
    }
    if transition is not None:
        roles["transition"] = {
            "state_dim": transition.state_dim,
            "action_dim": transition.action_dim,
            "logvar_min": transition.logvar_min,
            "logvar_max": transition.logvar_max,
            "members": [_net_meta(m) for m in transition.members],
        }
        for e, member in enumerate(transition.members):
            arrays += _net_arrays(f"transition/{e}", member)
    if reward is not None:
        roles["reward"] = {
            **_net_meta(reward.net),
            "state_dim": reward.state_dim,
            "action_dim": reward.action_dim,
        }
        arrays += _net_arrays("reward", reward.net)

    cfg = checkpoint.config
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "blob": blob_name,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "roles": roles,
        "schedule": {
            "kind": checkpoint.schedule_kind,
            "n_steps": checkpoint.diffusion_steps,
            "beta_start": checkpoint.beta_start,
            "beta_end": checkpoint.beta_end,
        },
        "normalizer": {
            "state_mid": checkpoint.normalizer.state_mid.tolist(),
            "state_scale": checkpoint.normalizer.state_scale.tolist(),
            "action_mid": checkpoint.normalizer.action_mid.tolist(),
            "action_scale": checkpoint.normalizer.action_scale.tolist(),
        },
        "train_config": train_config_to_dict(cfg),
        "guidance": guidance or {},
        "stats": checkpoint.stats,
        "step_count": checkpoint.step_count,
        "seed": checkpoint.seed,
        "rng_summary": checkpoint.rng_summary,
        "config_echo": config_echo or {},
    }
    blob = b"".join(a.astype("<f4").tobytes() for _, a in arrays)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (path.parent / blob_name).write_bytes(blob)
    return path


def load_checkpoint(manifest_path) -> LoadedCheckpoint:
    path = Path(manifest_path)
    doc = json.loads(path.read_text())
    version = doc.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(
            f"unsupported checkpoint format: {version!r} (expected {CHECKPOINT_VERSION!r})"
        )
    blob = (path.parent / doc["blob"]).read_bytes()
    expected = sum(int(np.prod(e["shape"])) * 4 for e in doc["arrays"])
    if len(blob) != expected:
        raise BlobLengthError(
            f"checkpoint blob length mismatch: expected {expected} bytes, got {len(blob)}"
        )
    arrays = {}
    ofs = 0
    for entry in doc["arrays"]:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape))
        arrays[entry["name"]] = (
            np.frombuffer(blob, dtype="<f4", count=count, offset=ofs)
            .reshape(shape)
            .copy()
        )
        ofs += count * 4

    roles = doc["roles"]
    noise_meta = roles["noise"]
    net = _net_from_arrays(noise_meta, arrays, "noise")
    sched = doc["schedule"]
    nrm_doc = doc["normalizer"]
    checkpoint = Checkpoint(
        net=net,
        horizon=int(noise_meta["horizon"]),
        state_dim=int(noise_meta["state_dim"]),
        action_dim=int(noise_meta["action_dim"]),
        schedule_kind=sched["kind"],
        diffusion_steps=int(sched["n_steps"]),
        beta_start=float(sched["beta_start"]),
        beta_end=float(sched["beta_end"]),
        normalizer=Normalizer(
            state_mid=np.asarray(nrm_doc["state_mid"], dtype=np.float64),
            state_scale=np.asarray(nrm_doc["state_scale"], dtype=np.float64),
            action_mid=np.asarray(nrm_doc["action_mid"], dtype=np.float64),
            action_scale=np.asarray(nrm_doc["action_scale"], dtype=np.float64),
        ),
        config=train_config_from_dict(doc["train_config"]),
        step_count=int(doc["step_count"]),
        seed=int(doc["seed"]),
        rng_summary=doc["rng_summary"],
        stats=doc.get("stats", {}),
    )
    transition = None
    if "transition" in roles:
        tmeta = roles["transition"]
        members = [
            _net_from_arrays(m, arrays, f"transition/{e}")
            for e, m in enumerate(tmeta["members"])
        ]
        transition = TransitionModel(
            members=members,
            state_dim=int(tmeta["state_dim"]),
            action_dim=int(tmeta["action_dim"]),
            logvar_min=float(tmeta["logvar_min"]),
            logvar_max=float(tmeta["logvar_max"]),
        )
    reward = None
    if "reward" in roles:
        rmeta = roles["reward"]
        reward = RewardModel(
            net=_net_from_arrays(rmeta, arrays, "reward"),
            state_dim=int(rmeta["state_dim"]),
            action_dim=int(rmeta["action_dim"]),
        )
    return LoadedCheckpoint(
        checkpoint=checkpoint,
        transition=transition,
        reward=reward,
        guidance=doc.get("guidance", {}),
        config_echo=doc.get("config_echo", {}),
    )


def train_config_to_dict(cfg: TrainConfig) -> dict:
    return {
        "lambda_tr": cfg.lambda_tr,
        "lambda_rd": cfg.lambda_rd,
        "weight_floor": cfg.weight_floor,
        "steps": cfg.steps,
        "batch_size": cfg.batch_size,
        "lr": cfg.lr,
        "seed": cfg.seed,
        "horizon": cfg.horizon,
        "diffusion_steps": cfg.diffusion_steps,
        "schedule": cfg.schedule,
        "beta_start": cfg.beta_start,
        "beta_end": cfg.beta_end,
        "use_weighting": cfg.use_weighting,
        "use_transition_loss": cfg.use_transition_loss,
        "use_reward_loss": cfg.use_reward_loss,
        "hidden": list(cfg.hidden),
        "activation": cfg.activation,
        "precision": cfg.precision,
        "log_interval": cfg.log_interval,
        "grad_through_all_steps": cfg.grad_through_all_steps,
    }


def train_config_from_dict(doc: dict) -> TrainConfig:
    cfg = TrainConfig(
        lambda_tr=float(doc["lambda_tr"]),
        lambda_rd=float(doc["lambda_rd"]),
        weight_floor=float(doc["weight_floor"]),
        steps=int(doc["steps"]),
        batch_size=int(doc["batch_size"]),
        lr=float(doc["lr"]),
        seed=int(doc["seed"]),
        horizon=int(doc["horizon"]),
        diffusion_steps=int(doc["diffusion_steps"]),
        schedule=doc["schedule"],
        beta_start=float(doc["beta_start"]),
        beta_end=float(doc["beta_end"]),
        use_weighting=bool(doc["use_weighting"]),
        use_transition_loss=bool(doc["use_transition_loss"]),
        use_reward_loss=bool(doc["use_reward_loss"]),
        hidden=tuple(int(h) for h in doc["hidden"]),
        activation=doc["activation"],
        precision=doc["precision"],
        log_interval=int(doc["log_interval"]),
        grad_through_all_steps=bool(doc.get("grad_through_all_steps", True)),
    )
    cfg.validate()
    return cfg
