"""Offline dataset collection, normalization, and on-disk format.

A dataset is a list of episodes (states, actions, rewards) plus summary
statistics. Normalization is a per-dimension affine map onto roughly
[-1, 1] fitted from min/max with a scale floor, so constant dimensions map
to zero instead of dividing by zero.

On disk a dataset is a JSON manifest next to one binary blob of
little-endian float64 values laid out episode-major: all states of episode
0, then its actions, then its rewards, then episode 1, and so on. The
manifest records per-episode byte offsets, the environment spec, the
statistics, and a config echo, which makes reruns byte-comparable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .envs import EnvSpec, env_reset, env_step, policy_action, spec_from_dict, spec_to_dict
from .errors import BlobLengthError, ConfigError, ShapeError, UnsupportedVersionError

DATASET_VERSION = "dmemm-data-1"
SCALE_FLOOR = 1e-6


@dataclass(eq=False)
class Episode:
    states: np.ndarray   # (T + 1, ds)
    actions: np.ndarray  # (T, da)
    rewards: np.ndarray  # (T,)

    @property
    def steps(self) -> int:
        return self.actions.shape[0]


@dataclass(eq=False)
class Normalizer:
    """Per-dimension affine map x -> (x - mid) / scale for states and actions."""

    state_mid: np.ndarray
    state_scale: np.ndarray
    action_mid: np.ndarray
    action_scale: np.ndarray

    @property
    def state_dim(self) -> int:
        return self.state_mid.shape[0]

    @property
    def action_dim(self) -> int:
        return self.action_mid.shape[0]


@dataclass(eq=False)
class OfflineDataset:
    episodes: list[Episode]
    state_mid: np.ndarray
    state_scale: np.ndarray
    action_mid: np.ndarray
    action_scale: np.ndarray
    t_max: int
    r_max: float
    r_min: float

    @property
    def state_dim(self) -> int:
        return self.episodes[0].states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.episodes[0].actions.shape[1]

    @property
    def n_episodes(self) -> int:
        return len(self.episodes)


def _mid_scale(values: np.ndarray):
    lo = values.min(axis=0)
    hi = values.max(axis=0)
    mid = 0.5 * (lo + hi)
    scale = np.maximum(0.5 * (hi - lo), SCALE_FLOOR)
    return mid, scale


def _stats_from_episodes(episodes: list[Episode]):
    states = np.concatenate([ep.states for ep in episodes], axis=0)
    actions = np.concatenate([ep.actions for ep in episodes], axis=0)
    rewards = np.concatenate([ep.rewards for ep in episodes])
    smid, sscale = _mid_scale(states)
    amid, ascale = _mid_scale(actions)
    t_max = max(ep.steps for ep in episodes)
    return smid, sscale, amid, ascale, t_max, float(rewards.max()), float(rewards.min())


def dataset_from_episodes(episodes: list[Episode]) -> OfflineDataset:
    if not episodes:
        raise ConfigError("dataset needs at least one episode")
    smid, sscale, amid, ascale, t_max, r_max, r_min = _stats_from_episodes(episodes)
    return OfflineDataset(episodes, smid, sscale, amid, ascale, t_max, r_max, r_min)


def collect_dataset(spec: EnvSpec, policy: str, n_episodes: int,
                    noise_scale: float, seed: int) -> OfflineDataset:
    """Roll out a scripted policy; per-episode randomness is seeded seed + i."""
    if policy not in ("random", "pd_expert", "mixed"):
        raise ConfigError(f"unknown policy: {policy!r}")
    if n_episodes < 1:
        raise ConfigError(f"n_episodes must be >= 1, got {n_episodes}")
    episodes = []
    for i in range(n_episodes):
        rng = np.random.default_rng([seed, i])
        state = env_reset(spec, seed + i)
        states, actions, rewards = [state], [], []
        for _ in range(spec.horizon):
            a = policy_action(spec, policy, state, rng, noise_scale, episode_index=i)
            state, r, done = env_step(spec, state, a, rng=rng)
            states.append(state)
            actions.append(a)
            rewards.append(r)
            if done:
                break
        episodes.append(
            Episode(
                states=np.asarray(states, dtype=np.float64),
                actions=np.asarray(actions, dtype=np.float64),
                rewards=np.asarray(rewards, dtype=np.float64),
            )
        )
    return dataset_from_episodes(episodes)


def fit_normalizer(dataset: OfflineDataset) -> Normalizer:
    return Normalizer(
        state_mid=dataset.state_mid.copy(),
        state_scale=dataset.state_scale.copy(),
        action_mid=dataset.action_mid.copy(),
        action_scale=dataset.action_scale.copy(),
    )


def normalize_states(nrm: Normalizer, states: np.ndarray) -> np.ndarray:
    return (np.asarray(states, dtype=np.float64) - nrm.state_mid) / nrm.state_scale


def denormalize_states(nrm: Normalizer, states: np.ndarray) -> np.ndarray:
    return np.asarray(states, dtype=np.float64) * nrm.state_scale + nrm.state_mid


def normalize_actions(nrm: Normalizer, actions: np.ndarray) -> np.ndarray:
    return (np.asarray(actions, dtype=np.float64) - nrm.action_mid) / nrm.action_scale


def denormalize_actions(nrm: Normalizer, actions: np.ndarray) -> np.ndarray:
    return np.asarray(actions, dtype=np.float64) * nrm.action_scale + nrm.action_mid


def normalize_traj(nrm: Normalizer, traj: np.ndarray) -> np.ndarray:
    """Normalize an (H, ds + da) trajectory; row t holds (s_t, a_t)."""
    ds, da = nrm.state_dim, nrm.action_dim
    traj = np.asarray(traj, dtype=np.float64)
    if traj.ndim != 2 or traj.shape[1] != ds + da:
        raise ShapeError(f"trajectory shape {traj.shape} != (H, {ds + da})")
    out = np.empty_like(traj)
    out[:, :ds] = normalize_states(nrm, traj[:, :ds])
    out[:, ds:] = normalize_actions(nrm, traj[:, ds:])
    return out


def denormalize_traj(nrm: Normalizer, traj: np.ndarray) -> np.ndarray:
    ds, da = nrm.state_dim, nrm.action_dim
    traj = np.asarray(traj, dtype=np.float64)
    if traj.ndim != 2 or traj.shape[1] != ds + da:
        raise ShapeError(f"trajectory shape {traj.shape} != (H, {ds + da})")
    out = np.empty_like(traj)
    out[:, :ds] = denormalize_states(nrm, traj[:, :ds])
    out[:, ds:] = denormalize_actions(nrm, traj[:, ds:])
    return out


def scale_reward(dataset: OfflineDataset, rewards: np.ndarray) -> np.ndarray:
    """Map raw rewards onto [0, 1] with the dataset's min/max (floored span)."""
    span = max(dataset.r_max - dataset.r_min, 1e-12)
    return (np.asarray(rewards, dtype=np.float64) - dataset.r_min) / span


def transition_arrays(dataset: OfflineDataset, nrm: Normalizer):
    """Normalized (X, dY, R) arrays over every stored transition.

    X is (n, ds + da), dY the normalized next-state delta (n, ds), and R the
    [0, 1]-scaled per-step reward (n,).
    """
    xs, dys, rs = [], [], []
    for ep in dataset.episodes:
        s = normalize_states(nrm, ep.states)
        a = normalize_actions(nrm, ep.actions)
        xs.append(np.concatenate([s[:-1], a], axis=1))
        dys.append(s[1:] - s[:-1])
        rs.append(scale_reward(dataset, ep.rewards))
    return np.concatenate(xs), np.concatenate(dys), np.concatenate(rs)


# --- persistence -------------------------------------------------------------


def save_dataset(dataset: OfflineDataset, out_dir, spec: EnvSpec,
                 config_echo: dict | None = None) -> Path:
    """Write manifest.json + data.bin into out_dir; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chunks, table, offset = [], [], 0
    for ep in dataset.episodes:
        raw = (
            ep.states.astype("<f8").tobytes()
            + ep.actions.astype("<f8").tobytes()
            + ep.rewards.astype("<f8").tobytes()
        )
        table.append({"steps": int(ep.steps), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": DATASET_VERSION,
        "blob": "data.bin",
        "env": spec_to_dict(spec),
        "episodes": table,
        "stats": {
            "state_mid": dataset.state_mid.tolist(),
            "state_scale": dataset.state_scale.tolist(),
            "action_mid": dataset.action_mid.tolist(),
            "action_scale": dataset.action_scale.tolist(),
            "t_max": int(dataset.t_max),
            "r_max": dataset.r_max,
            "r_min": dataset.r_min,
        },
        "config_echo": config_echo or {},
    }
    (out / "data.bin").write_bytes(b"".join(chunks))
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out / "manifest.json"


def load_dataset(manifest_path):
    """Read a dataset directory; returns (dataset, spec, config_echo)."""
    path = Path(manifest_path)
    doc = json.loads(path.read_text())
    version = doc.get("format_version")
    if version != DATASET_VERSION:
        raise UnsupportedVersionError(
            f"unsupported dataset format: {version!r} (expected {DATASET_VERSION!r})"
        )
    spec = spec_from_dict(doc["env"])
    blob = (path.parent / doc["blob"]).read_bytes()
    ds, da = spec.state_dim, spec.action_dim
    expected = sum(
        ((e["steps"] + 1) * ds + e["steps"] * da + e["steps"]) * 8 for e in doc["episodes"]
    )
    if len(blob) != expected:
        raise BlobLengthError(
            f"dataset blob length mismatch: expected {expected} bytes, got {len(blob)}"
        )
    episodes = []
    for entry in doc["episodes"]:
        t = entry["steps"]
        ofs = entry["offset"]
        n_s = (t + 1) * ds
        n_a = t * da
        flat = np.frombuffer(blob, dtype="<f8", count=n_s + n_a + t, offset=ofs)
        episodes.append(
            Episode(
                states=flat[:n_s].reshape(t + 1, ds).copy(),
                actions=flat[n_s : n_s + n_a].reshape(t, da).copy(),
                rewards=flat[n_s + n_a :].copy(),
            )
        )
    st = doc["stats"]
    dataset = OfflineDataset(
        episodes=episodes,
        state_mid=np.asarray(st["state_mid"], dtype=np.float64),
        state_scale=np.asarray(st["state_scale"], dtype=np.float64),
        action_mid=np.asarray(st["action_mid"], dtype=np.float64),
        action_scale=np.asarray(st["action_scale"], dtype=np.float64),
        t_max=int(st["t_max"]),
        r_max=float(st["r_max"]),
        r_min=float(st["r_min"]),
    )
    return dataset, spec, doc.get("config_echo", {})
