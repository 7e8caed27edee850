"""Toy control environments and scripted data-collection policies.

Two environments are provided:

  * linear_point: linear dynamics s' = A s + B a + sigma_env * eta with a
    quadratic reward -(s - g)^T Q (s - g) - a^T Rw a. The reward is charged
    on the state/action pair before the transition, so step t pays for s_t
    and a_t.
  * point_maze: a 2-D double integrator (x, y, vx, vy) stepped with Euler
    integration, walls as line segments, actions clipped to a box, and a
    sparse reward of 1 inside the goal radius (which also ends the episode).

Both env_reset and env_step are pure given a seed / explicit RNG stream, so
episode collection can be sharded with per-episode seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import ClassVar, Union

import numpy as np

from .errors import ConfigError, NumericError, ShapeError


@dataclass(frozen=True, eq=False)
class LinearPointSpec:
    kind: ClassVar[str] = "linear_point"

    A: np.ndarray
    B: np.ndarray
    goal: np.ndarray
    Q: np.ndarray
    Rw: np.ndarray
    sigma_env: float
    start_low: np.ndarray
    start_high: np.ndarray
    horizon: int

    def __post_init__(self):
        ds, da = self.A.shape[0], self.B.shape[1]
        if self.A.shape != (ds, ds):
            raise ShapeError(f"A must be square, got {self.A.shape}")
        if self.B.shape != (ds, da):
            raise ShapeError(f"B shape {self.B.shape} does not match state dim {ds}")
        for name, arr, shape in (
            ("goal", self.goal, (ds,)),
            ("Q", self.Q, (ds, ds)),
            ("Rw", self.Rw, (da, da)),
            ("start_low", self.start_low, (ds,)),
            ("start_high", self.start_high, (ds,)),
        ):
            if arr.shape != shape:
                raise ShapeError(f"{name} shape {arr.shape} != {shape}")
        if self.sigma_env < 0:
            raise ConfigError(f"sigma_env must be >= 0, got {self.sigma_env}")
        if self.horizon < 1:
            raise ConfigError(f"horizon must be >= 1, got {self.horizon}")
        if np.any(self.start_low > self.start_high):
            raise ConfigError("start_low must be <= start_high")
        if np.min(np.linalg.eigvalsh(0.5 * (self.Q + self.Q.T))) < -1e-12:
            raise ConfigError("Q must be positive semi-definite")
        try:
            np.linalg.cholesky(0.5 * (self.Rw + self.Rw.T))
        except np.linalg.LinAlgError:
            raise ConfigError("Rw must be positive definite") from None

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def action_dim(self) -> int:
        return self.B.shape[1]


@dataclass(frozen=True, eq=False)
class PointMazeSpec:
    kind: ClassVar[str] = "point_maze"

    walls: np.ndarray  # (n, 4) rows (x1, y1, x2, y2)
    goal_center: np.ndarray
    goal_radius: float
    start: np.ndarray
    start_jitter: float
    dt: float
    action_clip: float
    horizon: int

    def __post_init__(self):
        if self.walls.ndim != 2 or self.walls.shape[1] != 4:
            raise ShapeError(f"walls must be (n, 4), got {self.walls.shape}")
        if self.goal_center.shape != (2,) or self.start.shape != (2,):
            raise ShapeError("goal_center and start must be 2-vectors")
        if self.goal_radius <= 0 or self.dt <= 0 or self.action_clip <= 0:
            raise ConfigError("goal_radius, dt and action_clip must be positive")
        if self.start_jitter < 0:
            raise ConfigError("start_jitter must be >= 0")
        if self.horizon < 1:
            raise ConfigError(f"horizon must be >= 1, got {self.horizon}")

    @property
    def state_dim(self) -> int:
        return 4

    @property
    def action_dim(self) -> int:
        return 2


EnvSpec = Union[LinearPointSpec, PointMazeSpec]


def linear_point_default(horizon: int = 20) -> LinearPointSpec:
    """Contractive 2-D point system used by the desk-scale experiments."""
    return LinearPointSpec(
        A=0.8 * np.eye(2),
        B=np.eye(2),
        goal=np.zeros(2),
        Q=np.eye(2),
        Rw=np.eye(2),
        sigma_env=0.0,
        start_low=-np.ones(2),
        start_high=np.ones(2),
        horizon=horizon,
    )


def linear_point_scalar(horizon: int = 2, s0: float = 1.0) -> LinearPointSpec:
    """Scalar system with A = B = Q = Rw = 1 and a fixed start state."""
    return LinearPointSpec(
        A=np.eye(1),
        B=np.eye(1),
        goal=np.zeros(1),
        Q=np.eye(1),
        Rw=np.eye(1),
        sigma_env=0.0,
        start_low=np.array([s0]),
        start_high=np.array([s0]),
        horizon=horizon,
    )


def point_maze_default(horizon: int = 60) -> PointMazeSpec:
    """A 4x4 box with one interior wall; going around the wall reaches the goal."""
    walls = np.array(
        [
            [0.0, 0.0, 4.0, 0.0],
            [4.0, 0.0, 4.0, 4.0],
            [4.0, 4.0, 0.0, 4.0],
            [0.0, 4.0, 0.0, 0.0],
            [2.0, 0.0, 2.0, 2.5],
        ]
    )
    return PointMazeSpec(
        walls=walls,
        goal_center=np.array([3.0, 1.0]),
        goal_radius=0.4,
        start=np.array([1.0, 1.0]),
        start_jitter=0.05,
        dt=0.1,
        action_clip=1.0,
        horizon=horizon,
    )


def env_reset(spec: EnvSpec, seed: int) -> np.ndarray:
    """Deterministic initial state for a seed."""
    rng = np.random.default_rng(seed)
    if isinstance(spec, LinearPointSpec):
        u = rng.uniform(0.0, 1.0, spec.state_dim)
        return spec.start_low + u * (spec.start_high - spec.start_low)
    if isinstance(spec, PointMazeSpec):
        pos = spec.start + spec.start_jitter * rng.uniform(-1.0, 1.0, 2)
        return np.concatenate([pos, np.zeros(2)])
    raise ConfigError(f"unknown environment spec: {type(spec).__name__}")


def _segment_hit(p: np.ndarray, q: np.ndarray, wall: np.ndarray):
    """Earliest intersection parameter of motion p->q with one wall, or None."""
    w1 = wall[:2]
    e = wall[2:] - w1
    d = q - p
    denom = d[0] * e[1] - d[1] * e[0]
    if abs(denom) < 1e-14:
        return None
    r = w1 - p
    t = (r[0] * e[1] - r[1] * e[0]) / denom
    u = (r[0] * d[1] - r[1] * d[0]) / denom
    if 0.0 <= t <= 1.0 and 0.0 <= u <= 1.0:
        return t
    return None


def _resolve_walls(spec: PointMazeSpec, pos: np.ndarray, new_pos: np.ndarray,
                   vel: np.ndarray):
    best_t, best_wall = None, None
    for wall in spec.walls:
        t = _segment_hit(pos, new_pos, wall)
        if t is not None and (best_t is None or t < best_t):
            best_t, best_wall = t, wall
    if best_t is None:
        return new_pos, vel
    # Stop at the wall surface, nudged back to the incoming side, and drop
    # the velocity component normal to the wall.
    e = best_wall[2:] - best_wall[:2]
    n = np.array([-e[1], e[0]])
    n = n / np.linalg.norm(n)
    side = np.dot(pos - best_wall[:2], n)
    sign = 1.0 if side >= 0 else -1.0
    hit = pos + best_t * (new_pos - pos)
    stopped = hit + sign * 1e-9 * n
    new_vel = vel - np.dot(vel, n) * n
    return stopped, new_vel


def env_step(spec: EnvSpec, state: np.ndarray, action: np.ndarray,
             rng: np.random.Generator | None = None):
    """One transition; returns (next_state, reward, done).

    Episode truncation at the horizon is the caller's job; done only signals
    environment-internal termination (reaching the point_maze goal).
    """
    state = np.asarray(state, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    if not (np.all(np.isfinite(state)) and np.all(np.isfinite(action))):
        raise NumericError("non-finite state or action passed to env_step")
    if state.shape != (spec.state_dim,):
        raise ShapeError(f"state shape {state.shape} != ({spec.state_dim},)")
    if action.shape != (spec.action_dim,):
        raise ShapeError(f"action shape {action.shape} != ({spec.action_dim},)")

    if isinstance(spec, LinearPointSpec):
        err = state - spec.goal
        reward = -float(err @ spec.Q @ err) - float(action @ spec.Rw @ action)
        nxt = spec.A @ state + spec.B @ action
        if spec.sigma_env > 0:
            if rng is None:
                raise ConfigError("sigma_env > 0 requires an explicit rng")
            nxt = nxt + spec.sigma_env * rng.standard_normal(spec.state_dim)
        return nxt, reward, False

    if isinstance(spec, PointMazeSpec):
        a = np.clip(action, -spec.action_clip, spec.action_clip)
        pos, vel = state[:2], state[2:]
        new_vel = vel + a * spec.dt
        new_pos = pos + new_vel * spec.dt
        new_pos, new_vel = _resolve_walls(spec, pos, new_pos, new_vel)
        dist = np.linalg.norm(new_pos - spec.goal_center)
        done = bool(dist <= spec.goal_radius)
        reward = 1.0 if done else 0.0
        return np.concatenate([new_pos, new_vel]), reward, done

    raise ConfigError(f"unknown environment spec: {type(spec).__name__}")


# --- scripted policies -----------------------------------------------------

POLICIES = ("random", "pd_expert", "mixed")

_PD_GAIN = 0.5        # proportional gain for linear_point
_MAZE_KP = 1.5
_MAZE_KD = 1.6
_MAZE_WAYPOINT_OFS = 0.35


def _segment_blocked(spec: PointMazeSpec, p: np.ndarray, q: np.ndarray):
    for wall in spec.walls[:]:
        t = _segment_hit(p, q, wall)
        if t is not None and 1e-9 < t < 1.0 - 1e-9:
            return wall
    return None


def _maze_target(spec: PointMazeSpec, pos: np.ndarray) -> np.ndarray:
    """Goal, or a greedy one-corner detour around the first blocking wall."""
    wall = _segment_blocked(spec, pos, spec.goal_center)
    if wall is None:
        return spec.goal_center
    a, b = wall[:2], wall[2:]
    ends = np.vstack([spec.walls[:, :2], spec.walls[:, 2:]])
    lo, hi = ends.min(axis=0), ends.max(axis=0)
    best, best_cost = None, np.inf
    for tip, other in ((a, b), (b, a)):
        d = tip - other
        norm = np.linalg.norm(d)
        if norm < 1e-12:
            continue
        way = tip + _MAZE_WAYPOINT_OFS * d / norm
        # a corner whose waypoint leaves the arena (wall tip flush against
        # the boundary) is not a way around
        if np.any(way < lo + 1e-6) or np.any(way > hi - 1e-6):
            continue
        cost = np.linalg.norm(way - pos) + np.linalg.norm(spec.goal_center - way)
        if cost < best_cost:
            best, best_cost = way, cost
    return best if best is not None else spec.goal_center


def policy_action(spec: EnvSpec, policy: str, state: np.ndarray,
                  rng: np.random.Generator, noise_scale: float,
                  episode_index: int = 0) -> np.ndarray:
    """Action from one of the scripted behavior policies."""
    if policy == "mixed":
        policy = "pd_expert" if episode_index % 2 == 0 else "random"
    if policy == "random":
        return rng.uniform(-1.0, 1.0, spec.action_dim)
    if policy != "pd_expert":
        raise ConfigError(f"unknown policy: {policy!r}")

    if isinstance(spec, LinearPointSpec):
        a = -_PD_GAIN * (spec.B.T @ (state - spec.goal))
    else:
        pos, vel = state[:2], state[2:]
        target = _maze_target(spec, pos)
        a = _MAZE_KP * (target - pos) - _MAZE_KD * vel
        a = np.clip(a, -spec.action_clip, spec.action_clip)
    if noise_scale > 0:
        a = a + noise_scale * rng.standard_normal(spec.action_dim)
    return a


def spec_to_dict(spec: EnvSpec) -> dict:
    if isinstance(spec, LinearPointSpec):
        return {
            "kind": "linear_point",
            "A": spec.A.tolist(),
            "B": spec.B.tolist(),
            "goal": spec.goal.tolist(),
            "Q": spec.Q.tolist(),
            "Rw": spec.Rw.tolist(),
            "sigma_env": float(spec.sigma_env),
            "start_low": spec.start_low.tolist(),
            "start_high": spec.start_high.tolist(),
            "horizon": int(spec.horizon),
        }
    if isinstance(spec, PointMazeSpec):
        return {
            "kind": "point_maze",
            "walls": spec.walls.tolist(),
            "goal_center": spec.goal_center.tolist(),
            "goal_radius": float(spec.goal_radius),
            "start": spec.start.tolist(),
            "start_jitter": float(spec.start_jitter),
            "dt": float(spec.dt),
            "action_clip": float(spec.action_clip),
            "horizon": int(spec.horizon),
        }
    raise ConfigError(f"unknown environment spec: {type(spec).__name__}")


def spec_from_dict(doc: dict) -> EnvSpec:
    kind = doc.get("kind")
    if kind == "linear_point":
        return LinearPointSpec(
            A=np.asarray(doc["A"], dtype=np.float64),
            B=np.asarray(doc["B"], dtype=np.float64),
            goal=np.asarray(doc["goal"], dtype=np.float64),
            Q=np.asarray(doc["Q"], dtype=np.float64),
            Rw=np.asarray(doc["Rw"], dtype=np.float64),
            sigma_env=float(doc["sigma_env"]),
            start_low=np.asarray(doc["start_low"], dtype=np.float64),
            start_high=np.asarray(doc["start_high"], dtype=np.float64),
            horizon=int(doc["horizon"]),
        )
    if kind == "point_maze":
        return PointMazeSpec(
            walls=np.asarray(doc["walls"], dtype=np.float64),
            goal_center=np.asarray(doc["goal_center"], dtype=np.float64),
            goal_radius=float(doc["goal_radius"]),
            start=np.asarray(doc["start"], dtype=np.float64),
            start_jitter=float(doc["start_jitter"]),
            dt=float(doc["dt"]),
            action_clip=float(doc["action_clip"]),
            horizon=int(doc["horizon"]),
        )
    raise ConfigError(f"unknown environment kind: {kind!r}")
