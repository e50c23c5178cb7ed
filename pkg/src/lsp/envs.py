"""Point-mass navigation tasks: run, dense reach and the sparse obstacle cove.

Units are meters and seconds. Actions are force commands in [-1, 1]^2 and are
projected onto the unit disc, so the drag law bounds the speed by 1/drag.
Observations are ``(p_x, p_y, v_x, v_y, goal_x - p_x, goal_y - p_y)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

TASKS = ("run", "reach", "cove")
OBS_DIM = 6
ACT_DIM = 2
_PROJECTION_PASSES = 8


@dataclass(frozen=True)
class EnvSpec:
    task: str = "reach"
    goal: tuple[float, float] = (4.0, 0.0)
    goal_radius: float = 0.5
    start: tuple[float, float] = (0.0, 0.0)
    obstacles: tuple[tuple[float, float, float], ...] = ()
    arena: float = 5.0
    dt: float = 0.05
    drag: float = 0.5
    episode_len: int = 200

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {', '.join(TASKS)}")
        if self.dt <= 0 or self.drag <= 0 or self.arena <= 0 or self.episode_len <= 0:
            raise ValueError("dt, drag, arena and episode_len must be positive")
        for x, y, r in self.obstacles:
            if max(abs(x), abs(y)) + r > self.arena:
                raise ValueError(f"obstacle at ({x}, {y}) leaves the arena")
        if max(abs(self.goal[0]), abs(self.goal[1])) > self.arena:
            raise ValueError("goal outside arena")

    @property
    def v_max(self) -> float:
        return 1.0 / self.drag

    @property
    def diag(self) -> float:
        return 2.0 * math.sqrt(2.0) * self.arena


def cove_obstacles(
    center: tuple[float, float] = (1.0, 0.0),
    arc_radius: float = 1.5,
    half_angle_deg: float = 80.0,
    count: int = 9,
    radius: float = 0.5,
) -> tuple[tuple[float, float, float], ...]:
    """Discs along an arc bulging toward +x, so the pocket opens away from the goal."""
    angles = np.linspace(-math.radians(half_angle_deg), math.radians(half_angle_deg), count)
    return tuple(
        (round(center[0] + arc_radius * math.cos(a), 12), round(center[1] + arc_radius * math.sin(a), 12), radius)
        for a in angles
    )


def make_spec(task: str, **overrides) -> EnvSpec:
    if task == "cove":
        overrides.setdefault("obstacles", cove_obstacles())
    return replace(EnvSpec(task=task), **overrides)


@dataclass
class PointMassState:
    position: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def copy(self) -> "PointMassState":
        return PointMassState(self.position.copy(), self.velocity.copy())


def observe(spec: EnvSpec, state: PointMassState) -> np.ndarray:
    goal = np.asarray(spec.goal, dtype=np.float64)
    return np.concatenate([state.position, state.velocity, goal - state.position])


def state_from_obs(obs: np.ndarray) -> PointMassState:
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape[-1] < 4:
        raise ValueError(f"observation has {obs.shape[-1]} fields; position and velocity need 4")
    return PointMassState(obs[..., 0:2].copy(), obs[..., 2:4].copy())


def _resolve_collisions(spec: EnvSpec, p: np.ndarray, v: np.ndarray):
    for _ in range(_PROJECTION_PASSES):
        hit = False
        for cx, cy, r in spec.obstacles:
            d = p - (cx, cy)
            dist = math.hypot(d[0], d[1])
            if dist < r:
                hit = True
                n = d / dist if dist > 1e-12 else -v / max(np.linalg.norm(v), 1e-12)
                if not np.any(n):
                    n = np.array([-1.0, 0.0])
                p = np.array([cx, cy]) + r * n
                vn = float(v @ n)
                if vn < 0:
                    v = v - vn * n
        if not hit:
            return p, v, True
    return p, v, not any(math.hypot(p[0] - cx, p[1] - cy) < r for cx, cy, r in spec.obstacles)


def env_step(spec: EnvSpec, state: PointMassState, action: Sequence[float]):
    """Advance one tick. Returns ``(next_state, reward, observation)``."""
    a = np.asarray(action, dtype=np.float64)
    if a.shape != (ACT_DIM,) or not np.all(np.isfinite(a)):
        raise ValueError(f"action must be a finite 2-vector, got {action!r}")
    a = np.clip(a, -1.0, 1.0)
    norm = math.hypot(a[0], a[1])
    if norm > 1.0:
        a = a / norm
    v = state.velocity + spec.dt * (a - spec.drag * state.velocity)
    p = state.position + spec.dt * v
    for axis in range(2):
        if abs(p[axis]) > spec.arena:
            p[axis] = math.copysign(spec.arena, p[axis])
            v[axis] = 0.0
    if spec.obstacles:
        p, v, ok = _resolve_collisions(spec, p, v)
        if not ok:
            p, v = state.position.copy(), np.zeros(2)
    nxt = PointMassState(p, v)
    return nxt, reward_fn(spec, nxt, a), observe(spec, nxt)


def reward_fn(spec: EnvSpec, state: PointMassState, action=None) -> float:
    if spec.task == "run":
        return float(np.clip(state.velocity[0], 0.0, spec.v_max) / spec.v_max)
    dist = float(np.linalg.norm(state.position - np.asarray(spec.goal)))
    if spec.task == "reach":
        return float(np.clip(1.0 - dist / spec.diag, 0.0, 1.0))
    if spec.task == "cove":
        return 1.0 if dist <= spec.goal_radius else 0.0
    raise ValueError(f"unknown task {spec.task!r}")


def in_goal(spec: EnvSpec, position) -> bool:
    return float(np.linalg.norm(np.asarray(position) - np.asarray(spec.goal))) <= spec.goal_radius


class PointMassEnv:
    def __init__(self, spec: EnvSpec):
        self.spec = spec
        self.state: PointMassState | None = None
        self.t = 0

    def reset(self) -> np.ndarray:
        self.state = PointMassState(np.asarray(self.spec.start, dtype=np.float64).copy())
        self.t = 0
        return observe(self.spec, self.state)

    def step(self, action):
        if self.state is None:
            raise RuntimeError("reset() before step()")
        self.state, reward, obs = env_step(self.spec, self.state, action)
        self.t += 1
        return obs, reward, self.t >= self.spec.episode_len


# -- transfer relabeling --------------------------------------------------------

def relabel_reward(episode, target: EnvSpec):
    """Return a copy of ``episode`` whose rewards are recomputed for ``target``.

    Row ``t`` stores the observation reached at ``t`` together with the action that
    produced it, so the reward is a function of that row alone.
    """
    from .replay import Episode

    obs = episode.observations
    if len(obs) and obs.shape[1] < 4:
        raise ValueError(f"observations have {obs.shape[1]} fields; target reward needs position and velocity")
    rewards = np.array(
        [reward_fn(target, state_from_obs(o), a) for o, a in zip(obs, episode.actions)],
        dtype=np.float64,
    )
    return Episode(obs.copy(), episode.actions.copy(), rewards.reshape(len(obs)), dict(episode.meta))


# -- trajectory dumps -----------------------------------------------------------

TRAJ_HEADER = "episode t p_x p_y v_x v_y a_x a_y r skill_change"


def write_trajectories(path: str | Path, rows: Sequence[Sequence[float]]) -> None:
    """Plain-text rows; ``p``/``v`` are the state after applying ``a`` at tick ``t``."""
    with open(path, "w") as fh:
        fh.write("# " + TRAJ_HEADER + "\n")
        for row in rows:
            ep, t, *vals, change = row
            fh.write(f"{int(ep)} {int(t)} " + " ".join(repr(float(x)) for x in vals) + f" {int(change)}\n")


def read_trajectories(path: str | Path) -> np.ndarray:
    return np.loadtxt(path, comments="#", ndmin=2)


def success_from_trajectories(spec: EnvSpec, rows: np.ndarray) -> float:
    if len(rows) == 0:
        return 0.0
    episodes = np.unique(rows[:, 0])
    hits = 0
    for ep in episodes:
        pos = rows[rows[:, 0] == ep][:, 2:4]
        hits += bool(np.any(np.linalg.norm(pos - np.asarray(spec.goal), axis=1) <= spec.goal_radius))
    return hits / len(episodes)
