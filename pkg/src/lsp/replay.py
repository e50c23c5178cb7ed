"""Episode dataset with FIFO eviction, sequence sampling and binary persistence.

On disk each episode is its own file ``episode_<index>.bin``:

    int32 LE  format version, T, obs_dim, act_dim
    float64 LE  observations (T x obs_dim), actions (T x act_dim), rewards (T)

Row ``t`` holds the observation reached at tick ``t``, the action that led to it
(zeros on the reset row) and the reward received for that transition.
"""
from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

FORMAT_VERSION = 1
_HEADER = struct.Struct("<4i")


@dataclass
class Episode:
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64).reshape(-1)
        n = len(self.rewards)
        if self.observations.ndim != 2 or self.actions.ndim != 2:
            raise ValueError("observations and actions must be 2-D")
        if len(self.observations) != n or len(self.actions) != n:
            raise ValueError(
                f"inconsistent lengths: obs {len(self.observations)}, act {len(self.actions)}, rew {n}"
            )
        for name in ("observations", "actions", "rewards"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"episode {name} contain non-finite values")

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def total_reward(self) -> float:
        return float(self.rewards.sum())

    def equal(self, other: "Episode") -> bool:
        return all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("observations", "actions", "rewards")
        )


def write_episode(path: str | Path, ep: Episode) -> None:
    obs_dim = ep.observations.shape[1]
    act_dim = ep.actions.shape[1]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FORMAT_VERSION, len(ep), obs_dim, act_dim))
        for arr in (ep.observations, ep.actions, ep.rewards):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_episode(path: str | Path, index: int | None = None) -> Episode:
    label = f"episode {index}" if index is not None else str(path)
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{label}: truncated header")
    version, T, obs_dim, act_dim = _HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise ValueError(f"{label}: unsupported format version {version}")
    if T < 0 or obs_dim <= 0 or act_dim <= 0:
        raise ValueError(f"{label}: corrupt header {(version, T, obs_dim, act_dim)}")
    expected = _HEADER.size + 8 * T * (obs_dim + act_dim + 1)
    if len(data) != expected:
        raise ValueError(f"{label}: expected {expected} bytes, found {len(data)}")
    flat = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    o_end = T * obs_dim
    a_end = o_end + T * act_dim
    return Episode(
        flat[:o_end].reshape(T, obs_dim),
        flat[o_end:a_end].reshape(T, act_dim),
        flat[a_end:],
    )


class ReplayStore:
    def __init__(self, capacity: int = 1000, seed: int = 0):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.episodes: deque[Episode] = deque()
        self.rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return len(self.episodes)

    def add(self, ep: Episode) -> None:
        self.episodes.append(ep)
        while len(self.episodes) > self.capacity:
            self.episodes.popleft()

    def extend(self, eps: Iterable[Episode]) -> None:
        for ep in eps:
            self.add(ep)

    @property
    def num_steps(self) -> int:
        return sum(len(e) for e in self.episodes)

    def sample_sequences(self, batch: int, length: int, rng: np.random.Generator | None = None):
        """Uniform over all (episode, offset) pairs whose window fits the episode.

        Returns ``(obs, actions, rewards)`` arrays of shape ``(B, L, ...)``.
        """
        rng = rng or self.rng
        eps = list(self.episodes)
        counts = np.array([max(len(e) - length + 1, 0) for e in eps])
        if length <= 0 or counts.sum() == 0:
            longest = max((len(e) for e in eps), default=0)
            raise ValueError(
                f"no episode can supply a length-{length} sequence "
                f"({len(eps)} episodes, longest {longest})"
            )
        cum = np.cumsum(counts)
        picks = rng.integers(0, cum[-1], size=batch)
        idx = np.searchsorted(cum, picks, side="right")
        starts = picks - np.concatenate([[0], cum[:-1]])[idx]
        obs = np.stack([eps[i].observations[s : s + length] for i, s in zip(idx, starts)])
        act = np.stack([eps[i].actions[s : s + length] for i, s in zip(idx, starts)])
        rew = np.stack([eps[i].rewards[s : s + length] for i, s in zip(idx, starts)])
        return obs, act, rew

    def relabel(self, target) -> None:
        from .envs import relabel_reward

        self.episodes = deque(relabel_reward(e, target) for e in self.episodes)

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for old in directory.glob("episode_*.bin"):
            old.unlink()
        for i, ep in enumerate(self.episodes):
            write_episode(directory / f"episode_{i:06d}.bin", ep)

    @classmethod
    def load(cls, directory: str | Path, capacity: int = 1000, seed: int = 0) -> "ReplayStore":
        directory = Path(directory)
        if not directory.is_dir():
            raise FileNotFoundError(f"replay directory {directory} not found")
        store = cls(capacity, seed)
        for i, path in enumerate(sorted(directory.glob("episode_*.bin"))):
            store.add(read_episode(path, index=i))
        return store
