"""Imagined rollouts, TD(lambda) targets and rollout scoring."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .diffmath import Tensor
from .worldmodel import LatentState, WorldModel


@dataclass
class ValueConfig:
    gamma: float = 0.99
    lam: float = 0.95
    horizon: int = 10

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")


def skill_windows(horizon: int, skill_len: int) -> list[tuple[int, int]]:
    """Half-open step ranges during which one skill is held."""
    if horizon < 1 or not 1 <= skill_len <= horizon:
        raise ValueError(f"need 1 <= K <= H, got K={skill_len}, H={horizon}")
    return [(a, min(a + skill_len, horizon)) for a in range(0, horizon, skill_len)]


def num_windows(horizon: int, skill_len: int) -> int:
    return math.ceil(horizon / skill_len)


@dataclass
class ImaginedRollout:
    states: list[LatentState]  # H + 1 entries, each batched over N
    actions: list[Tensor]
    rewards: Tensor  # (H, N) predicted task rewards
    intrinsic: Tensor  # (H, N)
    skills: Tensor | None  # (N, W, d_z)
    windows: list[tuple[int, int]]
    with_grad: bool = True

    @property
    def horizon(self) -> int:
        return len(self.actions)

    def feats(self) -> Tensor:
        return torch.stack([s.feat for s in self.states])

    @property
    def skill_switches(self) -> int:
        return len(self.windows) - 1


def imagine_rollout(
    start: LatentState,
    skills: Tensor | None,
    actor,
    model: WorldModel,
    horizon: int,
    skill_len: int,
    generator: torch.Generator | None = None,
    mode: str = "stochastic",
) -> ImaginedRollout:
    """Roll ``actor`` forward inside ``model`` from each start state.

    ``skills`` has shape ``(N, ceil(H/K), d_z)``; window ``j`` is active for steps
    ``[jK, (j+1)K)``. Pass ``None`` for a skill-free actor.
    """
    windows = skill_windows(horizon, skill_len)
    if skills is not None and skills.shape[1] != len(windows):
        raise ValueError(f"expected {len(windows)} skill windows, got {skills.shape[1]}")
    states = [start]
    actions = []
    for j, (a, b) in enumerate(windows):
        z = None if skills is None else skills[:, j]
        for _ in range(a, b):
            act = actor.act(states[-1].feat, z, mode=mode, generator=generator)
            actions.append(act)
            states.append(model.imagine_step(states[-1], act, generator))
    rewards = model.reward(LatentState.stack(states[1:]))
    return ImaginedRollout(
        states=states,
        actions=actions,
        rewards=rewards,
        intrinsic=torch.zeros_like(rewards),
        skills=skills,
        windows=windows,
        with_grad=torch.is_grad_enabled(),
    )


def td_lambda(rewards: Tensor, values: Tensor, gamma: float, lam: float) -> Tensor:
    """Lambda-returns for every step of a length-H reward sequence.

    ``rewards`` is ``(H, ...)``, ``values`` is ``(H + 1, ...)`` with the bootstrap
    value of the final state last.
    """
    H = rewards.shape[0]
    if values.shape[0] != H + 1:
        raise ValueError(f"need H+1={H + 1} values, got {values.shape[0]}")
    out = [None] * H
    nxt = values[H]
    for t in reversed(range(H)):
        nxt = rewards[t] + gamma * ((1.0 - lam) * values[t + 1] + lam * nxt)
        out[t] = nxt
    return torch.stack(out)


def td_lambda_targets(
    rollout: ImaginedRollout,
    critic,
    cfg: ValueConfig,
    intrinsic_weight: float = 1.0,
) -> Tensor:
    rewards = rollout.rewards + intrinsic_weight * rollout.intrinsic
    values = critic(rollout.feats())
    return td_lambda(rewards, values, cfg.gamma, cfg.lam)


def score_rollout(rollout: ImaginedRollout, critic, cfg: ValueConfig, include_intrinsic: bool = False) -> Tensor:
    """Value estimate of each rollout's first state (one score per batch entry).

    Planning scores use task rewards only; ``include_intrinsic`` switches to the
    total reward used for policy targets.
    """
    weight = 1.0 if include_intrinsic else 0.0
    return td_lambda_targets(rollout, critic, cfg, intrinsic_weight=weight)[0]
