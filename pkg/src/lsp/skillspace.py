"""Skill distribution, cross-entropy planning over skill sequences and MPC selection."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .diffmath import DTYPE, DiagonalGaussian, Tensor
from .valueplan import ValueConfig, imagine_rollout, num_windows, score_rollout
from .worldmodel import LatentState


@dataclass
class SkillDistribution:
    mean: Tensor  # (W, d_z)
    var: Tensor  # (W, d_z)

    def __post_init__(self):
        if self.mean.shape != self.var.shape:
            raise ValueError("mean and variance shapes differ")
        if bool(torch.any(self.var < 0)):
            raise ValueError("negative variance")

    @property
    def windows(self) -> int:
        return self.mean.shape[0]

    def first_window(self) -> DiagonalGaussian:
        return DiagonalGaussian(self.mean[0], self.var[0].clamp_min(1e-300).sqrt())

    def entropy_per_window(self) -> Tensor:
        return (0.5 * torch.log(2 * math.pi * math.e * self.var)).sum(-1)

    def clone(self) -> "SkillDistribution":
        return SkillDistribution(self.mean.clone(), self.var.clone())


@dataclass
class PlannerConfig:
    skill_dim: int = 3
    skill_len: int = 10
    horizon: int = 10
    population: int = 16
    elites: int = 4
    cem_iters: int = 4
    mean_noise: float = 0.1
    var_floor: float = 1e-6
    init_mean: float = 0.0
    init_var: float = 1.0

    def __post_init__(self):
        for name in ("skill_dim", "skill_len", "horizon", "population", "elites", "cem_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.elites > self.population:
            raise ValueError(f"elites ({self.elites}) exceed population ({self.population})")
        if self.skill_len > self.horizon:
            raise ValueError(f"skill_len ({self.skill_len}) exceeds horizon ({self.horizon})")
        if self.mean_noise < 0 or self.init_var <= 0:
            raise ValueError("mean_noise must be >= 0 and init_var > 0")

    @property
    def windows(self) -> int:
        return num_windows(self.horizon, self.skill_len)

    def initial(self) -> SkillDistribution:
        shape = (self.windows, self.skill_dim)
        return SkillDistribution(
            torch.full(shape, self.init_mean, dtype=DTYPE),
            torch.full(shape, self.init_var, dtype=DTYPE),
        )


def sample_skills(dist: SkillDistribution, count: int, generator: torch.Generator | None = None) -> Tensor:
    """``count`` i.i.d. skill sequences, shape ``(count, W, d_z)``."""
    if count < 1:
        raise ValueError("count must be positive")
    eps = torch.randn((count, *dist.mean.shape), dtype=DTYPE, generator=generator)
    return dist.mean + dist.var.sqrt() * eps


def elite_indices(scores, elites: int) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if elites > len(scores):
        raise ValueError(f"elites ({elites}) exceed population ({len(scores)})")
    if elites < 1:
        raise ValueError("elites must be positive")
    return np.argsort(-scores, kind="stable")[:elites]


def cem_update(skills: Tensor, scores, elites: int) -> SkillDistribution:
    """Refit to the top-``elites`` sequences: elementwise mean and population variance.

    Ties in score go to the earlier sample.
    """
    top = skills[torch.as_tensor(elite_indices(scores, elites))]
    mean = top.mean(0)
    return SkillDistribution(mean, ((top - mean) ** 2).mean(0))


def inject_mean_noise(
    dist: SkillDistribution,
    sigma: float,
    generator: torch.Generator | None = None,
    var_floor: float = 1e-6,
) -> SkillDistribution:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    mean = dist.mean
    if sigma > 0:
        mean = mean + sigma * torch.randn(mean.shape, dtype=DTYPE, generator=generator)
    return SkillDistribution(mean.clone(), dist.var.clamp_min(var_floor))


@dataclass
class PlanResult:
    dist: SkillDistribution
    best_values: list[float] = field(default_factory=list)
    elite_values: list[float] = field(default_factory=list)


def cem(
    cfg: PlannerConfig,
    score_fn: Callable[[Tensor], Tensor],
    generator: torch.Generator | None = None,
    init: SkillDistribution | None = None,
) -> PlanResult:
    """Cross-entropy search over skill sequences for a black-box ``score_fn``.

    ``score_fn`` maps ``(G, W, d_z)`` candidates to ``(G,)`` scores (higher is better).
    """
    dist = (init or cfg.initial()).clone()
    result = PlanResult(dist)
    skills = sample_skills(dist, cfg.population, generator)
    for _ in range(cfg.cem_iters):
        scores = score_fn(skills).detach().reshape(-1)
        if scores.shape[0] != cfg.population:
            raise ValueError(f"score_fn returned {scores.shape[0]} scores for {cfg.population} candidates")
        dist = cem_update(skills, scores.numpy(), cfg.elites)
        top = np.sort(scores.numpy())[::-1][: cfg.elites]
        result.best_values.append(float(top[0]))
        result.elite_values.append(float(top.mean()))
        skills = sample_skills(dist, cfg.population, generator)
    result.dist = dist
    return result


def plan(
    cfg: PlannerConfig,
    starts: LatentState,
    actor,
    model,
    critic,
    value_cfg: ValueConfig,
    generator: torch.Generator | None = None,
    init: SkillDistribution | None = None,
) -> PlanResult:
    """CEM in skill space, scoring each candidate by its value averaged over start states."""
    n = starts.deter.shape[0]

    def score(skills: Tensor) -> Tensor:
        G = skills.shape[0]
        batch = LatentState(starts.deter.repeat(G, 1), starts.stoch.repeat(G, 1))
        z = skills.repeat_interleave(n, 0)
        with torch.no_grad():
            roll = imagine_rollout(batch, z, actor, model, cfg.horizon, cfg.skill_len, generator)
            v = score_rollout(roll, critic, value_cfg)
        return v.reshape(G, n).mean(1)

    return cem(cfg, score, generator, init)


class SkillScheduler:
    """Receding-horizon skill choice: draw a new plan every ``skill_len`` steps, keep its first skill."""

    def __init__(self, skill_len: int, generator: torch.Generator | None = None):
        if skill_len < 1:
            raise ValueError("skill_len must be positive")
        self.skill_len = skill_len
        self.generator = generator
        self.current: Tensor | None = None

    def due(self, t: int) -> bool:
        return t % self.skill_len == 0

    def select(self, dist: SkillDistribution | None, t: int) -> Tensor:
        if t < 0:
            raise ValueError("t must be non-negative")
        if self.due(t):
            if dist is None:
                raise ValueError("a skill distribution is required at a resampling step")
            self.current = sample_skills(dist, 1, self.generator)[0, 0]
        elif self.current is None:
            raise RuntimeError(f"no skill selected yet (t={t} is not a resampling step)")
        return self.current


def mpc_select(scheduler: SkillScheduler, dist: SkillDistribution | None, t: int) -> Tensor:
    return scheduler.select(dist, t)
