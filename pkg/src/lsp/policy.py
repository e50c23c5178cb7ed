"""Skill-conditioned actor and state-value critic."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffmath import MLP, DiagonalGaussian, Tensor, frozen
from .valueplan import ImaginedRollout, ValueConfig, td_lambda_targets

_INIT_STD = 1.0
_MIN_STD = 1e-4
_MEAN_SCALE = 5.0


class Actor(nn.Module):
    """Tanh-squashed Gaussian over actions; skills are concatenated to the features."""

    def __init__(self, feat_dim: int, skill_dim: int, act_dim: int, hidden: int = 256):
        super().__init__()
        self.feat_dim, self.skill_dim, self.act_dim = feat_dim, skill_dim, act_dim
        self.net = MLP(feat_dim + skill_dim, 2 * act_dim, hidden)
        self._std_shift = float(torch.log(torch.expm1(torch.tensor(_INIT_STD))))

    def dist(self, feat: Tensor, skill: Tensor | None) -> DiagonalGaussian:
        if self.skill_dim:
            if skill is None or skill.shape[-1] != self.skill_dim:
                got = None if skill is None else skill.shape[-1]
                raise ValueError(f"actor expects skills of dimension {self.skill_dim}, got {got}")
            feat = torch.cat([feat, skill], -1)
        raw_mean, raw_std = self.net(feat).chunk(2, -1)
        mean = _MEAN_SCALE * torch.tanh(raw_mean / _MEAN_SCALE)
        std = F.softplus(raw_std + self._std_shift) + _MIN_STD
        return DiagonalGaussian(mean, std)

    def act(
        self,
        feat: Tensor,
        skill: Tensor | None,
        mode: str = "stochastic",
        generator: torch.Generator | None = None,
    ) -> Tensor:
        d = self.dist(feat, skill)
        if mode == "mean":
            return torch.tanh(d.mean)
        if mode != "stochastic":
            raise ValueError(f"unknown action mode {mode!r}")
        return torch.tanh(d.rsample(generator))


class Critic(nn.Module):
    def __init__(self, feat_dim: int, hidden: int = 256):
        super().__init__()
        self.net = MLP(feat_dim, 1, hidden)

    def forward(self, feat: Tensor) -> Tensor:
        return self.net(feat).squeeze(-1)


def actor_loss(
    rollout: ImaginedRollout,
    critic: Critic,
    cfg: ValueConfig,
    intrinsic_weight: float = 1.0,
) -> tuple[Tensor, Tensor]:
    """Negative mean lambda-return; gradients reach the actor through the dynamics.

    The critic's parameters are held fixed, so this loss never produces critic
    gradients. Returns ``(loss, targets)``.
    """
    if not rollout.with_grad:
        raise ValueError("actor_loss needs a rollout generated with gradients enabled")
    with frozen(critic):
        targets = td_lambda_targets(rollout, critic, cfg, intrinsic_weight)
    return -targets.mean(), targets


def critic_loss(critic: Critic, feats: Tensor, targets: Tensor) -> Tensor:
    """Mean squared error against detached targets; ``feats`` covers the same steps."""
    return ((critic(feats.detach()) - targets.detach()) ** 2).mean()
