"""Backward skill predictor, intrinsic reward and the mutual-information bound."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .diffmath import MLP, DiagonalGaussian, Tensor, frozen, gaussian_log_prob
from .valueplan import ImaginedRollout
from .worldmodel import MAX_STD, MIN_STD, _split_gaussian


class SkillPredictor(nn.Module):
    """q(z | window, s0): start-state features concatenated with the window mean."""

    def __init__(self, feat_dim: int, skill_dim: int, hidden: int = 256, input_noise: float = 0.1):
        super().__init__()
        if input_noise < 0:
            raise ValueError("input_noise must be non-negative")
        self.feat_dim, self.skill_dim = feat_dim, skill_dim
        self.input_noise = input_noise
        self.net = MLP(2 * feat_dim, 2 * skill_dim, hidden)

    def encode(self, window: Tensor, s0: Tensor) -> Tensor:
        if window.shape[-1] != self.feat_dim or s0.shape[-1] != self.feat_dim:
            raise ValueError(
                f"skill predictor expects features of width {self.feat_dim}, "
                f"got window {window.shape[-1]} / s0 {s0.shape[-1]}"
            )
        return torch.cat([s0, window.mean(-2)], -1)

    def forward(
        self,
        window: Tensor,
        s0: Tensor,
        noise_std: float = 0.0,
        generator: torch.Generator | None = None,
    ) -> DiagonalGaussian:
        x = self.encode(window, s0)
        if noise_std > 0:
            x = x + noise_std * torch.randn(x.shape, dtype=x.dtype, generator=generator)
        return _split_gaussian(self.net(x), MIN_STD, MAX_STD)


def intrinsic_reward(predictor: SkillPredictor, window: Tensor, s0: Tensor, z: Tensor) -> Tensor:
    """log q(z | window, s0); differentiable in the states, never in the predictor."""
    if z.shape[-1] != predictor.skill_dim:
        raise ValueError(f"skill dimension {z.shape[-1]} != predictor's {predictor.skill_dim}")
    with frozen(predictor):
        return gaussian_log_prob(predictor(window, s0), z)


def window_intrinsic_rewards(rollout: ImaginedRollout, predictor: SkillPredictor) -> Tensor:
    """One reward per skill window, copied onto each step of that window. Shape ``(H, N)``."""
    feats = rollout.feats()
    per_step = []
    for j, (a, b) in enumerate(rollout.windows):
        r = intrinsic_reward(predictor, feats[a + 1 : b + 1].transpose(0, 1), feats[a], rollout.skills[:, j])
        per_step.extend([r] * (b - a))
    return torch.stack(per_step)


@dataclass
class SkillSamples:
    """Detached (window, s0, z) triples sharing one window length."""

    window: Tensor  # (N, k, F)
    s0: Tensor  # (N, F)
    z: Tensor  # (N, d_z)

    def __len__(self) -> int:
        return self.z.shape[0]


def rollout_samples(rollout: ImaginedRollout) -> list[SkillSamples]:
    feats = rollout.feats().detach()
    out = []
    for j, (a, b) in enumerate(rollout.windows):
        out.append(SkillSamples(feats[a + 1 : b + 1].transpose(0, 1), feats[a], rollout.skills[:, j].detach()))
    return out


def predictor_loss(
    predictor: SkillPredictor,
    samples: list[SkillSamples],
    generator: torch.Generator | None = None,
    noise_std: float | None = None,
) -> Tensor:
    """Negative mean log-likelihood of the true skills under input-noised features."""
    noise_std = predictor.input_noise if noise_std is None else noise_std
    lls = [
        gaussian_log_prob(predictor(s.window.detach(), s.s0.detach(), noise_std, generator), s.z)
        for s in samples
    ]
    return -torch.cat(lls).mean()


def mi_lower_bound_estimate(
    predictor: SkillPredictor,
    samples: list[SkillSamples],
    skill_dist: DiagonalGaussian,
) -> tuple[float, float]:
    """Monte-Carlo E[log q(z|window,s0)] plus the closed-form skill entropy.

    Returns ``(estimate, standard_error)``.
    """
    with torch.no_grad():
        ll = torch.cat([gaussian_log_prob(predictor(s.window, s.s0), s.z) for s in samples])
        entropy = float(skill_dist.entropy().mean())
    n = ll.numel()
    se = float(ll.std(unbiased=True) / n**0.5) if n > 1 else float("inf")
    return float(ll.mean()) + entropy, se
