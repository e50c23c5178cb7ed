"""Latent dynamics model: encoder, recurrent transition, decoder and reward head."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffmath import (
    DTYPE,
    MLP,
    DiagonalGaussian,
    Tensor,
    gaussian_kl,
    gaussian_log_prob,
    soft_clamp_std,
)

MIN_STD = 0.1
MAX_STD = 1.5


@dataclass
class LatentState:
    deter: Tensor
    stoch: Tensor
    posterior: DiagonalGaussian | None = None

    @property
    def feat(self) -> Tensor:
        return torch.cat([self.deter, self.stoch], -1)

    def detach(self) -> "LatentState":
        post = self.posterior.detach() if self.posterior is not None else None
        return LatentState(self.deter.detach(), self.stoch.detach(), post)

    def __getitem__(self, idx) -> "LatentState":
        post = self.posterior[idx] if self.posterior is not None else None
        return LatentState(self.deter[idx], self.stoch[idx], post)

    @staticmethod
    def stack(states: list["LatentState"], dim: int = 0) -> "LatentState":
        return LatentState(
            torch.stack([s.deter for s in states], dim),
            torch.stack([s.stoch for s in states], dim),
        )

    def flatten(self) -> "LatentState":
        return LatentState(
            self.deter.reshape(-1, self.deter.shape[-1]),
            self.stoch.reshape(-1, self.stoch.shape[-1]),
        )


@dataclass
class ModelOutputs:
    prior: DiagonalGaussian
    posterior: DiagonalGaussian
    obs_dist: DiagonalGaussian
    reward_dist: DiagonalGaussian


def _split_gaussian(raw: Tensor, lo: float = MIN_STD, hi: float = MAX_STD) -> DiagonalGaussian:
    mean, std_raw = raw.chunk(2, -1)
    return DiagonalGaussian(mean, soft_clamp_std(std_raw, lo, hi))


class WorldModel(nn.Module):
    def __init__(self, obs_dim: int, act_dim: int, deter: int = 64, stoch: int = 16, hidden: int = 256):
        super().__init__()
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.deter_dim, self.stoch_dim, self.hidden = deter, stoch, hidden
        self.encoder = MLP(obs_dim, hidden, hidden)
        self.img_in = nn.Linear(stoch + act_dim, hidden, dtype=DTYPE)
        self.cell = nn.GRUCell(hidden, deter, dtype=DTYPE)
        self.prior_net = MLP(deter, 2 * stoch, hidden, layers=1)
        self.post_net = MLP(deter + hidden, 2 * stoch, hidden, layers=1)
        self.decoder = MLP(deter + stoch, 2 * obs_dim, hidden)
        self.reward_head = MLP(deter + stoch, 1, hidden)

    @property
    def feat_dim(self) -> int:
        return self.deter_dim + self.stoch_dim

    def dims(self) -> dict[str, int]:
        return {
            "obs_dim": self.obs_dim,
            "act_dim": self.act_dim,
            "deter_dim": self.deter_dim,
            "stoch_dim": self.stoch_dim,
            "model_hidden": self.hidden,
        }

    def initial(self, batch: int) -> LatentState:
        return LatentState(
            torch.zeros(batch, self.deter_dim, dtype=DTYPE),
            torch.zeros(batch, self.stoch_dim, dtype=DTYPE),
        )

    def _advance(self, prev: LatentState, action: Tensor) -> Tensor:
        x = F.elu(self.img_in(torch.cat([prev.stoch, action], -1)))
        return self.cell(x, prev.deter)

    def prior(self, deter: Tensor) -> DiagonalGaussian:
        return _split_gaussian(self.prior_net(deter))

    def observe_step(
        self,
        prev: LatentState,
        action: Tensor,
        obs: Tensor,
        generator: torch.Generator | None = None,
        noise: Tensor | None = None,
    ) -> tuple[LatentState, ModelOutputs]:
        """Filter one step: prior from ``(prev, action)``, posterior also sees ``obs``."""
        if action.shape[-1] != self.act_dim or obs.shape[-1] != self.obs_dim:
            raise ValueError(
                f"observe_step: expected action/obs widths {self.act_dim}/{self.obs_dim}, "
                f"got {action.shape[-1]}/{obs.shape[-1]}"
            )
        if not (torch.isfinite(action).all() and torch.isfinite(obs).all()):
            raise ValueError("observe_step: non-finite action or observation")
        state, prior = self._filter(prev, action, self.encoder(obs), generator, noise)
        return state, ModelOutputs(prior, state.posterior, self.obs_dist(state), self.reward_dist(state))

    def _filter(self, prev, action, embed, generator, noise) -> tuple[LatentState, DiagonalGaussian]:
        deter = self._advance(prev, action)
        prior = self.prior(deter)
        posterior = _split_gaussian(self.post_net(torch.cat([deter, embed], -1)))
        stoch = posterior.rsample(generator, noise)
        return LatentState(deter, stoch, posterior), prior

    def imagine_step(
        self,
        prev: LatentState,
        action: Tensor,
        generator: torch.Generator | None = None,
        noise: Tensor | None = None,
    ) -> LatentState:
        deter = self._advance(prev, action)
        prior = self.prior(deter)
        return LatentState(deter, prior.rsample(generator, noise), prior)

    def obs_dist(self, state: LatentState) -> DiagonalGaussian:
        return _split_gaussian(self.decoder(state.feat))

    def reward_dist(self, state: LatentState) -> DiagonalGaussian:
        mean = self.reward_head(state.feat)
        return DiagonalGaussian(mean, torch.ones_like(mean))

    def reward(self, state: LatentState) -> Tensor:
        return self.reward_head(state.feat).squeeze(-1)

    def observe(
        self,
        obs: Tensor,
        actions: Tensor,
        generator: torch.Generator | None = None,
        noise: Tensor | None = None,
    ) -> tuple[list[LatentState], list[ModelOutputs]]:
        """Filter ``(B, L, ...)`` sequences from the zero state.

        Same result as chaining ``observe_step``, with the encoder and the output
        heads evaluated once over the whole sequence.
        """
        if not (torch.isfinite(actions).all() and torch.isfinite(obs).all()):
            raise ValueError("observe: non-finite action or observation")
        B, L = obs.shape[:2]
        embed = self.encoder(obs)
        state = self.initial(B)
        states, priors = [], []
        for t in range(L):
            state, prior = self._filter(
                state, actions[:, t], embed[:, t], generator, None if noise is None else noise[t]
            )
            states.append(state)
            priors.append(prior)
        seq = LatentState.stack(states, 1)
        obs_all = self.obs_dist(seq)
        rew_all = self.reward_dist(seq)
        outs = [
            ModelOutputs(priors[t], states[t].posterior, obs_all[:, t], rew_all[:, t]) for t in range(L)
        ]
        return states, outs


def vib_loss(
    model: WorldModel,
    obs: Tensor,
    actions: Tensor,
    rewards: Tensor,
    beta: float = 1.0,
    generator: torch.Generator | None = None,
    noise: Tensor | None = None,
    posterior_as_prior: bool = False,
) -> tuple[Tensor, dict[str, float], list[LatentState]]:
    """Negative VIB objective, summed over time and averaged over the batch.

    ``noise`` (shape ``(L, B, stoch)``) freezes the reparameterization draws.
    ``posterior_as_prior`` replaces each prior by its posterior, zeroing the KL term.
    """
    if obs.ndim != 3 or obs.shape[0] == 0 or obs.shape[1] == 0:
        raise ValueError("vib_loss: empty or malformed batch")
    states, outs = model.observe(obs, actions, generator, noise)
    j_obs = torch.stack([gaussian_log_prob(o.obs_dist, obs[:, t]) for t, o in enumerate(outs)], 1)
    j_rew = torch.stack(
        [gaussian_log_prob(o.reward_dist, rewards[:, t, None]) for t, o in enumerate(outs)], 1
    )
    kl = torch.stack(
        [
            gaussian_kl(o.posterior, o.posterior if posterior_as_prior else o.prior)
            for o in outs
        ],
        1,
    )
    j_div = -beta * kl
    loss = -(j_obs + j_rew + j_div).sum(1).mean()
    info = {
        "obs_ll": float(j_obs.detach().sum(1).mean()),
        "reward_ll": float(j_rew.detach().sum(1).mean()),
        "kl": float(kl.detach().sum(1).mean()),
        "reward_mse": float(((torch.cat([o.reward_dist.mean for o in outs], -1).detach() - rewards) ** 2).mean()),
    }
    return loss, info, states


# -- checkpoints ----------------------------------------------------------------

CHECKPOINT_MAGIC = b"LSPCKPT\x00"
CHECKPOINT_VERSION = 1


def _pack_name(name: str) -> bytes:
    raw = name.encode()
    return struct.pack("<i", len(raw)) + raw


def save_checkpoint(path: str | Path, dims: Mapping[str, int], entries: Mapping[str, Tensor]) -> None:
    """Header (magic, version, named integer dims) then named little-endian float64 arrays."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<ii", CHECKPOINT_VERSION, len(dims))]
    for k, v in dims.items():
        parts.append(_pack_name(k) + struct.pack("<q", int(v)))
    parts.append(struct.pack("<i", len(entries)))
    for name, t in entries.items():
        arr = t.detach().cpu().numpy().astype("<f8")
        parts.append(_pack_name(name) + struct.pack(f"<i{arr.ndim}i", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> tuple[dict[str, int], dict[str, Tensor]]:
    import numpy as np

    data = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise ValueError(f"checkpoint {path}: truncated at byte {pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    def name() -> str:
        (n,) = struct.unpack("<i", take(4))
        if n < 0 or n > 4096:
            raise ValueError(f"checkpoint {path}: corrupt name length {n}")
        return take(n).decode()

    if take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise ValueError(f"checkpoint {path}: bad magic")
    version, ndims = struct.unpack("<ii", take(8))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint {path}: unsupported version {version}")
    dims = {}
    for _ in range(ndims):
        k = name()
        (dims[k],) = struct.unpack("<q", take(8))
    (count,) = struct.unpack("<i", take(4))
    entries = {}
    for _ in range(count):
        k = name()
        (nd,) = struct.unpack("<i", take(4))
        shape = struct.unpack(f"<{nd}i", take(4 * nd))
        n = int(np.prod(shape)) if nd else 1
        arr = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape)
        entries[k] = torch.tensor(arr, dtype=DTYPE)
    if pos != len(data):
        raise ValueError(f"checkpoint {path}: {len(data) - pos} trailing bytes")
    return dims, entries
