"""Float64 tensor helpers, diagonal Gaussians and optimizers.

Reverse-mode differentiation is delegated to torch autograd; this module adds
the shape-checked primitives, distribution closed forms and parameter-block
utilities the rest of the package is written against.
"""
from __future__ import annotations

import hashlib
import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

DTYPE = torch.float64
LOG_2PI = math.log(2.0 * math.pi)

Tensor = torch.Tensor


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shape."""

    def __init__(self, primitive: str, detail: str):
        super().__init__(f"{primitive}: {detail}")
        self.primitive = primitive


def tensor(values, shape: Sequence[int] | None = None) -> Tensor:
    t = torch.as_tensor(values, dtype=DTYPE)
    if shape is not None:
        t = t.reshape(tuple(shape))
    return t


def _same_shape(primitive: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(primitive, f"shape {tuple(a.shape)} does not match {tuple(b.shape)}")


def _positive(primitive: str, std: Tensor) -> None:
    if not bool(torch.all(std > 0)):
        raise ValueError(f"{primitive}: stddev must be strictly positive")


# -- primitives ---------------------------------------------------------------

def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.shape[-1] != weight.shape[-1]:
        raise ShapeError("affine", f"input width {x.shape[-1]} != weight columns {weight.shape[-1]}")
    if bias is not None and bias.shape[-1] != weight.shape[0]:
        raise ShapeError("affine", f"bias width {bias.shape[-1]} != weight rows {weight.shape[0]}")
    return F.linear(x, weight, bias)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return a + b


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return a - b


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return a * b


def soft_clamp_std(raw: Tensor, lo: float, hi: float) -> Tensor:
    """Map an unbounded tensor monotonically into the open interval (lo, hi)."""
    if not lo < hi:
        raise ValueError(f"soft_clamp_std: need lo < hi, got {lo}, {hi}")
    return lo + (hi - lo) * torch.sigmoid(raw)


# -- distributions --------------------------------------------------------------

@dataclass
class DiagonalGaussian:
    mean: Tensor
    std: Tensor

    def __post_init__(self):
        _same_shape("DiagonalGaussian", self.mean, self.std)

    def rsample(self, generator: torch.Generator | None = None, noise: Tensor | None = None) -> Tensor:
        if noise is None:
            noise = torch.randn(self.mean.shape, dtype=self.mean.dtype, generator=generator)
        return self.mean + self.std * noise

    def log_prob(self, x: Tensor) -> Tensor:
        return gaussian_log_prob(self, x)

    def entropy(self) -> Tensor:
        return (0.5 * (LOG_2PI + 1.0) + torch.log(self.std)).sum(-1)

    def detach(self) -> "DiagonalGaussian":
        return DiagonalGaussian(self.mean.detach(), self.std.detach())

    def __getitem__(self, idx) -> "DiagonalGaussian":
        return DiagonalGaussian(self.mean[idx], self.std[idx])


def gaussian_log_prob(d: DiagonalGaussian, x: Tensor) -> Tensor:
    """Log-density summed over the last axis."""
    _same_shape("gaussian_log_prob", d.mean, x)
    _positive("gaussian_log_prob", d.std)
    z = (x - d.mean) / d.std
    return (-0.5 * LOG_2PI - torch.log(d.std) - 0.5 * z * z).sum(-1)


def gaussian_kl(p: DiagonalGaussian, q: DiagonalGaussian) -> Tensor:
    """KL(p || q) for diagonal Gaussians, summed over the last axis."""
    _same_shape("gaussian_kl", p.mean, q.mean)
    _positive("gaussian_kl", p.std)
    _positive("gaussian_kl", q.std)
    var_ratio = (p.std / q.std) ** 2
    diff = ((p.mean - q.mean) / q.std) ** 2
    return (0.5 * (var_ratio + diff - 1.0 - torch.log(var_ratio))).sum(-1)


# -- networks -------------------------------------------------------------------

class MLP(nn.Module):
    """ELU perceptron: ``layers`` hidden layers of ``hidden`` units, linear head."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int = 256, layers: int = 2):
        super().__init__()
        dims = [in_dim] + [hidden] * layers + [out_dim]
        self.linears = nn.ModuleList(
            nn.Linear(a, b, dtype=DTYPE) for a, b in zip(dims[:-1], dims[1:])
        )

    def forward(self, x: Tensor) -> Tensor:
        *hidden, head = self.linears
        for lin in hidden:
            x = F.elu(affine(x, lin.weight, lin.bias))
        return affine(x, head.weight, head.bias)


# -- parameter blocks -----------------------------------------------------------

def named_params(*modules: nn.Module, prefixes: Sequence[str] | None = None) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    prefixes = prefixes or [""] * len(modules)
    for prefix, module in zip(prefixes, modules):
        for name, p in module.named_parameters():
            key = f"{prefix}{name}"
            if key in out:
                raise ValueError(f"duplicate parameter name {key!r}")
            out[key] = p
    return out


def param_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().astype("<f8").tobytes())
    return h.hexdigest()


@contextmanager
def frozen(*modules: nn.Module) -> Iterator[None]:
    """Temporarily stop gradients from reaching the given modules' parameters."""
    saved = []
    for m in modules:
        for p in m.parameters():
            saved.append((p, p.requires_grad))
            p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad_(flag)


def forward_and_grad(
    fn: Callable[..., Tensor],
    params: Mapping[str, Tensor] | nn.Module,
    *inputs: Tensor,
) -> tuple[Tensor, dict[str, Tensor]]:
    """Evaluate a scalar ``fn(*inputs)`` and return its gradient per named parameter.

    ``params`` entries must be leaves with ``requires_grad``; parameters the value
    does not depend on receive zero gradients.
    """
    if isinstance(params, nn.Module):
        params = dict(params.named_parameters())
    value = fn(*inputs)
    if value.numel() != 1:
        raise ShapeError("forward_and_grad", f"value must be scalar, got shape {tuple(value.shape)}")
    names = list(params)
    grads = torch.autograd.grad(value, [params[n] for n in names], allow_unused=True)
    out = {
        n: torch.zeros_like(params[n]) if g is None else g
        for n, g in zip(names, grads)
    }
    return value.detach(), out


class Adam:
    """Adam over one or more modules with optional global-norm clipping."""

    def __init__(
        self,
        params: Iterable[Tensor] | nn.Module,
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        clip: float | None = None,
    ):
        if isinstance(params, nn.Module):
            params = params.parameters()
        self.params = [p for p in params]
        self.opt = torch.optim.Adam(self.params, lr=lr, betas=betas, eps=eps)
        self.clip = clip
        self.steps = 0

    def zero_grad(self) -> None:
        self.opt.zero_grad(set_to_none=True)

    def step(self) -> float:
        """Apply one update; returns the pre-clip gradient norm."""
        grads = [p.grad for p in self.params if p.grad is not None]
        norm = float(torch.linalg.vector_norm(torch.stack([g.norm() for g in grads]))) if grads else 0.0
        if self.clip is not None and grads:
            torch.nn.utils.clip_grad_norm_(self.params, self.clip)
        self.opt.step()
        self.steps += 1
        return norm

    def minimize(self, loss: Tensor) -> float:
        self.zero_grad()
        loss.backward()
        return self.step()

    def state_tensors(self) -> list[Tensor]:
        out = []
        for p in self.params:
            st = self.opt.state.get(p, {})
            out.extend(v for v in st.values() if isinstance(v, Tensor))
        return out


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Tensor],
    state: dict,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> dict[str, Tensor]:
    """Functional Adam: returns updated parameters and advances ``state`` in place.

    ``state`` holds ``step`` and per-name first/second moments; pass ``{}`` initially.
    """
    t = state.get("step", 0) + 1
    m = state.setdefault("m", {})
    v = state.setdefault("v", {})
    out = {}
    for name, p in params.items():
        g = grads[name]
        m[name] = beta1 * m.get(name, torch.zeros_like(p)) + (1 - beta1) * g
        v[name] = beta2 * v.get(name, torch.zeros_like(p)) + (1 - beta2) * g * g
        m_hat = m[name] / (1 - beta1**t)
        v_hat = v[name] / (1 - beta2**t)
        out[name] = p - lr * m_hat / (torch.sqrt(v_hat) + eps)
    state["step"] = t
    return out
