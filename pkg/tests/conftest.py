import numpy as np
import pytest
import torch

from lsp.diffmath import DTYPE
from lsp.config import TrainConfig


def central_fd(fn, param: torch.Tensor, index: tuple, h: float = 1e-6) -> float:
    """Central finite difference of scalar ``fn()`` w.r.t. one parameter entry."""
    with torch.no_grad():
        orig = param[index].item()
        param[index] = orig + h
        up = float(fn())
        param[index] = orig - h
        down = float(fn())
        param[index] = orig
    return (up - down) / (2 * h)


def rel_err(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def random_coords(params: dict, n: int, rng: np.random.Generator):
    names = list(params)
    sizes = np.array([params[k].numel() for k in names], dtype=float)
    out = []
    for _ in range(n):
        k = names[rng.choice(len(names), p=sizes / sizes.sum())]
        flat = int(rng.integers(params[k].numel()))
        out.append((k, np.unravel_index(flat, params[k].shape)))
    return out


@pytest.fixture
def tiny_cfg() -> TrainConfig:
    return TrainConfig(
        total_steps=240,
        episode_len=40,
        seed_episodes=2,
        batch_size=4,
        seq_len=8,
        train_every=20,
        deter_dim=8,
        stoch_dim=4,
        model_hidden=16,
        hidden=16,
        population=6,
        elites=2,
        cem_iters=2,
        horizon=6,
        skill_len=3,
        plan_starts=2,
        imag_starts=8,
        checkpoint_every=120,
    )


def t64(x):
    return torch.as_tensor(x, dtype=DTYPE)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
