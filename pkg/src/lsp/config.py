"""Flat ``key = value`` configuration shared by the training, transfer and eval workflows."""
from __future__ import annotations

from dataclasses import MISSING, asdict, dataclass, field, fields, replace
from pathlib import Path

from .envs import TASKS, EnvSpec, make_spec
from .skillspace import PlannerConfig
from .valueplan import ValueConfig

VARIANTS = ("lsp", "no_mi", "random_skills", "flat_amortized")
TRANSFER_REPLAY = ("keep", "relabel", "fresh")


def _key(default, doc: str):
    return field(default=default, metadata={"doc": doc})


@dataclass(frozen=True)
class TrainConfig:
    # run
    task: str = _key("reach", f"environment task ({' | '.join(TASKS)})")
    variant: str = _key("lsp", f"agent variant ({' | '.join(VARIANTS)})")
    seed: int = _key(0, "master seed for parameters, environment and sampling")
    total_steps: int = _key(50000, "environment-step budget, seed episodes included")
    train_every: int = _key(5, "environment steps per training round")
    updates_per_round: int = _key(1, "update steps C per training round")
    batch_size: int = _key(32, "sequences B per model batch")
    seq_len: int = _key(32, "sequence length L per model batch")
    seed_episodes: int = _key(5, "uniform-random episodes S collected before training")
    replay_capacity: int = _key(1000, "replay capacity in episodes (FIFO eviction)")
    checkpoint_every: int = _key(5000, "environment steps between checkpoints (0 = final only)")
    eval_every: int = _key(0, "environment steps between evaluations (0 = never)")
    eval_episodes: int = _key(1, "episodes per periodic evaluation")
    workers: int = _key(1, "torch intra-op threads; 1 forces the deterministic mode")
    # environment
    episode_len: int = _key(200, "episode length T in ticks")
    dt: float = _key(0.05, "integration step in seconds")
    drag: float = _key(0.5, "linear drag coefficient c")
    arena: float = _key(5.0, "arena half-width in meters")
    goal_radius: float = _key(0.5, "goal disc radius in meters")
    # world model
    deter_dim: int = _key(64, "recurrent state width D_h")
    stoch_dim: int = _key(16, "stochastic state width D_s")
    model_hidden: int = _key(256, "encoder/decoder/head hidden units")
    beta: float = _key(1.0, "KL weight in the model objective")
    model_lr: float = _key(6e-4, "world model Adam learning rate")
    # behavior
    hidden: int = _key(256, "actor/critic/predictor hidden units")
    gamma: float = _key(0.99, "discount")
    lam: float = _key(0.95, "TD(lambda) mixing")
    actor_lr: float = _key(8e-5, "actor Adam learning rate")
    critic_lr: float = _key(8e-5, "critic Adam learning rate")
    imag_starts: int = _key(0, "start states per policy update (0 = whole model batch)")
    grad_clip: float = _key(100.0, "global gradient-norm clip (0 = off)")
    adam_eps: float = _key(1e-8, "Adam epsilon for every optimizer")
    # skills and planning
    skill_dim: int = _key(3, "skill vector dimension d_z")
    skill_len: int = _key(10, "steps K each skill is held")
    horizon: int = _key(10, "planning / imagination horizon H")
    population: int = _key(16, "CEM population G")
    elites: int = _key(4, "CEM elites M")
    cem_iters: int = _key(4, "CEM iterations")
    mean_noise: float = _key(0.1, "stddev of Gaussian noise added to the planned mean")
    var_floor: float = _key(1e-6, "variance floor after noise injection")
    plan_starts: int = _key(8, "model-batch start states averaged by the training-time planner")
    mpc_replan: bool = _key(True, "replan from the current latent state at each skill boundary")
    # mutual information
    mi_weight: float = _key(1.0, "weight of the intrinsic reward in policy targets")
    predictor_noise: float = _key(0.1, "stddev of noise added to skill-predictor inputs")
    predictor_lr: float = _key(8e-5, "skill predictor Adam learning rate")
    # transfer
    transfer_replay: str = _key("keep", f"source replay on transfer ({' | '.join(TRANSFER_REPLAY)})")
    freeze_predictor: bool = _key(True, "fixed_policy transfer also freezes the skill predictor")

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task: unknown {self.task!r}; valid: {', '.join(TASKS)}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant: unknown {self.variant!r}; valid: {', '.join(VARIANTS)}")
        if self.transfer_replay not in TRANSFER_REPLAY:
            raise ValueError(f"transfer_replay: unknown {self.transfer_replay!r}; valid: {', '.join(TRANSFER_REPLAY)}")
        for name in (
            "total_steps", "train_every", "updates_per_round", "batch_size", "seq_len",
            "replay_capacity", "episode_len", "deter_dim", "stoch_dim", "model_hidden", "hidden",
            "workers", "plan_starts",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name}: must be positive, got {getattr(self, name)}")
        for name in ("seed_episodes", "checkpoint_every", "eval_every", "eval_episodes", "imag_starts"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name}: must be non-negative")
        if self.seq_len > self.episode_len + 1:
            raise ValueError("seq_len: longer than an episode")
        self.planner()
        self.value()

    def planner(self) -> PlannerConfig:
        return PlannerConfig(
            skill_dim=self.skill_dim,
            skill_len=self.skill_len,
            horizon=self.horizon,
            population=self.population,
            elites=self.elites,
            cem_iters=self.cem_iters,
            mean_noise=self.mean_noise,
            var_floor=self.var_floor,
        )

    def value(self) -> ValueConfig:
        return ValueConfig(self.gamma, self.lam, self.horizon)

    def env_spec(self, task: str | None = None) -> EnvSpec:
        return make_spec(
            task or self.task,
            episode_len=self.episode_len,
            dt=self.dt,
            drag=self.drag,
            arena=self.arena,
            goal_radius=self.goal_radius,
        )

    @property
    def uses_skills(self) -> bool:
        return self.variant != "flat_amortized"

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in asdict(self).items())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def key_docs() -> list[tuple[str, str, str]]:
    out = []
    for f in fields(TrainConfig):
        default = f.default if f.default is not MISSING else None
        out.append((f.name, _fmt(default), f.metadata.get("doc", "")))
    return out


def _coerce(name: str, raw: str, kind):
    try:
        if kind is bool or kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ValueError(f"{name}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from None


def parse_overrides(pairs: dict[str, str], source: str = "config") -> dict:
    types = {f.name: f.type for f in fields(TrainConfig)}
    out = {}
    for k, v in pairs.items():
        if k not in types:
            raise ValueError(f"{source}: unknown key {k!r}")
        out[k] = _coerce(k, v, types[k])
    return out


def parse_text(text: str, source: str = "config") -> dict:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if k in pairs:
            raise ValueError(f"{source}:{lineno}: duplicate key {k!r}")
        pairs[k] = v
    return parse_overrides(pairs, source)


def load_config(path: str | Path | None = None, **overrides) -> TrainConfig:
    values = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        values = parse_text(path.read_text(), str(path))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)
