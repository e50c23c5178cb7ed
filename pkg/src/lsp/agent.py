"""Training loop: model learning, behavior learning in imagination, and MPC interaction."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig, load_config
from .diffmath import DTYPE, Adam, frozen, param_hash
from .envs import ACT_DIM, OBS_DIM, EnvSpec, PointMassEnv, in_goal, reward_fn, write_trajectories
from .miobjective import (
    SkillPredictor,
    SkillSamples,
    mi_lower_bound_estimate,
    predictor_loss,
    rollout_samples,
    window_intrinsic_rewards,
)
from .policy import Actor, Critic, actor_loss, critic_loss
from .replay import Episode, ReplayStore
from .skillspace import SkillDistribution, SkillScheduler, inject_mean_noise, plan, sample_skills
from .valueplan import imagine_rollout, skill_windows, td_lambda_targets
from .worldmodel import LatentState, load_checkpoint, save_checkpoint, vib_loss

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "step", "episode_return", "model_loss", "actor_loss", "critic_loss", "predictor_ll", "cem_elite_value",
)
EVAL_COLUMNS = ("step", "mean_return", "success_rate")
TRANSFER_MODES = ("finetune", "relabel", "fixed_policy")


@dataclass
class RunMetrics:
    rows: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    successes: list[bool] = field(default_factory=list)
    wall_clock: float = 0.0

    @property
    def returns(self) -> list[float]:
        return [r["episode_return"] for r in self.rows]

    def csv_text(self) -> str:
        return _csv(METRIC_COLUMNS, self.rows)

    def eval_csv_text(self) -> str:
        return _csv(EVAL_COLUMNS, self.evals)


def _csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns])
    return buf.getvalue()


def _mean(xs) -> float:
    return float(np.mean(xs)) if len(xs) else float("nan")


class Agent:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        torch.set_num_threads(cfg.workers)
        torch.manual_seed(cfg.seed)
        self.gen = torch.Generator().manual_seed(cfg.seed)
        self.rng = np.random.default_rng(cfg.seed)
        self.spec = cfg.env_spec()
        self.planner_cfg = cfg.planner()
        self.value_cfg = cfg.value()
        from .worldmodel import WorldModel

        self.model = WorldModel(OBS_DIM, ACT_DIM, cfg.deter_dim, cfg.stoch_dim, cfg.model_hidden)
        skill_dim = cfg.skill_dim if cfg.uses_skills else 0
        self.actor = Actor(self.model.feat_dim, skill_dim, ACT_DIM, cfg.hidden)
        self.critic = Critic(self.model.feat_dim, cfg.hidden)
        self.predictor = (
            SkillPredictor(self.model.feat_dim, cfg.skill_dim, cfg.hidden, cfg.predictor_noise)
            if cfg.uses_skills
            else None
        )
        self.actor_frozen = False
        self.predictor_frozen = False
        self._make_optimizers()
        self.replay = ReplayStore(cfg.replay_capacity, cfg.seed)
        self.env_steps = 0
        self.last_dist: SkillDistribution | None = None

    def _make_optimizers(self) -> None:
        cfg = self.cfg
        clip = cfg.grad_clip or None
        self.model_opt = Adam(self.model, cfg.model_lr, eps=cfg.adam_eps, clip=clip)
        self.actor_opt = Adam(self.actor, cfg.actor_lr, eps=cfg.adam_eps, clip=clip)
        self.critic_opt = Adam(self.critic, cfg.critic_lr, eps=cfg.adam_eps, clip=clip)
        self.predictor_opt = (
            Adam(self.predictor, cfg.predictor_lr, eps=cfg.adam_eps, clip=clip) if self.predictor else None
        )

    # -- properties ---------------------------------------------------------------

    @property
    def mi_weight(self) -> float:
        if self.cfg.variant == "no_mi" or self.predictor is None:
            return 0.0
        return self.cfg.mi_weight

    @property
    def plans_skills(self) -> bool:
        return self.cfg.variant in ("lsp", "no_mi")

    def set_planner(self, skill_len: int, horizon: int) -> None:
        self.cfg = self.cfg.replace(skill_len=skill_len, horizon=horizon)
        self.planner_cfg = self.cfg.planner()
        self.value_cfg = self.cfg.value()

    # -- model learning -----------------------------------------------------------

    def _batch(self):
        obs, act, rew = self.replay.sample_sequences(self.cfg.batch_size, self.cfg.seq_len, self.rng)
        return (torch.as_tensor(x, dtype=DTYPE) for x in (obs, act, rew))

    def model_update(self) -> tuple[dict, LatentState]:
        obs, act, rew = self._batch()
        loss, info, states = vib_loss(self.model, obs, act, rew, self.cfg.beta, self.gen)
        self.model_opt.minimize(loss)
        info["model_loss"] = float(loss.detach())
        starts = LatentState.stack([s.detach() for s in states], 1).flatten()
        return info, starts

    # -- behavior learning --------------------------------------------------------

    def _skill_dist_for_training(self, starts: LatentState) -> tuple[SkillDistribution | None, float]:
        if not self.cfg.uses_skills:
            return None, float("nan")
        if not self.plans_skills:
            return self.planner_cfg.initial(), float("nan")
        n = starts.deter.shape[0]
        idx = torch.randperm(n, generator=self.gen)[: self.cfg.plan_starts]
        result = plan(
            self.planner_cfg, starts[idx], self.actor, self.model, self.critic, self.value_cfg, self.gen
        )
        dist = inject_mean_noise(result.dist, self.planner_cfg.mean_noise, self.gen, self.planner_cfg.var_floor)
        self.last_dist = dist
        return dist, result.elite_values[-1]

    def imagine(self, starts: LatentState, dist: SkillDistribution | None, with_grad: bool):
        H = self.value_cfg.horizon
        K = self.planner_cfg.skill_len if dist is not None else H
        skills = None if dist is None else sample_skills(dist, starts.deter.shape[0], self.gen)
        with torch.set_grad_enabled(with_grad), frozen(self.model):
            roll = imagine_rollout(starts, skills, self.actor, self.model, H, K, self.gen)
            if self.predictor is not None and self.mi_weight > 0:
                roll.intrinsic = window_intrinsic_rewards(roll, self.predictor)
        return roll

    def behavior_update(self, starts: LatentState) -> dict:
        if self.cfg.imag_starts:
            idx = torch.randperm(starts.deter.shape[0], generator=self.gen)[: self.cfg.imag_starts]
            starts = starts[idx]
        dist, elite = self._skill_dist_for_training(starts)
        train_actor = not self.actor_frozen
        roll = self.imagine(starts, dist, with_grad=train_actor)
        info = {"cem_elite_value": elite}
        if train_actor:
            loss, targets = actor_loss(roll, self.critic, self.value_cfg, self.mi_weight)
            self.actor_opt.minimize(loss)
            info["actor_loss"] = float(loss.detach())
        else:
            with torch.no_grad():
                targets = td_lambda_targets(roll, self.critic, self.value_cfg, self.mi_weight)
            info["actor_loss"] = float("nan")
        feats = roll.feats()[:-1].detach()
        c_loss = critic_loss(self.critic, feats, targets)
        self.critic_opt.minimize(c_loss)
        info["critic_loss"] = float(c_loss.detach())
        if self.predictor is not None:
            samples = rollout_samples(roll)
            p_loss = predictor_loss(self.predictor, samples, self.gen)
            if not self.predictor_frozen:
                self.predictor_opt.minimize(p_loss)
            info["predictor_ll"] = -float(p_loss.detach())
        else:
            info["predictor_ll"] = float("nan")
        return info

    def update(self) -> dict:
        info, starts = self.model_update()
        info.update(self.behavior_update(starts))
        return info

    # -- interaction ---------------------------------------------------------------

    def _interaction_dist(self, latent: LatentState, explore: bool) -> SkillDistribution:
        if not self.plans_skills:
            return self.planner_cfg.initial()
        if self.cfg.mpc_replan or self.last_dist is None:
            with torch.no_grad():
                result = plan(
                    self.planner_cfg, latent, self.actor, self.model, self.critic, self.value_cfg, self.gen
                )
            dist = result.dist
            if explore:
                dist = inject_mean_noise(dist, self.planner_cfg.mean_noise, self.gen, self.planner_cfg.var_floor)
            return dist
        return self.last_dist

    def run_episode(
        self,
        spec: EnvSpec | None = None,
        explore: bool = True,
        random_actions: bool = False,
        episode_index: int = 0,
        fixed_skill: torch.Tensor | None = None,
    ) -> tuple[Episode, list[tuple], bool]:
        """One environment episode. Returns the stored episode, trajectory rows and goal success."""
        spec = spec or self.spec
        env = PointMassEnv(spec)
        obs = env.reset()
        zero = np.zeros(ACT_DIM)
        observations, actions, rewards = [obs], [zero], [reward_fn(spec, env.state, zero)]
        rows = []
        success = False
        latent = self.model.initial(1)
        prev_action = torch.zeros(1, ACT_DIM, dtype=DTYPE)
        scheduler = SkillScheduler(self.planner_cfg.skill_len, self.gen)
        mode = "stochastic" if explore else "mean"
        for t in range(spec.episode_len):
            change = 0
            if random_actions:
                a = self.rng.uniform(-1.0, 1.0, ACT_DIM)
            else:
                with torch.no_grad():
                    latent, _ = self.model.observe_step(
                        latent, prev_action, torch.as_tensor(obs, dtype=DTYPE)[None], self.gen
                    )
                    z = None
                    if self.cfg.uses_skills:
                        if fixed_skill is not None:
                            z = fixed_skill.reshape(1, -1)
                        else:
                            if scheduler.due(t):
                                change = 1
                                dist = self._interaction_dist(latent, explore)
                            else:
                                dist = None
                            z = scheduler.select(dist, t)[None]
                    act_t = self.actor.act(latent.feat, z, mode=mode, generator=self.gen)
                a = act_t[0].numpy().astype(np.float64)
                prev_action = act_t
            obs, r, _ = env.step(a)
            observations.append(obs)
            actions.append(np.clip(a, -1.0, 1.0))
            rewards.append(r)
            st = env.state
            rows.append((episode_index, t, *st.position, *st.velocity, *a, r, change))
            success = success or in_goal(spec, st.position)
        return Episode(np.array(observations), np.array(actions), np.array(rewards)), rows, success

    # -- workflows -------------------------------------------------------------------

    def seed_replay(self) -> None:
        for _ in range(self.cfg.seed_episodes):
            ep, _, _ = self.run_episode(random_actions=True)
            self.replay.add(ep)
            self.env_steps += self.spec.episode_len

    def train(self, out_dir: str | Path | None = None, steps: int | None = None) -> RunMetrics:
        """Run until ``steps`` more environment steps (default: the config budget) are spent."""
        cfg = self.cfg
        out = Path(out_dir) if out_dir else None
        if out:
            (out / "checkpoints").mkdir(parents=True, exist_ok=True)
            (out / "config.txt").write_text(cfg.to_text())
        metrics = RunMetrics()
        t0 = time.perf_counter()
        budget_end = self.env_steps + (steps if steps is not None else cfg.total_steps)
        if len(self.replay) == 0:
            self.seed_replay()
        traj_rows: list[tuple] = []
        next_ckpt = self._next_multiple(cfg.checkpoint_every)
        next_eval = self._next_multiple(cfg.eval_every)
        T = self.spec.episode_len
        episode = 0
        while self.env_steps < budget_end:
            n_updates = (T // cfg.train_every) * cfg.updates_per_round
            infos = []
            for _ in range(n_updates):
                try:
                    infos.append(self.update())
                except Exception as exc:
                    raise RuntimeError(f"update failed at env step {self.env_steps}: {exc}") from exc
            ep, rows, success = self.run_episode(episode_index=episode)
            self.replay.add(ep)
            self.env_steps += T
            traj_rows.extend(rows)
            metrics.successes.append(success)
            metrics.rows.append(
                {
                    "step": self.env_steps,
                    "episode_return": float(ep.rewards[1:].sum()),
                    **{k: _mean([i[k] for i in infos]) for k in METRIC_COLUMNS[2:]},
                }
            )
            log.info("step %d return %.3f", self.env_steps, metrics.rows[-1]["episode_return"])
            episode += 1
            if next_eval and self.env_steps >= next_eval:
                res = self.evaluate(self.spec, cfg.eval_episodes, seed=cfg.seed + self.env_steps)
                metrics.evals.append(
                    {"step": self.env_steps, "mean_return": res["mean_return"], "success_rate": res["success_rate"]}
                )
                next_eval = self._next_multiple(cfg.eval_every)
            if out and next_ckpt and self.env_steps >= next_ckpt:
                self.save(out / "checkpoints" / f"step_{self.env_steps:08d}.ckpt")
                next_ckpt = self._next_multiple(cfg.checkpoint_every)
        metrics.wall_clock = time.perf_counter() - t0
        if out:
            self.save(out / "model.ckpt")
            self.replay.save(out / "replay")
            (out / "metrics.csv").write_text(metrics.csv_text())
            (out / "eval.csv").write_text(metrics.eval_csv_text())
            write_trajectories(out / "trajectories.txt", traj_rows)
        return metrics

    def _next_multiple(self, every: int) -> int:
        if not every:
            return 0
        return (self.env_steps // every + 1) * every

    def evaluate(self, spec: EnvSpec | None = None, episodes: int = 1, seed: int = 0) -> dict:
        """Mean-action episodes with skills still planned online; RNG state is restored afterwards."""
        spec = spec or self.spec
        saved_gen, saved_rng = self.gen.get_state(), self.rng.bit_generator.state
        self.gen.manual_seed(seed)
        self.rng = np.random.default_rng(seed)
        returns, successes, rows = [], [], []
        try:
            for e in range(episodes):
                ep, r, ok = self.run_episode(spec, explore=False, episode_index=e)
                returns.append(float(ep.rewards[1:].sum()))
                successes.append(ok)
                rows.extend(r)
        finally:
            self.gen.set_state(saved_gen)
            self.rng = np.random.default_rng()
            self.rng.bit_generator.state = saved_rng
        return {
            "episodes": episodes,
            "mean_return": _mean(returns),
            "success_rate": _mean(successes) if episodes else float("nan"),
            "returns": returns,
            "rows": rows,
        }

    # -- diagnostics --------------------------------------------------------------

    def skill_spread(self, skills: torch.Tensor, steps: int = 40, spec: EnvSpec | None = None) -> float:
        """Mean pairwise distance between terminal positions when each skill is held for ``steps``."""
        spec = spec or self.spec
        from dataclasses import replace

        short = replace(spec, episode_len=steps)
        saved = self.gen.get_state()
        ends = []
        for z in skills:
            self.gen.manual_seed(0)
            _, rows, _ = self.run_episode(short, explore=False, fixed_skill=z)
            ends.append(rows[-1][2:4])
        self.gen.set_state(saved)
        ends = np.array(ends)
        d = np.linalg.norm(ends[:, None] - ends[None], axis=-1)
        n = len(ends)
        return float(d[np.triu_indices(n, 1)].mean())

    def heldout_predictor_ll(self, batches: int = 8, n_starts: int = 64, seed: int = 12345) -> float:
        """Predictor log-likelihood on fresh imagined windows drawn the way training draws them.

        Start states come from replay, skills from the training-time skill distribution
        (planned for lsp/no_mi, the prior for random_skills). A private generator keeps
        the agent's own streams untouched.
        """
        if self.predictor is None:
            raise ValueError("flat agent has no skill predictor")
        gen = torch.Generator().manual_seed(seed)
        rng = np.random.default_rng(seed)
        # a short observed prefix gives filtered start states rather than first-step posteriors
        length = min(8, max(len(ep) for ep in self.replay.episodes))
        total, count = 0.0, 0
        with torch.no_grad():
            for _ in range(batches):
                obs, act, _ = self.replay.sample_sequences(n_starts, length, rng)
                states, _ = self.model.observe(
                    torch.as_tensor(obs, dtype=DTYPE), torch.as_tensor(act, dtype=DTYPE), gen
                )
                starts = states[-1]
                dist = self.planner_cfg.initial()
                if self.plans_skills:
                    idx = torch.randperm(n_starts, generator=gen)[: self.cfg.plan_starts]
                    res = plan(self.planner_cfg, starts[idx], self.actor, self.model, self.critic, self.value_cfg, gen)
                    dist = inject_mean_noise(res.dist, self.planner_cfg.mean_noise, gen, self.planner_cfg.var_floor)
                skills = sample_skills(dist, n_starts, gen)
                roll = imagine_rollout(
                    starts, skills, self.actor, self.model, self.value_cfg.horizon, self.planner_cfg.skill_len, gen
                )
                samples = rollout_samples(roll)
                n = sum(len(x) for x in samples)
                total += -float(predictor_loss(self.predictor, samples, noise_std=0.0)) * n
                count += n
        return total / count

    def mi_bound(self, samples: list[SkillSamples]) -> tuple[float, float]:
        return mi_lower_bound_estimate(self.predictor, samples, self.planner_cfg.initial().first_window())

    # -- persistence ----------------------------------------------------------------

    def modules(self) -> dict[str, torch.nn.Module]:
        mods = {"model": self.model, "actor": self.actor, "critic": self.critic}
        if self.predictor is not None:
            mods["predictor"] = self.predictor
        return mods

    def dims(self) -> dict[str, int]:
        d = dict(self.model.dims())
        d.update(
            hidden=self.cfg.hidden,
            skill_dim=self.actor.skill_dim,
            has_predictor=int(self.predictor is not None),
        )
        return d

    def save(self, path: str | Path) -> None:
        entries = {}
        for prefix, mod in self.modules().items():
            for name, p in mod.state_dict().items():
                entries[f"{prefix}.{name}"] = p
        save_checkpoint(path, self.dims(), entries)

    def load(self, path: str | Path) -> None:
        dims, entries = load_checkpoint(path)
        mine = self.dims()
        if dims != mine:
            diff = {k: (dims.get(k), mine.get(k)) for k in set(dims) | set(mine) if dims.get(k) != mine.get(k)}
            raise ValueError(f"checkpoint {path} incompatible with configuration: {diff}")
        for prefix, mod in self.modules().items():
            state = {k[len(prefix) + 1 :]: v for k, v in entries.items() if k.startswith(prefix + ".")}
            mod.load_state_dict(state)

    def param_hashes(self) -> dict[str, str]:
        return {k: param_hash(m) for k, m in self.modules().items()}


def train(cfg: TrainConfig, out_dir: str | Path | None = None) -> tuple[Agent, RunMetrics]:
    agent = Agent(cfg)
    return agent, agent.train(out_dir)


def load_run(run_dir: str | Path, **overrides) -> Agent:
    run_dir = Path(run_dir)
    cfg_path, ckpt = run_dir / "config.txt", run_dir / "model.ckpt"
    for p in (cfg_path, ckpt):
        if not p.exists():
            raise FileNotFoundError(f"run directory {run_dir} is missing {p.name}")
    agent = Agent(load_config(cfg_path, **overrides))
    agent.load(ckpt)
    return agent


def transfer(
    source_dir: str | Path,
    target_task: str,
    mode: str,
    cfg: TrainConfig | None = None,
    out_dir: str | Path | None = None,
    skill_len: int | None = None,
    horizon: int | None = None,
) -> tuple[Agent, RunMetrics]:
    """Continue from a trained run on ``target_task``.

    ``cfg`` supplies the transfer settings (budget, seed, planner overrides); its
    architecture fields must match the source checkpoint.
    """
    if mode not in TRANSFER_MODES:
        raise ValueError(f"unknown transfer mode {mode!r}; valid: {', '.join(TRANSFER_MODES)}")
    source_dir = Path(source_dir)
    replay_dir = source_dir / "replay"
    if not replay_dir.is_dir():
        raise FileNotFoundError(f"run directory {source_dir} has no replay/")
    base = cfg or load_config(source_dir / "config.txt")
    base = base.replace(task=target_task)
    if skill_len is not None or horizon is not None:
        base = base.replace(skill_len=skill_len or base.skill_len, horizon=horizon or base.horizon)
    agent = Agent(base)
    agent.load(source_dir / "model.ckpt")
    policy = base.transfer_replay
    if mode == "relabel":
        policy = "relabel"
    if policy != "fresh":
        agent.replay = ReplayStore.load(replay_dir, base.replay_capacity, base.seed)
        if policy == "relabel":
            agent.replay.relabel(agent.spec)
    if mode == "fixed_policy":
        agent.actor_frozen = True
        agent.predictor_frozen = base.freeze_predictor
    metrics = agent.train(out_dir)
    return agent, metrics
