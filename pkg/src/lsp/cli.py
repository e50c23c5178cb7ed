"""Command-line entry point: ``lsp train | transfer | eval | export``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import VARIANTS, TrainConfig, key_docs, parse_overrides, parse_text
from .envs import TASKS

OUT_ROOT_ENV = "LSP_OUT_ROOT"
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def config_help() -> str:
    docs = key_docs()
    width = max(len(k) for k, _, _ in docs)
    lines = ["config keys (key = default  description):"]
    for k, default, doc in docs:
        lines.append(f"  {k.ljust(width)} = {default:<10} {doc}")
    return "\n".join(lines)


def _out_root() -> Path:
    return Path(os.environ.get(OUT_ROOT_ENV, "runs"))


def _read_config_values(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    return _parse(p)


def _parse(path: Path) -> dict:
    try:
        return parse_text(path.read_text(), str(path))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _set_values(pairs: list[str] | None) -> dict:
    raw = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    try:
        return parse_overrides(raw, "--set")
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _build_config(values: dict) -> TrainConfig:
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# -- commands ------------------------------------------------------------------------

def cmd_train(args) -> int:
    from .agent import train

    values = _read_config_values(args.config)
    values.update(_set_values(args.set))
    if args.seed is not None:
        values["seed"] = args.seed
    if args.variant is not None:
        if args.variant not in VARIANTS:
            raise UsageError(f"unknown variant {args.variant!r}; valid variants: {', '.join(VARIANTS)}")
        values["variant"] = args.variant
    cfg = _build_config(values)
    out = Path(args.out) if args.out else _out_root() / f"{cfg.task}_{cfg.variant}_s{cfg.seed}"
    _, metrics = train(cfg, out)
    print(f"wrote {out} ({len(metrics.rows)} episodes, {metrics.wall_clock:.1f}s)")
    return EXIT_OK


def cmd_transfer(args) -> int:
    from .agent import TRANSFER_MODES, transfer

    source = Path(args.source)
    src_cfg = source / "config.txt"
    for needed in (src_cfg, source / "model.ckpt", source / "replay"):
        if not needed.exists():
            raise UsageError(f"source run {source} is missing {needed.name}")
    if args.mode not in TRANSFER_MODES:
        raise UsageError(f"unknown mode {args.mode!r}; valid modes: {', '.join(TRANSFER_MODES)}")
    # architecture keys default to the source run; the transfer config overrides the rest
    values = _parse(src_cfg)
    values.update(_read_config_values(args.config))
    values.update(_set_values(args.set))
    if args.seed is not None:
        values["seed"] = args.seed
    if args.target not in TASKS:
        raise UsageError(f"unknown target task {args.target!r}; valid tasks: {', '.join(TASKS)}")
    values["task"] = args.target
    cfg = _build_config(values)
    out = Path(args.out) if args.out else _out_root() / f"{source.name}_to_{args.target}_{args.mode}"
    _, metrics = transfer(source, args.target, args.mode, cfg, out, args.skill_len, args.horizon)
    hits = sum(metrics.successes)
    print(f"wrote {out} ({len(metrics.rows)} episodes, {hits} reached the goal)")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .agent import load_run
    from .envs import write_trajectories

    run = Path(args.run)
    if not (run / "config.txt").is_file() or not (run / "model.ckpt").is_file():
        raise UsageError(f"run directory {run} needs config.txt and model.ckpt")
    if args.episodes < 0:
        raise UsageError("--episodes must be non-negative")
    if args.task is not None and args.task not in TASKS:
        raise UsageError(f"unknown task {args.task!r}; valid tasks: {', '.join(TASKS)}")
    agent = load_run(run)
    spec = agent.cfg.env_spec(args.task) if args.task else agent.spec
    res = agent.evaluate(spec, args.episodes, seed=args.seed)
    lines = ["episodes,mean_return,success_rate"]
    if args.episodes:
        lines.append(f"{args.episodes},{res['mean_return']!r},{res['success_rate']!r}")
    summary = "\n".join(lines) + "\n"
    sys.stdout.write(summary)
    if args.summary_out:
        Path(args.summary_out).write_text(summary)
    if args.traj_out:
        write_trajectories(args.traj_out, res["rows"])
    return EXIT_OK


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(
        prog="lsp",
        description="Train, transfer and evaluate latent skill planning agents.",
        epilog=config_help() + f"\n\nDefault output root: ${OUT_ROOT_ENV} (else ./runs).",
        formatter_class=fmt,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress per episode")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train an agent from scratch", epilog=config_help(), formatter_class=fmt)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out", help="run directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", help=f"one of: {', '.join(VARIANTS)}")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser(
        "transfer", help="continue a trained run on another task", epilog=config_help(), formatter_class=fmt
    )
    p.add_argument("--from", dest="source", required=True, help="source run directory")
    p.add_argument("--target", required=True, help="target task")
    p.add_argument("--mode", required=True, help="finetune | relabel | fixed_policy")
    p.add_argument("--config", help="transfer config; keys not given fall back to the source run")
    p.add_argument("--out", help="run directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--skill-len", type=int, help="override K")
    p.add_argument("--horizon", type=int, help="override H")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.set_defaults(func=cmd_transfer)

    for name, text in (("eval", "evaluate a run"), ("export", "evaluate a run and dump trajectory rows")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--run", required=True, help="run directory")
        p.add_argument("--episodes", type=int, default=1)
        p.add_argument("--traj-out", help="trajectory dump path")
        p.add_argument("--summary-out", help="also write the summary CSV here")
        p.add_argument("--task", help="evaluate on another task")
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"lsp {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"lsp {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
