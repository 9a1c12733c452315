"""Command-line entry point: ``macdec {train,evaluate,plot,default-config,trace}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ALGORITHMS, TrainConfig
from .envs import ENV_NAMES, make_env


def _load_config(args) -> TrainConfig:
    if args.config:
        cfg = TrainConfig.load(args.config)
        if args.env and args.env != cfg.env:
            cfg = TrainConfig.from_flat({**_without_env_keys(cfg.to_flat()), "env": args.env})
    else:
        cfg = TrainConfig.default(args.env or "bp10")
    if args.algo:
        cfg = cfg.with_learner(algorithm=args.algo)
    top = {}
    if args.seed is not None:
        top["seed"] = args.seed
    if args.out:
        top["out_dir"] = args.out
    for name in ("episodes", "runs"):
        value = getattr(args, name, None)
        if value is not None:
            top["num_runs" if name == "runs" else name] = value
    return replace(cfg, **top) if top else cfg


def _without_env_keys(flat: dict) -> dict:
    return {k: v for k, v in flat.items() if not k.endswith(".horizon")}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--algo", choices=ALGORITHMS)
    p.add_argument("--env", choices=ENV_NAMES)
    p.add_argument("--out", help="output directory or file")


def cmd_train(args) -> int:
    from .harness import run_experiment

    cfg = _load_config(args)
    result = run_experiment(cfg)
    agg = result["aggregate"]
    if agg:
        print(f"final smoothed return {agg[-1]['return_smoothed']:.3f} -> {result['out_dir']}")
    return 0


def cmd_evaluate(args) -> int:
    from .evaluation import evaluate_policy
    from .harness import load_nets

    run_dir = Path(args.run_dir)
    cfg = TrainConfig.load(run_dir / "config.json")
    env = make_env(cfg.env, cfg.env_horizon)
    nets = load_nets(run_dir / "checkpoints", args.run, env)
    seed = cfg.seed + args.run if args.seed is None else args.seed
    value = evaluate_policy(nets, env, cfg.learner.gamma, args.episodes, seed)
    print(f"{value!r}")
    return 0


def cmd_plot(args) -> int:
    from .plotting import render_curves

    labels = args.labels.split(",") if args.labels else None
    out = render_curves(args.metrics, args.out or "curves.svg", labels=labels,
                        reference=args.reference, title=args.title, window=args.window)
    print(out)
    return 0


def cmd_default_config(args) -> int:
    cfg = TrainConfig.default(args.env or "bp10")
    if args.algo:
        cfg = cfg.with_learner(algorithm=args.algo)
    flat = cfg.to_flat()
    for name in ENV_NAMES:
        flat.setdefault(f"{name}.horizon", make_env(name).spec.horizon)
    text = json.dumps(flat, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_trace(args) -> int:
    from .harness import load_nets, trace_episode, write_trace
    from .learners import Policy
    from .evaluation import eval_mode
    from . import scripted

    env_name = args.env or "wtd"
    env = make_env(env_name)
    if args.from_dir:
        nets = load_nets(Path(args.from_dir) / "checkpoints", args.run, env)
        policy = Policy(nets, eval_mode(nets))
    elif env_name == "wtd":
        policy = scripted.wtd_script()
    else:
        policy = scripted.bp_big_box_script()
    lines, value = trace_episode(env, policy, seed=args.seed or 0)
    for entry in lines:
        state = entry["state"]
        print(f"t={entry['boundary_time']} actions={entry['actions']} "
              f"r={entry['joint_reward']:.3f} done={entry['terminated']}")
        print(state if isinstance(state, str) else json.dumps(state, sort_keys=True))
    print(f"discounted return {value:.4f}")
    if args.out:
        write_trace(lines, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="macdec", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run seeded training and write metrics")
    _common(p)
    p.add_argument("--episodes", type=int)
    p.add_argument("--runs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="greedy return of saved checkpoints")
    p.add_argument("run_dir", help="directory written by `train`")
    p.add_argument("--run", type=int, default=0)
    p.add_argument("--episodes", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", help="render learning curves to SVG")
    p.add_argument("metrics", nargs="+", help="metrics CSV files")
    p.add_argument("--out")
    p.add_argument("--labels", help="comma-separated legend labels")
    p.add_argument("--reference", type=float, help="draw a dash-dot line at this return")
    p.add_argument("--title", default="")
    p.add_argument("--window", type=int, default=1, help="smoothing for per-run files")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("default-config", help="print every default setting as JSON")
    p.add_argument("--env", choices=ENV_NAMES)
    p.add_argument("--algo", choices=ALGORITHMS)
    p.add_argument("--out")
    p.set_defaults(func=cmd_default_config)

    p = sub.add_parser("trace", help="render one episode boundary by boundary")
    p.add_argument("--env", choices=ENV_NAMES)
    p.add_argument("--seed", type=int)
    p.add_argument("--from", dest="from_dir", help="training directory with checkpoints")
    p.add_argument("--run", type=int, default=0)
    p.add_argument("--out", help="write JSON-lines trace here")
    p.set_defaults(func=cmd_trace)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
