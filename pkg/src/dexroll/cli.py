"""Command-line entry point: ``dexroll run`` and ``dexroll gradcheck``."""

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, TaskConfig
from .runner import WORKERS_ENV, run_batch

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2


def _parser():
    p = argparse.ArgumentParser(prog="dexroll", description="Contact-implicit trajectory optimization for rolling fingertip manipulation.")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run warmup + MPC episodes for a task configuration")
    run.add_argument("config", type=Path)
    run.add_argument("--seeds", type=int, default=None, help="number of seeds (default: the config's seeds.count)")
    run.add_argument("--ablation", action="store_true", help="replace geometric constraints by fixed object-frame fingertip tracking")
    run.add_argument("--pregrasp", action="store_true", help="plan the fingers onto the object before the task")
    run.add_argument("--out", type=Path, default=None, help="output directory (default: runs/<task>[_ablation])")
    run.add_argument("--online-iters", type=int, default=None, help="solver iterations per replan")
    run.epilog = f"Set {WORKERS_ENV}=N to run seeds in N worker processes."
    gc = sub.add_parser("gradcheck", help="finite-difference audit of all analytic gradients")
    gc.add_argument("config", type=Path)
    gc.add_argument("--configs", type=int, default=100, help="random configurations per family")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--json", type=Path, default=None, help="also write the report as JSON")
    return p


def _fmt(x):
    return "n/a" if x is None else f"{x:.2f}"


def cmd_run(args):
    cfg = TaskConfig.load(args.config)
    seeds_cfg = cfg.data["seeds"]
    n = seeds_cfg["count"] if args.seeds is None else args.seeds
    if n < 1:
        raise ConfigError("must be >= 1", "--seeds")
    if args.online_iters is not None and args.online_iters < 1:
        raise ConfigError("must be >= 1", "--online-iters")
    seeds = [seeds_cfg["base"] + k for k in range(n)]
    out = args.out or Path("runs") / (cfg.name + ("_ablation" if args.ablation else ""))
    summary = run_batch(args.config, seeds, ablation=args.ablation, pregrasp=args.pregrasp, online_iters=args.online_iters, out=out)
    print(f"task {summary['task']}{' (ablation)' if args.ablation else ''}: {summary['n_episodes']} episodes")
    print(f"distance to goal {_fmt(summary['distance_deg_mean'])} deg +- {_fmt(summary['distance_deg_std'])} deg over {summary['n_valid']} valid episodes")
    print(f"validity rate {summary['validity_rate']:.2f}  wall clock {summary['wall_clock_s']:.1f} s")
    for seed, err in summary["errors"].items():
        print(f"seed {seed} failed: {err}")
    print(f"artifacts in {out}")
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck import gradcheck

    task = TaskConfig.load(args.config).build()
    report = gradcheck(task, n_configs=args.configs, seed=args.seed)
    print("\n".join(report.lines()))
    if args.json is not None:
        args.json.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    if not report.passed:
        print("gradient check failed for: " + ", ".join(report.failing))
        return EXIT_FAIL
    print("all families within tolerance")
    return EXIT_OK


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args)
        return cmd_gradcheck(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
