"""Command-line entry point.

    plastsim run --config FILE [--ranks N] [--algo classic|aware]
                 [--spikes exact|freq] [--theta X] [--seed S]
                 [--backend local|tcp] [--out DIR] [--rank R]

Flags override values from the config file.  Exit codes: 0 on success,
1 for configuration errors, 2 for runtime faults.
"""

from __future__ import annotations

import argparse
import sys

from .config import ConfigError, SimConfig, load_config
from .driver import run_simulation

_ALGO_ALIASES = {"classic": "classic", "aware": "location_aware",
                 "location_aware": "location_aware"}
_SPIKE_ALIASES = {"exact": "exact", "freq": "frequency",
                  "frequency": "frequency"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plastsim")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="execute a simulation")
    run.add_argument("--config", help="key=value config file")
    run.add_argument("--ranks", type=int, dest="rank_count")
    run.add_argument("--algo", choices=sorted(_ALGO_ALIASES))
    run.add_argument("--spikes", choices=sorted(_SPIKE_ALIASES))
    run.add_argument("--theta", type=float)
    run.add_argument("--seed", type=int, dest="master_seed")
    run.add_argument("--backend", choices=["local", "tcp"])
    run.add_argument("--out", dest="out_dir")
    run.add_argument("--steps", type=int, dest="total_steps")
    run.add_argument("--rank", type=int, default=None,
                     help="this process's rank (tcp backend)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {
        "rank_count": args.rank_count,
        "theta": args.theta,
        "master_seed": args.master_seed,
        "backend": args.backend,
        "out_dir": args.out_dir,
        "total_steps": args.total_steps,
    }
    if args.algo:
        overrides["algorithm"] = _ALGO_ALIASES[args.algo]
    if args.spikes:
        overrides["spike_mode"] = _SPIKE_ALIASES[args.spikes]
    try:
        if args.config:
            cfg = load_config(args.config, overrides)
        else:
            cfg = SimConfig(**{k: v for k, v in overrides.items()
                               if v is not None})
    except (ConfigError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    try:
        run_simulation(cfg, rank=args.rank)
    except Exception as exc:  # runtime fault, rank-tagged where known
        tag = f"rank {args.rank}: " if args.rank is not None else ""
        print(f"runtime fault: {tag}{exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
