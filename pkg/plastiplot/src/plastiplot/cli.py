"""Command-line surface:

    plastiplot calcium --runs DIR [DIR] --out PATH
    plastiplot timings --runs DIR DIR... --out PATH
    plastiplot bytes   --runs DIR...     --out PATH
"""

from __future__ import annotations

import argparse
import sys

from .artifacts import ArtifactError, load_run
from .figures import plot_calcium, plot_timings, table_bytes


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plastiplot")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("calcium", "per-neuron calcium traces"),
                            ("timings", "phase timing comparison"),
                            ("bytes", "bytes sent / remotely accessed table")):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--runs", nargs="+", required=True,
                         help="simulator run directories")
        cmd.add_argument("--out", required=True, help="output file path")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        runs = [load_run(path) for path in args.runs]
        if args.command == "calcium":
            plot_calcium(runs, args.out)
        elif args.command == "timings":
            plot_timings(runs, args.out)
        else:
            table_bytes(runs, args.out)
    except ArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
