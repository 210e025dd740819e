"""Command-line entry point.

``divlearn <sweep|diversity|complexity|landscape|summarize> --config PATH
[--out PATH] [--seed N] [--threads N] [--trace]``

Exit status is 0 on success, 1 on a configuration error and 2 when any
output row carries an error.
"""

import argparse
import dataclasses
import sys

from .config import load_config
from .errors import MissingColumn, ParseError
from .experiments import run_experiment
from .summarize import summarize, summary_lines

COMMANDS = ("sweep", "diversity", "complexity", "landscape", "summarize")

#: Default (group key, response) used by ``summarize`` for each experiment kind.
SUMMARY_DEFAULTS = {
    "sweep": ("n", "transfer_excess_risk"),
    "diversity": ("trial", "nu_implied"),
    "complexity": ("n", "mean"),
    "landscape": ("n", "sin_theta"),
}


def build_parser():
    p = argparse.ArgumentParser(prog="divlearn", description="Shared-representation transfer experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="experiment configuration file")
    p.add_argument("--out", help="output CSV (summarize: CSV to read; defaults to the config's output)")
    p.add_argument("--seed", type=int, help="override the base seed")
    p.add_argument("--threads", type=int, default=1, help="worker threads (default 1)")
    p.add_argument("--trace", action="store_true", help="write per-fit optimizer traces next to the output")
    p.add_argument("--group", help="summarize: comma-separated group keys")
    p.add_argument("--response", help="summarize: response column")
    p.add_argument("--axis", help="summarize: slope axis (default: first group key)")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ParseError("seed must be nonnegative")
            cfg = dataclasses.replace(cfg, seed=args.seed)
        if args.threads < 1:
            raise ParseError("threads must be >= 1")
    except (OSError, ParseError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    if args.command == "summarize":
        group, response = SUMMARY_DEFAULTS[cfg.kind]
        keys = tuple(k.strip() for k in args.group.split(",")) if args.group else (group,)
        try:
            s = summarize(args.out or cfg.output_path, keys, args.response or response, args.axis)
        except (OSError, MissingColumn) as exc:
            print(f"summarize error: {exc}", file=sys.stderr)
            return 1
        print("\n".join(summary_lines(s)))
        return 0

    if args.command != cfg.kind:
        print(f"config error: config kind is {cfg.kind!r}, command is {args.command!r}", file=sys.stderr)
        return 1
    result = run_experiment(cfg, out=args.out, threads=args.threads, trace=args.trace)
    print(f"wrote {len(result.rows)} rows to {result.path} ({result.n_errors} with errors)")
    return 2 if result.n_errors else 0


if __name__ == "__main__":
    sys.exit(main())
