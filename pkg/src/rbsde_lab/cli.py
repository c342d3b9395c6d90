"""Command-line entry point: ``rbsde-lab <command> <config> [--seed] [--out-dir] [--threads]``."""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .config import ConfigError, parse_config
from .model import validate_model
from .runner import ExperimentError, _grid_for, resolve_problem, run_experiment

_COMMANDS = {
    "solve-pde": ("pde",),
    "solve-bsde": ("bsde",),
    "dual-gap": ("dual",),
    "oracle-compare": ("oracle",),
    "converge": ("pde", "bsde"),
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rbsde-lab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in ["validate", *_COMMANDS]:
        sp = sub.add_parser(name)
        sp.add_argument("config", type=Path)
        sp.add_argument("--seed", type=int, default=None, help="override [mc] seed")
        sp.add_argument("--out-dir", type=Path, default=None, help="override [output] dir")
        sp.add_argument("--threads", type=int, default=1,
                        help="simulation workers; never changes results")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        spec = parse_config(args.config.read_text())
    except ConfigError as exc:
        for ln, msg in exc.errors:
            print(f"{args.config}:{ln}: {msg}" if ln else f"{args.config}: {msg}",
                  file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"cannot read {args.config}: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)

    if args.command == "validate":
        prob, grid = _grid_for(spec, resolve_problem(spec))
        report = validate_model(prob.spec, grid.nodes)
        print(f"{prob.name}: {report.summary()}")
        for v in report.violations:
            print(f"  {v.kind} at node {v.node} x={v.x}" + (f" mark={v.mark}" if v.mark is not None
                                                           else "") + f" {v.detail}".rstrip())
        for a in report.advisories:
            print(f"  advisory: {a}")
        return 0 if report.ok else 1

    spec = dataclasses.replace(spec, solvers=_COMMANDS[args.command])
    try:
        man = run_experiment(spec, threads=args.threads, out_dir=args.out_dir)
    except ExperimentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for p in man.paths():
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
