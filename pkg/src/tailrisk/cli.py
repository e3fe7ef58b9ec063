"""Command line: ``tailrisk validate | run | all``.

Exit codes: 0 success, 1 scenario validation failure, 2 runtime error.
"""

from __future__ import annotations

import argparse
import sys

from . import __version__
from .experiments import EXPERIMENTS, run_all, run_experiment
from .output import write_results
from .rng import MAX_SEED
from .scenario import ScenarioError, load_scenario

OK, INVALID, RUNTIME = 0, 1, 2


def _seed(text: str) -> int:
    try:
        v = int(text, 10)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text!r}") from None
    if not 0 <= v <= MAX_SEED:
        raise argparse.ArgumentTypeError(f"seed must lie in [0, 2**64 - 1], got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tailrisk", description="Rare-event risk and adaptation experiments on finite environments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a scenario file")
    v.add_argument("file")

    def run_args(sp):
        sp.add_argument("--scenario", required=True, help="scenario file (JSON or TOML)")
        sp.add_argument("--seed", type=_seed, help="run seed; defaults to the scenario's seed")
        sp.add_argument("--out", required=True, help="output directory")

    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("experiment", choices=EXPERIMENTS)
    run_args(r)
    a = sub.add_parser("all", help="run every experiment the scenario configures")
    run_args(a)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        scenario = load_scenario(args.file if args.command == "validate" else args.scenario)
        if args.command == "validate":
            env = scenario.env
            print(f"ok: {scenario.name} (states={env.state_count}, actions={env.action_count}, observations={env.observation_count})")
            return OK
        if args.seed is not None:
            scenario = scenario.with_changes(seed=args.seed)
    except ScenarioError as e:
        print(f"invalid scenario {e.source or ''}".rstrip() + ":", file=sys.stderr)
        for msg in e.errors:
            print(f"  {msg}", file=sys.stderr)
        return INVALID

    try:
        result = run_all(scenario) if args.command == "all" else run_experiment(scenario, args.experiment)
        manifest = write_results(result, args.out)
    except ScenarioError as e:
        print(f"error: {e}", file=sys.stderr)
        return INVALID
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return RUNTIME
    for name in manifest["files"]:
        print(f"wrote {args.out.rstrip('/')}/{name}")
    print(f"wrote {args.out.rstrip('/')}/manifest.json")
    return OK


if __name__ == "__main__":
    sys.exit(main())
