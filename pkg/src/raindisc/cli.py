"""Command-line entry point.

    raindisc gen-data      --config cfg.json [--set distill.lr=1e-4 ...]
    raindisc train-teacher ...
    raindisc distill       ...
    raindisc adapt         ...
    raindisc evaluate      [--stage adapted] [--noise additive]
    raindisc report
    raindisc ablate        --protocol adapt-modes [--seeds 0,1,2]

Exit codes: 0 success, 1 pipeline failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import harness
from .config import ConfigError, load_config


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file (defaults apply if omitted)")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted config override, e.g. distill.lr=1e-4",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="raindisc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("gen-data", "train-teacher", "distill", "adapt", "report"):
        _add_common(sub.add_parser(name))

    p_eval = sub.add_parser("evaluate")
    _add_common(p_eval)
    p_eval.add_argument("--stage", default="adapted", choices=("adapted", "student"))
    p_eval.add_argument("--noise", default=None, choices=("none", "additive", "multiplicative"))

    p_ablate = sub.add_parser("ablate")
    _add_common(p_ablate)
    p_ablate.add_argument("--protocol", required=True, choices=harness.PROTOCOLS)
    p_ablate.add_argument("--seeds", default="0,1,2", help="comma-separated seed list")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    try:
        if args.command == "gen-data":
            out = harness.cmd_gen_data(cfg)
        elif args.command == "train-teacher":
            out = harness.cmd_train_teacher(cfg)
        elif args.command == "distill":
            out = harness.cmd_distill(cfg)
        elif args.command == "adapt":
            out = harness.cmd_adapt(cfg)
        elif args.command == "evaluate":
            out = harness.cmd_evaluate(cfg, stage=args.stage, noise_kind=args.noise)
        elif args.command == "report":
            out = str(harness.cmd_report(cfg))
        elif args.command == "ablate":
            seeds = tuple(int(s) for s in args.seeds.split(",") if s != "")
            out = harness.run_ablation(args.protocol, cfg, seeds=seeds)
        else:  # pragma: no cover - argparse guards this
            return 2
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    print(json.dumps(out, indent=2, sort_keys=True, default=str))
    return 0


def cli() -> None:  # console_scripts hook
    raise SystemExit(main())


if __name__ == "__main__":
    raise SystemExit(main())
