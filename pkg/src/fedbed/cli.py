"""Command-line entry points: run, sweep, analyze-layers, matrix."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import runner
from .config import ConfigError, config_keys_doc, load_config


def _out_dir(args, cfg):
    if args.out:
        return args.out
    return os.environ.get("FEDBED_OUTPUT_DIR", cfg.output_dir)


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("config", help="path to the experiment config file")
    p.add_argument("--out", help="output directory (overrides config and env)")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedbed",
        description="Desk-scale federated learning testbed: backdoor attacks "
        "vs. robust aggregation defenses.",
        epilog="Config keys:\n" + config_keys_doc(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment and write CSV/JSON results")
    _add_common(p_run)

    p_sweep = sub.add_parser("sweep", help="rerun the experiment over a parameter grid")
    _add_common(p_sweep)
    p_sweep.add_argument("--param", required=True, choices=runner.SWEEP_PARAMS)
    p_sweep.add_argument(
        "--values", required=True,
        help="comma-separated values, e.g. 0.25,0.5,0.75,1.0",
    )
    p_sweep.add_argument("--jobs", type=int, default=1)

    p_an = sub.add_parser(
        "analyze-layers",
        help="run the backdoor-critical layer identification once and print the report",
    )
    p_an.add_argument("config")
    p_an.add_argument("-v", "--verbose", action="count", default=0)

    p_mat = sub.add_parser("matrix", help="attack x defense grid, one CSV row per cell")
    _add_common(p_mat)
    p_mat.add_argument("--attacks", default=",".join(runner.MATRIX_ATTACKS))
    p_mat.add_argument("--defenses", default=",".join(runner.MATRIX_DEFENSES))
    p_mat.add_argument("--jobs", type=int, default=1)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING
    if args.verbose == 1:
        level = logging.INFO
    elif args.verbose >= 2:
        level = logging.DEBUG
    logging.basicConfig(level=level, format="%(message)s")

    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config: {exc}", file=sys.stderr)
        return 2

    try:
        if args.command == "run":
            result = runner.run(cfg, out_dir=_out_dir(args, cfg))
            s = result.summary
            print(
                f"acc={s.acc_last10:.4f} bsr={s.bsr_last10:.4f} "
                f"mar={'n/a' if s.mar is None else f'{s.mar:.4f}'} "
                f"bar={'n/a' if s.bar is None else f'{s.bar:.4f}'}"
            )
        elif args.command == "sweep":
            try:
                values = [float(v) for v in args.values.split(",") if v.strip()]
            except ValueError:
                print(f"sweep: bad --values list: {args.values!r}", file=sys.stderr)
                return 2
            rows = runner.sweep(
                cfg, args.param, values, out_dir=_out_dir(args, cfg), jobs=args.jobs
            )
            for v, bsr, acc in rows:
                print(f"{args.param}={v:g} bsr={bsr:.4f} acc={acc:.4f}")
        elif args.command == "analyze-layers":
            report = runner.analyze_layers(cfg)
            print(report.to_text(), end="")
        elif args.command == "matrix":
            rows = runner.run_matrix(
                cfg,
                attacks=[a for a in args.attacks.split(",") if a],
                defenses=[d for d in args.defenses.split(",") if d],
                out_dir=_out_dir(args, cfg),
                jobs=args.jobs,
            )
            for a, d, acc, bsr, *_ in rows:
                print(f"{a} vs {d}: acc={acc:.4f} bsr={bsr:.4f}")
    except (ValueError, OSError) as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
