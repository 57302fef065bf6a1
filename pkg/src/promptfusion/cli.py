"""Command line: ``promptfusion run|resume|report|plot``."""
from __future__ import annotations

import argparse
import logging
import sys

from . import config as config_mod
from .checkpoint import CheckpointError
from .plots import plot_results
from .report import report_file
from .runner import resume, run


def _cmd_run(args) -> int:
    configs = config_mod.load(args.config)
    if args.only:
        configs = [c for c in configs if c.name in args.only]
        if not configs:
            print(f"no run named {args.only}", file=sys.stderr)
            return 2
    for cfg in configs:
        out = args.output_dir if args.output_dir and len(configs) == 1 else None
        result = run(cfg, output_dir=out, stop_after=args.stop_after)
        summary = result.summary
        tail = f"A_T={summary['A_T']:.4f}" if summary else f"stopped after task {args.stop_after}"
        print(f"{cfg.name}: {tail} -> {result.results_path}")
    return 0


def _cmd_resume(args) -> int:
    cfg = None
    if args.config:
        configs = config_mod.load(args.config)
        if len(configs) != 1:
            print("resume takes a single-run config", file=sys.stderr)
            return 2
        cfg = configs[0]
    result = resume(args.checkpoint, config=cfg, output_dir=args.output_dir, stop_after=args.stop_after)
    summary = result.summary
    print(f"{result.config.name}: A_T={summary['A_T']:.4f} -> {result.results_path}" if summary
          else f"{result.config.name}: resumed -> {result.results_path}")
    return 0


def _cmd_report(args) -> int:
    print(report_file(args.results))
    return 0


def _cmd_plot(args) -> int:
    for path in plot_results(args.results, args.out):
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="promptfusion", description="Continual prompt-tuning runs at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-task progress")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one config or every entry of a multi-run config")
    r.add_argument("--config", required=True)
    r.add_argument("--output-dir", help="override the output directory (single-run configs)")
    r.add_argument("--only", nargs="+", help="run just these named entries")
    r.add_argument("--stop-after", type=int, help="stop after this many tasks")
    r.set_defaults(func=_cmd_run)

    s = sub.add_parser("resume", help="continue from a per-task checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--config", help="must hash-match the checkpoint")
    s.add_argument("--output-dir")
    s.add_argument("--stop-after", type=int)
    s.set_defaults(func=_cmd_resume)

    t = sub.add_parser("report", help="print tables from a results file")
    t.add_argument("--results", required=True)
    t.set_defaults(func=_cmd_report)

    g = sub.add_parser("plot", help="write accuracy and KDE figures")
    g.add_argument("--results", required=True)
    g.add_argument("--out", help="directory for the images (default: next to the results)")
    g.set_defaults(func=_cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (config_mod.ConfigError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
