"""Command line entry points.

    servesim run --config cfg.json --out results/ [--plot]
    servesim plot --report results/ [--out figs/]
    servesim presets --out demo/

Exit codes: 0 success, 2 bad config or input file, 3 simulation error,
4 run finished with unfinished requests (deadline hit).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional

from .config import config_echo, load_config
from .errors import (CrossRefError, IncompleteRun, ParseError, SchemaError,
                     SimError)
from .metrics import read_rows, write_report
from .plots import render_plots
from .presets import preset_names, write_presets
from .simulation import build_simulation

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SIM = 3
EXIT_INCOMPLETE = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="servesim",
        description="Trace-driven simulator for LLM serving clusters.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate one config and write a report")
    run.add_argument("--config", required=True, help="config JSON path")
    run.add_argument("--workload", help="override the config's workload file")
    run.add_argument("--traces", action="append", default=[],
                     metavar="MODEL@HW=PATH",
                     help="override a perf trace path (repeatable)")
    run.add_argument("--seed", type=int, help="override the config's seed")
    run.add_argument("--out", default="results",
                     help="report directory (default: results)")
    run.add_argument("--event-log", help="write the engine event log here")
    run.add_argument("--plot", action="store_true",
                     help="render figures next to the report files")
    run.add_argument("--deadline-us", type=int,
                     help="stop the clock at this simulated time")
    run.add_argument("--allow-incomplete", action="store_true",
                     help="report on whatever finished by the deadline")

    plot = sub.add_parser("plot", help="re-render figures from a report")
    plot.add_argument("--report", required=True,
                      help="directory holding per_request.csv + summary.json")
    plot.add_argument("--out", help="figure directory (default: the report's)")

    presets = sub.add_parser("presets",
                             help="materialize the built-in demo bundles")
    presets.add_argument("--out", default="presets",
                         help="target directory (default: presets)")
    return parser


def _apply_overrides(cfg, args) -> None:
    changed = False
    if args.seed is not None:
        if args.seed < 0:
            raise SchemaError("--seed: must be >= 0")
        cfg.seed = args.seed
        changed = True
    for item in args.traces:
        key, sep, path = item.partition("=")
        if not sep or key.count("@") != 1 or not path:
            raise SchemaError(f"--traces: expected MODEL@HW=PATH, got {item!r}")
        cfg.traces[key] = path
        changed = True
    if changed:
        cfg.echo = config_echo(cfg)


def _open_event_log(path: str):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    try:
        return open(path, "w", encoding="utf-8")
    except OSError as exc:
        raise SchemaError(f"--event-log: cannot open {path!r}: {exc}")


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    log_fh = _open_event_log(args.event_log) if args.event_log else None
    try:
        sink = (lambda line: log_fh.write(line + "\n")) if log_fh else None
        sim = build_simulation(cfg, workload_path=args.workload, log_sink=sink)
        report = sim.run(deadline=args.deadline_us,
                         allow_incomplete=args.allow_incomplete)
    finally:
        if log_fh:
            log_fh.close()
    csv_path, json_path = write_report(report, args.out)
    print(f"wrote {csv_path}")
    print(f"wrote {json_path}")
    if args.plot:
        for path in render_plots(report.rows, report.instances, args.out):
            print(f"wrote {path}")
    agg = report.aggregates
    if agg["requests"]:
        ttft = agg["ttft_us"]
        print(f"{agg['requests']} requests, "
              f"{agg['total_output_tokens']} tokens, "
              f"ttft median={ttft['median'] / 1e3:.2f}ms "
              f"p99={ttft['p99'] / 1e3:.2f}ms, "
              f"{agg['token_throughput_per_s']:.1f} tok/s")
    for warning in report.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    return EXIT_OK


def _cmd_plot(args) -> int:
    csv_path = os.path.join(args.report, "per_request.csv")
    json_path = os.path.join(args.report, "summary.json")
    try:
        rows = read_rows(csv_path)
        with open(json_path, "r", encoding="utf-8") as fh:
            summary = json.load(fh)
    except FileNotFoundError as exc:
        raise ParseError("missing report file", str(exc.filename))
    for path in render_plots(rows, summary.get("instances", {}),
                             args.out or args.report):
        print(f"wrote {path}")
    return EXIT_OK


def _cmd_presets(args) -> int:
    for path in write_presets(args.out):
        print(f"wrote {path}")
    print(f"presets: {', '.join(preset_names())}")
    return EXIT_OK


def main(argv: Optional[list[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "plot":
            return _cmd_plot(args)
        return _cmd_presets(args)
    except (SchemaError, CrossRefError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IncompleteRun as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCOMPLETE
    except SimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SIM


if __name__ == "__main__":
    sys.exit(main())
