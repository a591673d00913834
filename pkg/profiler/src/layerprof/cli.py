"""Command line front end.

    layerprof profile --model tiny-1l --hw cpu --out traces/
    layerprof validate --trace traces/tiny-1l@cpu.csv --model tiny-1l

Exit codes: 0 success, 1 validation flagged at least one shape,
2 bad arguments / missing files / unusable device.
"""

from __future__ import annotations

import argparse
import sys

from .device import get_adapter
from .errors import ProfilerError
from .models import REGISTRY, build_model
from .plan import ProfilePlan, batch_buckets, context_buckets
from .profile import run_profile, write_trace
from .validate import Shape, read_trace, validate_trace


def _parse_shape(text: str) -> Shape:
    parts = text.split(":")
    if len(parts) != 4:
        raise argparse.ArgumentTypeError(
            f"shape must be phase:batch:context:tp, got {text!r}")
    phase, batch, context, tp = parts
    try:
        return phase, int(batch), int(context), int(tp)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"batch/context/tp must be integers in {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="layerprof",
        description="profile per-operator latencies and validate the result")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", help="measure a grid and emit a trace file")
    p.add_argument("--model", required=True, choices=sorted(REGISTRY))
    p.add_argument("--hw", required=True, help="hardware id, e.g. cpu")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--phases", nargs="+", default=["prefill", "decode"])
    p.add_argument("--batches", nargs="+", type=int, default=None,
                   help="default: powers of two up to the model max batch")
    p.add_argument("--contexts", nargs="+", type=int, default=None,
                   help="default: 0 plus powers of two up to the model max")
    p.add_argument("--tp", nargs="+", type=int, default=[1])
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--warmup", type=int, default=3)

    v = sub.add_parser("validate", help="compare a trace against fresh runs")
    v.add_argument("--trace", required=True)
    v.add_argument("--model", required=True, choices=sorted(REGISTRY))
    v.add_argument("--hw", default="cpu")
    v.add_argument("--shapes", nargs="+", type=_parse_shape, default=None,
                   help="phase:batch:context:tp; default samples the trace")
    v.add_argument("--reps", type=int, default=10)
    v.add_argument("--warmup", type=int, default=3)
    v.add_argument("--threshold", type=float, default=0.05)
    return parser


def _default_shapes(trace_path: str, limit: int = 5) -> list[Shape]:
    _mid, _hid, table, _meta = read_trace(trace_path)
    points = sorted({(phase, batch, context, tp)
                     for (_op, phase, batch, context, tp) in table})
    return points[:limit]


def cmd_profile(args) -> int:
    model = build_model(args.model)
    spec = model.spec
    plan = ProfilePlan(
        model_id=args.model, hw_id=args.hw, phases=tuple(args.phases),
        batches=tuple(args.batches if args.batches is not None
                      else batch_buckets(spec.max_batch)),
        contexts=tuple(args.contexts if args.contexts is not None
                       else context_buckets(spec.max_context)),
        tp_degrees=tuple(args.tp), warmup=args.warmup,
        repetitions=args.reps)
    adapter = get_adapter(args.hw)
    result = run_profile(plan, model, adapter)
    for warning in result.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    csv_path, meta_path = write_trace(result, args.out)
    print(f"{len(result.rows)} entries over {plan.grid_size()} grid points "
          f"({len(result.gaps)} gaps)")
    print(csv_path)
    print(meta_path)
    return 0


def cmd_validate(args) -> int:
    model = build_model(args.model)
    adapter = get_adapter(args.hw)
    shapes = args.shapes if args.shapes else _default_shapes(args.trace)
    report = validate_trace(args.trace, model, adapter, shapes,
                            repetitions=args.reps, warmup=args.warmup,
                            flag_threshold=args.threshold)
    for line in report.lines():
        print(line)
    return 1 if report.flagged else 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "profile":
            return cmd_profile(args)
        return cmd_validate(args)
    except ProfilerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
