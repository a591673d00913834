"""Trace validation: does the table reproduce end-to-end iteration latency?

For each requested shape the model runs for real through the adapter and
the median end-to-end pass latency is compared against the prediction the
table implies: Embedding + LMHead once plus layer_count times each
per-layer operator entry at that exact grid point. The report carries
per-shape relative error, the mean, and which shapes exceed the flag
threshold. Shapes whose grid point was never profiled are reported as
coverage gaps rather than silently interpolated; validation is meant to
judge measured entries, not the consumer's interpolation.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from statistics import median
from typing import Sequence

from .device import DeviceAdapter
from .errors import CoverageGap, PlanError
from .models import ToyModel
from .profile import TRACE_HEADER

Shape = tuple[str, int, int, int]           # (phase, batch, context, tp)


@dataclass(frozen=True)
class ShapeCheck:
    phase: str
    batch: int
    context: int
    tp_degree: int
    predicted_us: float
    measured_us: float
    rel_error: float
    flagged: bool


@dataclass(frozen=True)
class GapRecord:
    phase: str
    batch: int
    context: int
    tp_degree: int
    missing_op: str


@dataclass
class ValidationReport:
    trace_path: str
    model_id: str
    shapes: list[ShapeCheck]
    coverage_gaps: list[GapRecord]
    flag_threshold: float

    @property
    def mean_rel_error(self) -> float:
        return sum(s.rel_error for s in self.shapes) / len(self.shapes)

    @property
    def flagged(self) -> list[ShapeCheck]:
        return [s for s in self.shapes if s.flagged]

    def lines(self) -> list[str]:
        out = []
        for s in self.shapes:
            mark = "  FLAG" if s.flagged else ""
            out.append(f"{s.phase} batch={s.batch} context={s.context} "
                       f"tp={s.tp_degree}: predicted={s.predicted_us:.1f}us "
                       f"measured={s.measured_us:.1f}us "
                       f"rel_error={100 * s.rel_error:.3f}%{mark}")
        for g in self.coverage_gaps:
            out.append(f"coverage gap: {g.missing_op} {g.phase} "
                       f"batch={g.batch} context={g.context} "
                       f"tp={g.tp_degree} was never profiled")
        out.append(f"mean_rel_error={100 * self.mean_rel_error:.3f}% over "
                   f"{len(self.shapes)} shapes; {len(self.flagged)} flagged "
                   f"at {100 * self.flag_threshold:.1f}%")
        return out


def read_trace(path: str) -> tuple[str, str, dict[tuple, int], dict]:
    """Parse a trace CSV plus sidecar with this package's own reader.

    The simulator owns the authoritative parser; this one exists so the
    profiler stays decoupled from it and talks only through the file.
    """
    rows: dict[tuple, int] = {}
    model_id = hw_id = None
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except FileNotFoundError:
        raise PlanError(f"no such trace file: {path}")
    with fh:
        reader = csv.reader(fh)
        header = None
        for fields in reader:
            if not fields or fields[0].lstrip().startswith("#"):
                continue
            fields = [f.strip() for f in fields]
            if header is None:
                if fields != TRACE_HEADER:
                    raise PlanError(f"{path}: unexpected trace header")
                header = fields
                continue
            mid, hid, op, phase, batch, context, tp, lat = fields
            model_id, hw_id = mid, hid
            rows[(op, phase, int(batch), int(context), int(tp))] = int(lat)
    if not rows:
        raise PlanError(f"{path}: no data rows")
    stem, ext = os.path.splitext(path)
    meta_path = (stem if ext == ".csv" else path) + ".meta.json"
    with open(meta_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    return model_id, hw_id, rows, meta


def predicted_pass_us(model: ToyModel, table: dict[tuple, int],
                      shape: Shape) -> tuple[float | None, str | None]:
    """Sum table entries over the op sequence; None plus the missing op
    when the shape falls outside the profiled grid."""
    phase, batch, context, tp = shape
    total = 0
    for op_kind, _layer in model.op_sequence(phase):
        entry = table.get((op_kind, phase, batch, context, tp))
        if entry is None:
            return None, op_kind
        total += entry
    return float(total), None


def validate_trace(trace_path: str, model: ToyModel, adapter: DeviceAdapter,
                   shapes: Sequence[Shape], *, repetitions: int = 10,
                   warmup: int = 3, flag_threshold: float = 0.05
                   ) -> ValidationReport:
    if repetitions < 3 or warmup < 1:
        raise PlanError("validation needs repetitions >= 3 and warmup >= 1")
    model_id, _hw, table, meta = read_trace(trace_path)
    if model_id != model.spec.model_id:
        raise PlanError(f"trace was profiled for {model_id!r}, validation "
                        f"asked for {model.spec.model_id!r}")
    if meta.get("layer_count") != model.spec.layer_count:
        raise PlanError("sidecar layer_count disagrees with the model; "
                        "refusing to compare mismatched structures")
    checks: list[ShapeCheck] = []
    gaps: list[GapRecord] = []
    for shape in shapes:
        phase, batch, context, tp = shape
        predicted, missing = predicted_pass_us(model, table, shape)
        if predicted is None:
            gaps.append(GapRecord(phase, batch, context, tp, missing))
            continue
        steps = model.op_steps(phase, batch, context, tp)
        totals: list[float] = []
        for rep in range(warmup + repetitions):
            timing = adapter.time_pass(steps, phase=phase, batch=batch,
                                       context=context, tp_degree=tp,
                                       rep=rep - warmup)
            if rep >= warmup:
                totals.append(timing.total_us)
        measured = median(totals)
        rel = abs(measured - predicted) / predicted
        checks.append(ShapeCheck(phase, batch, context, tp, predicted,
                                 measured, rel, rel > flag_threshold))
    if not checks:
        raise CoverageGap(
            "every requested shape falls outside the profiled grid; "
            "profile those shapes first")
    return ValidationReport(trace_path, model_id, checks, gaps,
                            flag_threshold)
