"""Grid profiling and trace emission.

For every grid point the model's forward pass runs ``warmup`` unrecorded
times, then ``repetitions`` recorded times through the device adapter.
One table entry per (op_kind, phase, batch, context, tp_degree) is the
median of all recorded samples for that operator (layers pool their
samples: the table prices "one layer's worth" of each per-layer op).

A grid point the device cannot fit becomes a recorded gap plus a warning;
it never becomes an invented number. Grid points run sequentially in one
device context, so the numbers are not polluted by co-scheduling.

The emitted file pair (CSV trace plus ``.meta.json`` sidecar) follows the
consumer's format exactly: header
``model_id,hw_id,op_kind,phase,batch,context,tp_degree,latency_us`` and a
``servesim.model_meta.v1`` metadata object.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from statistics import median
from typing import Optional

from .device import DeviceAdapter
from .errors import OOMAtGridPoint
from .models import ToyModel
from .plan import ProfilePlan

TRACE_HEADER = ["model_id", "hw_id", "op_kind", "phase", "batch",
                "context", "tp_degree", "latency_us"]


def round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


@dataclass(frozen=True)
class GridGap:
    phase: str
    batch: int
    context: int
    tp_degree: int
    reason: str


@dataclass
class ProfileResult:
    model_id: str
    hw_id: str
    # (op_kind, phase, batch, context, tp_degree) -> latency_us
    rows: dict[tuple[str, str, int, int, int], int]
    gaps: list[GridGap]
    warnings: list[str]
    meta: dict


def run_profile(plan: ProfilePlan, model: ToyModel,
                adapter: DeviceAdapter) -> ProfileResult:
    if plan.model_id != model.spec.model_id:
        raise ValueError(f"plan is for {plan.model_id!r}, model is "
                         f"{model.spec.model_id!r}")
    rows: dict[tuple[str, str, int, int, int], int] = {}
    gaps: list[GridGap] = []
    warnings: list[str] = []
    for phase, batch, context, tp in plan.grid():
        try:
            adapter.ensure_fits(
                phase=phase, batch=batch, context=context, tp_degree=tp,
                elements=model.estimate_elements(phase, batch, context, tp))
        except OOMAtGridPoint as exc:
            gaps.append(GridGap(phase, batch, context, tp, str(exc)))
            warnings.append(f"skipped {phase} batch={batch} context={context} "
                            f"tp={tp}: {exc}")
            continue
        steps = model.op_steps(phase, batch, context, tp)
        samples: dict[str, list[float]] = {}
        for rep in range(plan.warmup + plan.repetitions):
            timing = adapter.time_pass(steps, phase=phase, batch=batch,
                                       context=context, tp_degree=tp,
                                       rep=rep - plan.warmup)
            if rep < plan.warmup:
                continue
            for op_kind, _layer, us in timing.per_op:
                samples.setdefault(op_kind, []).append(us)
        for op_kind, vals in samples.items():
            lat = max(1, round_half_up(median(vals)))
            rows[(op_kind, phase, batch, context, tp)] = lat
    return ProfileResult(plan.model_id, plan.hw_id, rows, gaps, warnings,
                         model.model_meta())


def trace_paths(out_dir: str, model_id: str, hw_id: str) -> tuple[str, str]:
    stem = os.path.join(out_dir, f"{model_id}@{hw_id}")
    return stem + ".csv", stem + ".meta.json"


def write_trace(result: ProfileResult, out_dir: str) -> tuple[str, str]:
    """Write the trace CSV and its metadata sidecar; return both paths."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path, meta_path = trace_paths(out_dir, result.model_id, result.hw_id)
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_HEADER)
        for key in sorted(result.rows):
            op_kind, phase, batch, context, tp = key
            writer.writerow([result.model_id, result.hw_id, op_kind, phase,
                             batch, context, tp, result.rows[key]])
    with open(meta_path, "w", encoding="utf-8") as fh:
        json.dump(result.meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return csv_path, meta_path
