"""Latency metrics, aggregation and report files.

Definitions (all integer µs inputs):
  TTFT  = first_token_time - arrival_time
  ITL   = gaps between successive emissions after the first token
  TPOT  = (completion - first_token) / (output_len - 1), output_len >= 2
Requests with output_len == 1 have a TTFT but are excluded from TPOT and
contribute no ITL samples. Per request, mean(ITL) == TPOT exactly because
the gaps telescope.

Reports come in two files, both schema-tagged: per-request rows as CSV
(one record per line, including the raw emission timestamps) and a summary
JSON whose latency/throughput aggregates are recomputed from the rows as
written, so re-aggregating the CSV reproduces the summary bit-for-bit.
p99 is nearest-rank on the sorted samples; median interpolates even counts.
"""

from __future__ import annotations

import csv
import json
import math
import os
import statistics
from dataclasses import dataclass, field
from typing import Any, Optional

from .errors import IncompleteRun, NonMonotoneTime, UnknownRequest

PER_REQUEST_SCHEMA = "servesim.per_request.v1"
SUMMARY_SCHEMA = "servesim.summary.v1"

PER_REQUEST_COLUMNS = [
    "request_id", "model_id", "instance_id", "arrival_us", "first_token_us",
    "completion_us", "input_len", "output_len", "ttft_us", "tpot_us",
    "mean_itl_us", "prefix_blocks_matched", "prefix_blocks_lookup",
    "preemptions", "token_times_us",
]


@dataclass
class RequestRecord:
    request_id: str
    arrival_us: int
    input_len: int
    output_len: int
    model_id: str = ""
    instance_id: str = ""
    token_times: list[int] = field(default_factory=list)
    finished_at: Optional[int] = None
    prefix_blocks_matched: int = 0
    prefix_blocks_lookup: int = 0
    preemptions: int = 0


def nearest_rank(sorted_samples: list, q: float):
    """Nearest-rank percentile: the ceil(q*n)-th smallest sample."""
    n = len(sorted_samples)
    if n == 0:
        raise ValueError("no samples")
    rank = max(1, math.ceil(q * n))
    return sorted_samples[rank - 1]


def _agg(samples: list[float]) -> dict[str, float]:
    if not samples:
        return {"count": 0}
    ordered = sorted(samples)
    return {
        "count": len(ordered),
        "mean": float(statistics.fmean(ordered)),
        "median": float(statistics.median(ordered)),
        "p99": float(nearest_rank(ordered, 0.99)),
        "max": float(ordered[-1]),
    }


class MetricsCollector:
    """Observes token emissions; knows nothing about scheduling."""

    def __init__(self) -> None:
        self.records: dict[str, RequestRecord] = {}

    def register(self, request_id: str, arrival_us: int, input_len: int,
                 output_len: int, model_id: str = "") -> None:
        if request_id in self.records:
            raise UnknownRequest(f"request {request_id!r} registered twice")
        self.records[request_id] = RequestRecord(
            request_id, arrival_us, input_len, output_len, model_id)

    def record_token(self, request_id: str, time_us: int) -> None:
        rec = self.records.get(request_id)
        if rec is None:
            raise UnknownRequest(f"token for unregistered request {request_id!r}")
        if rec.finished_at is not None:
            raise UnknownRequest(f"token for finished request {request_id!r}")
        if rec.token_times and time_us <= rec.token_times[-1]:
            raise NonMonotoneTime(
                f"{request_id!r}: token at {time_us} after {rec.token_times[-1]}")
        if time_us < rec.arrival_us:
            raise NonMonotoneTime(
                f"{request_id!r}: token at {time_us} before arrival {rec.arrival_us}")
        rec.token_times.append(time_us)

    def mark_finished(self, request_id: str, time_us: int,
                      instance_id: str = "") -> None:
        rec = self.records.get(request_id)
        if rec is None:
            raise UnknownRequest(f"finish for unregistered request {request_id!r}")
        rec.finished_at = time_us
        if instance_id:
            rec.instance_id = instance_id

    def annotate(self, request_id: str, **fields: Any) -> None:
        rec = self.records[request_id]
        for k, v in fields.items():
            setattr(rec, k, v)

    def unfinished(self) -> list[str]:
        return [r.request_id for r in self.records.values()
                if r.finished_at is None]


def build_rows(records: list[RequestRecord]) -> list[dict[str, Any]]:
    rows = []
    for rec in sorted(records, key=lambda r: (r.arrival_us, r.request_id)):
        assert len(rec.token_times) == rec.output_len, (
            rec.request_id, len(rec.token_times), rec.output_len)
        first = rec.token_times[0]
        done = rec.token_times[-1]
        ttft = first - rec.arrival_us
        if rec.output_len >= 2:
            tpot = (done - first) / (rec.output_len - 1)
            itls = [b - a for a, b in zip(rec.token_times, rec.token_times[1:])]
            mean_itl = float(statistics.fmean(itls))
        else:
            tpot = ""
            mean_itl = ""
        rows.append({
            "request_id": rec.request_id,
            "model_id": rec.model_id,
            "instance_id": rec.instance_id,
            "arrival_us": rec.arrival_us,
            "first_token_us": first,
            "completion_us": done,
            "input_len": rec.input_len,
            "output_len": rec.output_len,
            "ttft_us": ttft,
            "tpot_us": tpot,
            "mean_itl_us": mean_itl,
            "prefix_blocks_matched": rec.prefix_blocks_matched,
            "prefix_blocks_lookup": rec.prefix_blocks_lookup,
            "preemptions": rec.preemptions,
            "token_times_us": " ".join(str(t) for t in rec.token_times),
        })
    return rows


def aggregate_rows(rows: list[dict[str, Any]]) -> dict[str, Any]:
    """Latency/throughput aggregates derived purely from per-request rows."""
    ttfts = [float(r["ttft_us"]) for r in rows]
    tpots = [float(r["tpot_us"]) for r in rows if r["tpot_us"] != ""]
    itls: list[float] = []
    total_tokens = 0
    for r in rows:
        times = [int(t) for t in str(r["token_times_us"]).split()]
        total_tokens += len(times)
        itls.extend(float(b - a) for a, b in zip(times, times[1:]))
    out: dict[str, Any] = {
        "requests": len(rows),
        "total_output_tokens": total_tokens,
        "ttft_us": _agg(ttfts),
        "tpot_us": _agg(tpots),
        "itl_us": _agg(sorted(itls)),
    }
    if rows:
        first_arrival = min(int(r["arrival_us"]) for r in rows)
        last_done = max(int(r["completion_us"]) for r in rows)
        span_us = last_done - first_arrival
        out["span_us"] = span_us
        if span_us > 0:
            out["token_throughput_per_s"] = total_tokens / (span_us / 1e6)
            out["request_throughput_per_s"] = len(rows) / (span_us / 1e6)
        else:
            out["token_throughput_per_s"] = 0.0
            out["request_throughput_per_s"] = 0.0
    return out


@dataclass
class Report:
    seed: int
    config_echo: dict[str, Any]
    rows: list[dict[str, Any]]
    aggregates: dict[str, Any]
    instances: dict[str, Any] = field(default_factory=dict)
    cache: dict[str, Any] = field(default_factory=dict)
    counters: dict[str, Any] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def summary_dict(self) -> dict[str, Any]:
        return {
            "schema": SUMMARY_SCHEMA,
            "seed": self.seed,
            "aggregates": self.aggregates,
            "instances": self.instances,
            "cache": self.cache,
            "counters": self.counters,
            "warnings": self.warnings,
            "config_echo": self.config_echo,
        }


def finalize(collector: MetricsCollector, *, seed: int,
             config_echo: dict[str, Any],
             instances: Optional[dict[str, Any]] = None,
             cache: Optional[dict[str, Any]] = None,
             counters: Optional[dict[str, Any]] = None,
             warnings: Optional[list[str]] = None,
             allow_incomplete: bool = False) -> Report:
    pending = collector.unfinished()
    if pending and not allow_incomplete:
        raise IncompleteRun(pending)
    done = [r for r in collector.records.values() if r.finished_at is not None]
    rows = build_rows(done)
    return Report(seed=seed, config_echo=config_echo, rows=rows,
                  aggregates=aggregate_rows(rows),
                  instances=dict(instances or {}),
                  cache=dict(cache or {}),
                  counters=dict(counters or {}),
                  warnings=list(warnings or []))


def write_report(report: Report, out_dir: str) -> tuple[str, str]:
    """Write per_request.csv and summary.json; self-check on the way out.

    The CSV is re-read and re-aggregated before the summary lands on disk;
    any mismatch against the in-memory aggregates is a hard error.
    """
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "per_request.csv")
    json_path = os.path.join(out_dir, "summary.json")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# schema: {PER_REQUEST_SCHEMA}\n")
        writer = csv.DictWriter(fh, fieldnames=PER_REQUEST_COLUMNS)
        writer.writeheader()
        for row in report.rows:
            writer.writerow(row)
    check = aggregate_rows(read_rows(csv_path))
    if check != report.aggregates:
        raise AssertionError("per-request rows do not reproduce the aggregates")
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report.summary_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return csv_path, json_path


def read_rows(csv_path: str) -> list[dict[str, Any]]:
    """Parse a per-request CSV back into typed row dicts."""
    with open(csv_path, "r", encoding="utf-8", newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    rows = []
    for raw in reader:
        row = dict(raw)
        for col in ("arrival_us", "first_token_us", "completion_us",
                    "input_len", "output_len", "ttft_us",
                    "prefix_blocks_matched", "prefix_blocks_lookup",
                    "preemptions"):
            row[col] = int(row[col])
        for col in ("tpot_us", "mean_itl_us"):
            row[col] = float(row[col]) if row[col] != "" else ""
        rows.append(row)
    return rows
