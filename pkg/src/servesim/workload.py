"""Request traces: parsing and arrival synthesis.

A workload file holds one request per line:
``request_id,input_len,output_len[,arrival_time_us][,model_id]``
with `#` comments and blank lines ignored; a leading header row whose first
field is exactly ``request_id`` is skipped. Token ids live in an optional
sidecar (same stem, ``.tokens`` suffix) with lines of the form
``request_id: id id id ...``; when present, the id count must equal the
record's input_len.

Records without arrival times get them from synthesize_arrivals: a Poisson
process realized as inverse-CDF exponential gaps on a Philox stream, gaps
accumulated in float µs and each cumulative instant rounded half-up, so the
sequence is non-decreasing and bit-reproducible under a fixed seed.
Explicit arrival times in the file are never overwritten.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DuplicateId, ParseError, TokenCountMismatch
from .network import round_half_up
from .rng import STREAM_ARRIVALS, philox_stream


@dataclass
class WorkloadRecord:
    request_id: str
    input_len: int
    output_len: int
    arrival_time_us: Optional[int] = None
    model_id: Optional[str] = None
    token_ids: Optional[tuple[int, ...]] = None


def tokens_sidecar_path(path: str) -> str:
    stem, ext = os.path.splitext(path)
    return (stem if ext else path) + ".tokens"


def load_workload(path: str) -> list[WorkloadRecord]:
    records: list[WorkloadRecord] = []
    seen: dict[str, int] = {}
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except FileNotFoundError:
        raise ParseError("no such workload file", path)
    with fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            fields = [f.strip() for f in next(csv.reader([line]))]
            if fields[0] == "request_id":
                continue
            if not 3 <= len(fields) <= 5:
                raise ParseError(f"expected 3-5 fields, got {len(fields)}",
                                 path, lineno)
            rid = fields[0]
            if not rid:
                raise ParseError("empty request_id", path, lineno)
            if rid in seen:
                raise DuplicateId(
                    f"request_id {rid!r} already defined on line {seen[rid]}",
                    path, lineno)
            seen[rid] = lineno
            try:
                input_len = int(fields[1])
                output_len = int(fields[2])
            except ValueError:
                raise ParseError("input_len/output_len must be integers",
                                 path, lineno)
            if input_len < 1 or output_len < 1:
                raise ParseError("input_len and output_len must be >= 1",
                                 path, lineno)
            arrival: Optional[int] = None
            model: Optional[str] = None
            if len(fields) >= 4 and fields[3] != "":
                try:
                    arrival = int(fields[3])
                except ValueError:
                    raise ParseError("arrival_time_us must be an integer",
                                     path, lineno)
                if arrival < 0:
                    raise ParseError("arrival_time_us must be >= 0", path, lineno)
            if len(fields) == 5 and fields[4] != "":
                model = fields[4]
            records.append(WorkloadRecord(rid, input_len, output_len,
                                          arrival, model))
    side = tokens_sidecar_path(path)
    if os.path.exists(side):
        _load_tokens(side, records)
    return records


def _load_tokens(path: str, records: list[WorkloadRecord]) -> None:
    by_id = {r.request_id: r for r in records}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if ":" not in line:
                raise ParseError("expected 'request_id: id id ...'", path, lineno)
            rid, _, rest = line.partition(":")
            rid = rid.strip()
            rec = by_id.get(rid)
            if rec is None:
                raise ParseError(f"unknown request_id {rid!r}", path, lineno)
            if rec.token_ids is not None:
                raise DuplicateId(f"token ids for {rid!r} given twice",
                                  path, lineno)
            try:
                ids = tuple(int(tok) for tok in rest.split())
            except ValueError:
                raise ParseError("token ids must be integers", path, lineno)
            if len(ids) != rec.input_len:
                raise TokenCountMismatch(
                    f"{rid!r}: {len(ids)} token ids but input_len="
                    f"{rec.input_len}", path, lineno)
            rec.token_ids = ids


def synthesize_arrivals(records: list[WorkloadRecord], rate_per_s: float,
                        seed: int) -> list[WorkloadRecord]:
    """Fill missing arrival times from a seeded Poisson process, in place.

    Returns the same list for chaining. Gaps are drawn for every record
    that lacks a time, in file order, cumulated from t=0.
    """
    if rate_per_s <= 0:
        raise ValueError("rate_per_s must be positive")
    missing = [r for r in records if r.arrival_time_us is None]
    if not missing:
        return records
    gen = philox_stream(seed, STREAM_ARRIVALS)
    u = gen.random(len(missing))
    gaps_us = -np.log1p(-u) / rate_per_s * 1e6
    cum = 0.0
    for rec, gap in zip(missing, gaps_us):
        cum += float(gap)
        rec.arrival_time_us = round_half_up(cum)
    return records


def exponential_gap_stats(n: int, rate_per_s: float, seed: int) -> tuple[float, float]:
    """Mean and stdev (µs) of n synthesized gaps; used by calibration tests."""
    gen = philox_stream(seed, STREAM_ARRIVALS)
    u = gen.random(n)
    gaps_us = -np.log1p(-u) / rate_per_s * 1e6
    return float(np.mean(gaps_us)), float(np.std(gaps_us))
