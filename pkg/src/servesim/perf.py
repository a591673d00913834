"""Profiled latency tables and iteration pricing.

A perf trace is a CSV with the exact header
``model_id,hw_id,op_kind,phase,batch,context,tp_degree,latency_us`` plus a
JSON sidecar (same stem, ``.meta.json``) describing the model: layer count,
hidden size, KV bytes per token per layer, dtype width, and expert shape for
MoE models. `#` starts a comment, blank lines are skipped, and one file
binds exactly one (model_id, hw_id) pair.

Lookups hit stored points exactly. A missing (batch, context) point inside
the profiled hull is bilinearly interpolated from the nearest profiled
batch/context values; outside the hull the nearest two points extrapolate
linearly, clamped below at the minimum profiled latency for that operator
slice. `batch` means total tokens for prefill entries and sequence count
for decode entries; `context` is the KV length the batch attends over.

Op kinds Attention/FFN/Norm (and any other name) are priced once per layer;
Embedding and LMHead once per iteration; ExpertFFN is priced by the MoE
module only and is excluded from the dense path.
"""

from __future__ import annotations

import csv
import json
import math
import os
from bisect import bisect_left
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from .errors import DuplicateKey, EmptyTable, NoDataForOperator, ParseError
from .network import round_half_up

TRACE_HEADER = ["model_id", "hw_id", "op_kind", "phase", "batch",
                "context", "tp_degree", "latency_us"]

META_SCHEMA = "servesim.model_meta.v1"


class Phase(Enum):
    PREFILL = "prefill"
    DECODE = "decode"


# canonical operator names; any other string is accepted and priced per-layer
OP_ATTENTION = "Attention"
OP_FFN = "FFN"
OP_EXPERT_FFN = "ExpertFFN"
OP_NORM = "Norm"
OP_EMBEDDING = "Embedding"
OP_LM_HEAD = "LMHead"

_PER_ITERATION_OPS = {OP_EMBEDDING, OP_LM_HEAD}


@dataclass(frozen=True)
class PerfKey:
    model_id: str
    hw_id: str
    op_kind: str
    phase: Phase
    batch: int
    context: int
    tp_degree: int


@dataclass
class ModelMeta:
    model_id: str
    layer_count: int
    hidden_size: int
    kv_bytes_per_token_per_layer: int
    dtype_bytes: int = 2
    expert_count: int = 0
    top_k: int = 0
    expert_weight_bytes: int = 0

    def validate(self, path: str) -> None:
        if self.layer_count < 1:
            raise ParseError("layer_count must be >= 1", path)
        if self.hidden_size < 1:
            raise ParseError("hidden_size must be >= 1", path)
        if self.kv_bytes_per_token_per_layer < 0:
            raise ParseError("kv_bytes_per_token_per_layer must be >= 0", path)
        if self.dtype_bytes < 1:
            raise ParseError("dtype_bytes must be >= 1", path)
        if self.expert_count < 0 or self.top_k < 0:
            raise ParseError("expert fields must be >= 0", path)
        if self.expert_count and not (1 <= self.top_k <= self.expert_count):
            raise ParseError("top_k must be in [1, expert_count]", path)

    @property
    def is_moe(self) -> bool:
        return self.expert_count > 0


# slice = one operator's profiled surface at fixed (op, phase, tp)
_Slice = dict[int, dict[int, int]]          # batch -> context -> latency_us


class PerfTable:
    """Immutable-after-load latency table for one (model, hw) pair."""

    def __init__(self, model_id: str, hw_id: str, meta: ModelMeta,
                 entries: dict[PerfKey, int]):
        self.model_id = model_id
        self.hw_id = hw_id
        self.meta = meta
        self.entries = entries
        self._slices: dict[tuple[str, Phase, int], _Slice] = {}
        self._slice_min: dict[tuple[str, Phase, int], int] = {}
        self._ops_by_phase: dict[Phase, set[str]] = {Phase.PREFILL: set(),
                                                     Phase.DECODE: set()}
        for key, lat in entries.items():
            sk = (key.op_kind, key.phase, key.tp_degree)
            self._slices.setdefault(sk, {}).setdefault(key.batch, {})[key.context] = lat
            cur = self._slice_min.get(sk)
            self._slice_min[sk] = lat if cur is None else min(cur, lat)
            self._ops_by_phase[key.phase].add(key.op_kind)

    def op_kinds(self, phase: Phase) -> list[str]:
        return sorted(self._ops_by_phase[phase])

    def tp_degrees(self, op_kind: str, phase: Phase) -> list[int]:
        return sorted({tp for (op, ph, tp) in self._slices
                       if op == op_kind and ph == phase})

    def has_slice(self, op_kind: str, phase: Phase, tp: int) -> bool:
        return (op_kind, phase, tp) in self._slices


def meta_sidecar_path(trace_path: str) -> str:
    stem, ext = os.path.splitext(trace_path)
    return (stem if ext == ".csv" else trace_path) + ".meta.json"


def load_model_meta(path: str) -> ModelMeta:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ParseError("missing model_meta sidecar", path)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON in model_meta sidecar: {exc}", path)
    if not isinstance(raw, dict):
        raise ParseError("model_meta sidecar must be a JSON object", path)
    known = {"schema", "model_id", "layer_count", "hidden_size",
             "kv_bytes_per_token_per_layer", "dtype_bytes",
             "expert_count", "top_k", "expert_weight_bytes"}
    for k in raw:
        if k not in known:
            raise ParseError(f"unknown model_meta field {k!r}", path)
    try:
        meta = ModelMeta(
            model_id=str(raw["model_id"]),
            layer_count=int(raw["layer_count"]),
            hidden_size=int(raw["hidden_size"]),
            kv_bytes_per_token_per_layer=int(raw["kv_bytes_per_token_per_layer"]),
            dtype_bytes=int(raw.get("dtype_bytes", 2)),
            expert_count=int(raw.get("expert_count", 0)),
            top_k=int(raw.get("top_k", 0)),
            expert_weight_bytes=int(raw.get("expert_weight_bytes", 0)),
        )
    except KeyError as exc:
        raise ParseError(f"model_meta sidecar missing field {exc.args[0]!r}", path)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"bad model_meta value: {exc}", path)
    meta.validate(path)
    return meta


def load_trace(path: str) -> PerfTable:
    """Parse a perf trace file plus its model_meta sidecar."""
    entries: dict[PerfKey, int] = {}
    model_id: Optional[str] = None
    hw_id: Optional[str] = None
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except FileNotFoundError:
        raise ParseError("no such trace file", path)
    with fh:
        header_seen = False
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            fields = next(csv.reader([line]))
            fields = [f.strip() for f in fields]
            if not header_seen:
                if fields != TRACE_HEADER:
                    raise ParseError(
                        f"expected header {','.join(TRACE_HEADER)!r}", path, lineno)
                header_seen = True
                continue
            if len(fields) != len(TRACE_HEADER):
                raise ParseError(
                    f"expected {len(TRACE_HEADER)} fields, got {len(fields)}",
                    path, lineno)
            mid, hid, op, phase_s, batch_s, ctx_s, tp_s, lat_s = fields
            if not mid or not hid or not op:
                raise ParseError("empty id field", path, lineno)
            try:
                phase = Phase(phase_s)
            except ValueError:
                raise ParseError(f"phase must be prefill|decode, got {phase_s!r}",
                                 path, lineno)
            try:
                batch, ctx, tp, lat = int(batch_s), int(ctx_s), int(tp_s), int(lat_s)
            except ValueError:
                raise ParseError("batch/context/tp_degree/latency_us must be integers",
                                 path, lineno)
            if batch < 1:
                raise ParseError("batch must be >= 1", path, lineno)
            if ctx < 0:
                raise ParseError("context must be >= 0", path, lineno)
            if tp < 1:
                raise ParseError("tp_degree must be >= 1", path, lineno)
            if lat <= 0:
                raise ParseError("latency_us must be positive", path, lineno)
            if model_id is None:
                model_id, hw_id = mid, hid
            elif (mid, hid) != (model_id, hw_id):
                raise ParseError(
                    f"file mixes ({mid},{hid}) with ({model_id},{hw_id}); "
                    "one trace file binds one model/hw pair", path, lineno)
            key = PerfKey(mid, hid, op, phase, batch, ctx, tp)
            if key in entries:
                raise DuplicateKey(f"duplicate key {key}", path, lineno)
            entries[key] = lat
        if not header_seen:
            raise ParseError("missing header row", path)
    if not entries:
        raise EmptyTable("trace holds zero data rows", path)
    meta = load_model_meta(meta_sidecar_path(path))
    if meta.model_id != model_id:
        raise ParseError(
            f"sidecar model_id {meta.model_id!r} != trace model_id {model_id!r}",
            meta_sidecar_path(path))
    return PerfTable(model_id, hw_id, meta, entries)


# --- interpolation ---

def _interp_points(xs: list[int], ys: list[float], x: int) -> float:
    """Piecewise-linear over sorted xs; linear extrapolation outside."""
    n = len(xs)
    if n == 1:
        return ys[0]
    if x <= xs[0]:
        x0, x1, y0, y1 = xs[0], xs[1], ys[0], ys[1]
    elif x >= xs[-1]:
        x0, x1, y0, y1 = xs[-2], xs[-1], ys[-2], ys[-1]
    else:
        i = bisect_left(xs, x)
        if xs[i] == x:
            return ys[i]
        x0, x1, y0, y1 = xs[i - 1], xs[i], ys[i - 1], ys[i]
    t = (x - x0) / (x1 - x0)
    return y0 + t * (y1 - y0)


def _slice_value(sl: _Slice, batch: int, context: int) -> float:
    row = sl.get(batch)
    if row is not None and context in row:
        return float(row[context])
    batches = sorted(sl)
    col: list[float] = []
    for b in batches:
        row = sl[b]
        ctxs = sorted(row)
        col.append(_interp_points(ctxs, [float(row[c]) for c in ctxs], context))
    return _interp_points(batches, col, batch)


def _fallback_tp(table: PerfTable, op: str, phase: Phase, want: int) -> Optional[int]:
    degrees = table.tp_degrees(op, phase)
    if not degrees:
        return None
    return min(degrees, key=lambda d: (abs(math.log2(d) - math.log2(want)), d))


def lookup_latency(table: PerfTable, key: PerfKey, tp_fallback: bool = False) -> int:
    """Latency for one operator invocation, integer µs (always >= 1)."""
    if key.model_id != table.model_id or key.hw_id != table.hw_id:
        raise NoDataForOperator(
            f"table is for ({table.model_id},{table.hw_id}), "
            f"key asks ({key.model_id},{key.hw_id})")
    stored = table.entries.get(key)
    if stored is not None:
        return stored
    sk = (key.op_kind, key.phase, key.tp_degree)
    sl = table._slices.get(sk)
    scale = 1.0
    if sl is None:
        if tp_fallback:
            # approximate a missing TP degree by linear compute scaling from
            # the closest profiled degree; collectives are priced separately
            got = _fallback_tp(table, key.op_kind, key.phase, key.tp_degree)
            if got is not None:
                sk = (key.op_kind, key.phase, got)
                sl = table._slices[sk]
                scale = got / key.tp_degree
        if sl is None:
            raise NoDataForOperator(
                f"no entries for op={key.op_kind} phase={key.phase.value} "
                f"tp={key.tp_degree} in ({table.model_id},{table.hw_id})")
    value = _slice_value(sl, key.batch, key.context) * scale
    floor = table._slice_min[sk] * scale
    return max(1, round_half_up(max(value, floor)))


class LatencyResolver:
    """Lookup front-end that counts TP-fallback approximations for reports."""

    def __init__(self, table: PerfTable, tp_fallback: bool = False):
        self.table = table
        self.tp_fallback = tp_fallback
        self.fallback_hits = 0

    def lookup(self, op_kind: str, phase: Phase, batch: int, context: int,
               tp_degree: int) -> int:
        key = PerfKey(self.table.model_id, self.table.hw_id, op_kind, phase,
                      batch, context, tp_degree)
        if (self.tp_fallback
                and not self.table.has_slice(op_kind, phase, tp_degree)):
            self.fallback_hits += 1
        return lookup_latency(self.table, key, tp_fallback=self.tp_fallback)


# --- iteration pricing (dense path) ---

@dataclass
class BatchComposition:
    """What one engine iteration processes.

    prefill_tokens: total new prompt tokens across admitted prefill chunks
    prefill_context: largest KV length already held by any prefill sequence
    decode_seqs: sequences taking one decode step
    decode_context: largest KV length attended over by any decode sequence
    """
    prefill_tokens: int = 0
    prefill_context: int = 0
    decode_seqs: int = 0
    decode_context: int = 0

    @property
    def total_tokens(self) -> int:
        return self.prefill_tokens + self.decode_seqs

    @property
    def empty(self) -> bool:
        return self.total_tokens == 0


@dataclass
class DenseCosts:
    embed_us: int
    per_layer_us: int
    lmhead_us: int


def per_layer_dense_costs(table: PerfTable, comp: BatchComposition,
                          tp_degree: int,
                          allreduce_time: Optional[Callable[[int], int]] = None,
                          tp_fallback: bool = False,
                          resolver: Optional[LatencyResolver] = None) -> DenseCosts:
    """Price the non-expert operators of one iteration.

    Prefill tokens and decode sequences are priced separately per operator
    and summed. When tp_degree > 1, one all-reduce over the iteration's
    activation bytes is added per layer via `allreduce_time`.
    """
    if resolver is None:
        resolver = LatencyResolver(table, tp_fallback)
    embed = per_layer = lmhead = 0
    parts = []
    if comp.prefill_tokens > 0:
        parts.append((Phase.PREFILL, comp.prefill_tokens, comp.prefill_context))
    if comp.decode_seqs > 0:
        parts.append((Phase.DECODE, comp.decode_seqs, comp.decode_context))
    for phase, batch, ctx in parts:
        for op in table.op_kinds(phase):
            if op == OP_EXPERT_FFN:
                continue
            lat = resolver.lookup(op, phase, batch, ctx, tp_degree)
            if op == OP_EMBEDDING:
                embed += lat
            elif op == OP_LM_HEAD:
                lmhead += lat
            else:
                per_layer += lat
    if tp_degree > 1 and allreduce_time is not None and not comp.empty:
        nbytes = comp.total_tokens * table.meta.hidden_size * table.meta.dtype_bytes
        per_layer += allreduce_time(nbytes)
    return DenseCosts(embed, per_layer, lmhead)


def stage_layer_counts(layer_count: int, pp_degree: int) -> list[int]:
    """Split layers across pipeline stages; earlier stages take remainders."""
    base, extra = divmod(layer_count, pp_degree)
    return [base + (1 if s < extra else 0) for s in range(pp_degree)]


def iteration_latency(table: PerfTable, comp: BatchComposition,
                      tp_degree: int = 1, pp_degree: int = 1,
                      allreduce_time: Optional[Callable[[int], int]] = None,
                      tp_fallback: bool = False) -> list[int]:
    """Per-pipeline-stage latency of one iteration over the dense operators.

    Embedding lands in the first stage, LMHead in the last; summing the
    returned stages with any pp equals the pp=1 latency when collective
    terms are zero.
    """
    costs = per_layer_dense_costs(table, comp, tp_degree, allreduce_time,
                                  tp_fallback)
    counts = stage_layer_counts(table.meta.layer_count, pp_degree)
    stages = []
    for s, n in enumerate(counts):
        lat = n * costs.per_layer_us
        if s == 0:
            lat += costs.embed_us
        if s == pp_degree - 1:
            lat += costs.lmhead_us
        stages.append(lat)
    return stages
