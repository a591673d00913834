"""Reference scheduler that advances time one microsecond at a time.

This is the slow, obviously-correct twin of the event-driven engine for
the single-instance dense case (one unified instance, tp=pp=1, prefix
caching off). Every tick it settles in a fixed order: finish the running
batch if it ends now, accept arrivals stamped now, then, if idle, form a
batch under the same admission rules the replica scheduler uses. Running
both on the same inputs and comparing per-request token timestamps
exactly is the strongest cheap check that event compression in the real
engine never reorders or reprices anything.

Only the latency table lookup is shared with the engine; batching,
memory accounting and preemption are re-derived here from the rules, not
imported, so a bug in either implementation shows up as a timestamp
mismatch instead of agreeing with itself.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from .perf import (OP_EMBEDDING, OP_EXPERT_FFN, OP_LM_HEAD, PerfKey,
                   PerfTable, Phase, lookup_latency)


class OracleDeadlock(RuntimeError):
    pass


@dataclass
class OracleRequest:
    request_id: str
    arrival_us: int
    input_len: int
    output_len: int

    state: str = "queued"           # queued | prefill | decode | done
    effective_input: int = 0
    prefill_done: int = 0
    kv_len: int = 0
    n_blocks: int = 0
    tokens_generated: int = 0
    admission_seq: Optional[int] = None
    preemptions: int = 0
    token_times: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.effective_input = self.input_len


@dataclass
class _RunningBatch:
    completion: int
    decode_reqs: list[OracleRequest]
    prefill_pieces: list[tuple[OracleRequest, int]]


class TickOracle:
    """One unified dense instance, stepped literally microsecond by
    microsecond. device_capacity/nbytes_per_block mirror the pool's
    byte-level accounting."""

    def __init__(self, table: PerfTable, requests: list[tuple[str, int, int, int]],
                 *, block_size: int, device_capacity: int,
                 nbytes_per_block: int, max_batch_tokens: int = 8192,
                 max_batch_seqs: int = 256, prefill_chunk: int = 512,
                 policy: str = "fifo"):
        self.table = table
        self.block_size = block_size
        self.device_capacity = device_capacity
        self.nbytes_per_block = nbytes_per_block
        self.used_bytes = 0
        self.max_batch_tokens = max_batch_tokens
        self.max_batch_seqs = max_batch_seqs
        self.prefill_chunk = prefill_chunk
        self.policy = policy
        self.requests = [OracleRequest(rid, at, il, ol)
                         for rid, at, il, ol in requests]
        self.arrivals: dict[int, list[OracleRequest]] = {}
        for req in sorted(self.requests, key=lambda r: (r.arrival_us, r.request_id)):
            self.arrivals.setdefault(req.arrival_us, []).append(req)
        self.queue: deque[OracleRequest] = deque()
        self.admitted_prefill: list[OracleRequest] = []
        self.decoding: list[OracleRequest] = []
        self.running: Optional[_RunningBatch] = None
        self._seq = 0

    # --- memory, counted in bytes exactly like the pool ---

    def _try_alloc(self, n_blocks: int) -> bool:
        need = n_blocks * self.nbytes_per_block
        if self.used_bytes + need > self.device_capacity:
            return False
        self.used_bytes += need
        return True

    def _free(self, n_blocks: int) -> None:
        self.used_bytes -= n_blocks * self.nbytes_per_block

    def _blocks_for(self, kv_target: int) -> int:
        return -(-kv_target // self.block_size)

    # --- pricing: direct per-op lookups, summed over layers ---

    def _iteration_latency(self, prefill_tokens: int, prefill_ctx: int,
                           decode_seqs: int, decode_ctx: int) -> int:
        once = 0
        per_layer = 0
        parts = []
        if prefill_tokens > 0:
            parts.append((Phase.PREFILL, prefill_tokens, prefill_ctx))
        if decode_seqs > 0:
            parts.append((Phase.DECODE, decode_seqs, decode_ctx))
        for phase, batch, ctx in parts:
            for op in self.table.op_kinds(phase):
                if op == OP_EXPERT_FFN:
                    continue
                key = PerfKey(self.table.model_id, self.table.hw_id, op,
                              phase, batch, ctx, 1)
                lat = lookup_latency(self.table, key)
                if op in (OP_EMBEDDING, OP_LM_HEAD):
                    once += lat
                else:
                    per_layer += lat
        return once + self.table.meta.layer_count * per_layer

    # --- scheduling rules, restated ---

    def _preempt_latest(self) -> Optional[OracleRequest]:
        if not self.decoding:
            return None
        victim = max(self.decoding, key=lambda r: r.admission_seq)
        self._free(victim.n_blocks)
        victim.n_blocks = 0
        victim.effective_input = victim.input_len + victim.tokens_generated
        victim.prefill_done = 0
        victim.kv_len = 0
        victim.state = "queued"
        victim.admission_seq = None
        victim.preemptions += 1
        self.decoding.remove(victim)
        self.queue.appendleft(victim)
        return victim

    def _form(self, now: int) -> Optional[_RunningBatch]:
        budget = self.max_batch_tokens
        seqs = 0
        decode_reqs: list[OracleRequest] = []
        for req in sorted(self.decoding, key=lambda r: r.admission_seq):
            if seqs + 1 > self.max_batch_seqs or budget < 1:
                break
            skipped = False
            while True:
                need = self._blocks_for(req.kv_len + 1) - req.n_blocks
                if need <= 0 or self._try_alloc(need):
                    req.n_blocks += max(0, need)
                    break
                victim = self._preempt_latest()
                if victim is None:
                    raise OracleDeadlock(
                        f"{req.request_id}: decode step cannot get {need} blocks")
                if victim is req:
                    skipped = True
                    break
            if skipped or req not in self.decoding:
                continue
            decode_reqs.append(req)
            seqs += 1
            budget -= 1
        prefill_pieces: list[tuple[OracleRequest, int]] = []
        for req in sorted(self.admitted_prefill, key=lambda r: r.admission_seq):
            if seqs >= self.max_batch_seqs:
                break
            chunk = min(req.effective_input - req.prefill_done,
                        self.prefill_chunk, budget)
            if chunk <= 0:
                break
            need = self._blocks_for(req.prefill_done + chunk) - req.n_blocks
            if need > 0 and not self._try_alloc(need):
                break
            req.n_blocks += max(0, need)
            prefill_pieces.append((req, chunk))
            seqs += 1
            budget -= chunk
        while self.queue and budget > 0 and seqs < self.max_batch_seqs:
            if self.policy == "decode_priority" and self.decoding:
                break
            head = self.queue[0]
            chunk = min(head.effective_input - head.prefill_done,
                        self.prefill_chunk, budget)
            if chunk <= 0:
                break
            need = self._blocks_for(head.prefill_done + chunk) - head.n_blocks
            if need > 0 and not self._try_alloc(need):
                break
            head.n_blocks += max(0, need)
            self.queue.popleft()
            head.state = "prefill"
            self._seq += 1
            head.admission_seq = self._seq
            self.admitted_prefill.append(head)
            prefill_pieces.append((head, chunk))
            seqs += 1
            budget -= chunk
        if not decode_reqs and not prefill_pieces:
            return None
        lat = self._iteration_latency(
            sum(c for _, c in prefill_pieces),
            max((r.prefill_done for r, _ in prefill_pieces), default=0),
            len(decode_reqs),
            max((r.kv_len for r in decode_reqs), default=0))
        return _RunningBatch(now + lat, decode_reqs, prefill_pieces)

    def _complete(self, batch: _RunningBatch, now: int) -> None:
        for req, chunk in batch.prefill_pieces:
            req.prefill_done += chunk
            req.kv_len = max(req.kv_len, req.prefill_done)
            if req.prefill_done >= req.effective_input:
                self._emit(req, now)
                if req.state != "done":
                    req.state = "decode"
                    self.admitted_prefill.remove(req)
                    self.decoding.append(req)
        for req in batch.decode_reqs:
            req.kv_len += 1
            self._emit(req, now)

    def _emit(self, req: OracleRequest, now: int) -> None:
        req.tokens_generated += 1
        req.token_times.append(now)
        if req.tokens_generated >= req.output_len:
            req.state = "done"
            if req in self.decoding:
                self.decoding.remove(req)
            if req in self.admitted_prefill:
                self.admitted_prefill.remove(req)
            self._free(req.n_blocks)
            req.n_blocks = 0

    def _work_left(self) -> bool:
        return any(r.state != "done" for r in self.requests)

    def run(self, max_ticks: int = 50_000_000) -> dict[str, list[int]]:
        t = 0
        while self._work_left():
            if t > max_ticks:
                raise OracleDeadlock(f"no progress within {max_ticks} ticks")
            if self.running is not None and self.running.completion == t:
                batch, self.running = self.running, None
                self._complete(batch, t)
            for req in self.arrivals.get(t, ()):
                self.queue.append(req)
            if self.running is None:
                plan = self._form(t)
                if plan is not None:
                    self.running = plan
                elif (self.queue or self.admitted_prefill or self.decoding):
                    raise OracleDeadlock(
                        f"t={t}: work waiting but nothing admissible")
            t += 1
        return {r.request_id: r.token_times for r in self.requests}
