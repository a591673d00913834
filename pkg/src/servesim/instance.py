"""Serving instances: continuous batching over paged KV memory.

An instance owns dp_degree identical replicas sharing one admission door
round-robin; each replica owns tp_degree x pp_degree devices, a memory
pool, a prefix tree (unless shared or disabled) and its pipeline-stage
resources. Requests move Queued -> Prefilling -> (AwaitingKVTransfer ->)
Decoding -> Finished, with preemption bouncing a Decoding request back to
Queued.

Batching rule, applied identically at every formation point: every
Decoding request not already inside an in-flight batch joins (each costs
one token of budget and may need one new KV block); then prefill work is
admitted FIFO, ongoing chunked prefills first, then the queue head, in
chunks of min(remaining, prefill_chunk, budget). Admission stops at the
first piece that does not fit (head-of-line, no skipping). A decode
allocation that fails after eviction preempts the most recently admitted
Decoding request: its KV is freed, its generated tokens are kept, and it
re-runs prefill over prompt + generated tokens. A prefill allocation that
fails simply stops admission. An empty formation with work waiting,
nothing in flight and no inbound transfer pending is a Deadlock.

The first output token is emitted when prefill completes. Under PD
disaggregation the prefill instance then ships the KV to a decode instance
chosen at that moment: FullBlocking moves it as one transfer once prefill
ends, LayerwiseOverlap streams per-layer slices as the final prefill
iteration's layers complete, and the destination admits the request when
the last slice lands.

Pipeline stages are independent resources: a batch's stage k starts at
max(its stage k-1 completion, stage k free), and the next batch may enter
stage 0 as soon as the previous one vacates it.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from .engine import Engine, EventKind
from .errors import (CannotSatisfy, Deadlock, InsufficientMemory,
                     RoleMismatch)
from .memory import MatchResult, MemoryManager
from .metrics import MetricsCollector
from .moe import ExpertPlacement, GatePolicy, MoELayerCost, RoutingTrace, \
    moe_layer_time, route_tokens
from .network import CollectiveKind, Network
from .perf import BatchComposition, LatencyResolver, Phase, \
    per_layer_dense_costs, stage_layer_counts


class Role(Enum):
    UNIFIED = "unified"
    PREFILL = "prefill"
    DECODE = "decode"


class RequestState(Enum):
    QUEUED = "Queued"
    PREFILLING = "Prefilling"
    AWAITING_KV_TRANSFER = "AwaitingKVTransfer"
    DECODING = "Decoding"
    FINISHED = "Finished"


class KVTransferPolicy(Enum):
    FULL_BLOCKING = "FullBlocking"
    LAYERWISE_OVERLAP = "LayerwiseOverlap"


@dataclass
class SchedulerParams:
    max_batch_tokens: int = 8192
    max_batch_seqs: int = 256
    prefill_chunk: int = 512
    policy: str = "fifo"            # fifo | decode_priority


@dataclass
class Request:
    request_id: str
    arrival_time_us: int
    input_len: int
    output_len: int
    token_ids: Optional[tuple[int, ...]] = None
    model_id: Optional[str] = None

    state: RequestState = RequestState.QUEUED
    tokens_generated: int = 0
    prefill_done: int = 0           # prompt positions whose KV exists
    effective_input: int = 0        # prompt length incl. replayed tokens
    kv_len: int = 0                 # KV slots currently materialized
    blocks: list = field(default_factory=list)
    admission_seq: Optional[int] = None
    preemptions: int = 0
    matched_tokens: int = 0

    def __post_init__(self) -> None:
        self.effective_input = self.input_len

    def prefill_remaining(self) -> int:
        return self.effective_input - self.prefill_done

    def outstanding_tokens(self) -> int:
        return (self.effective_input - self.prefill_done) + \
               (self.output_len - self.tokens_generated)


@dataclass
class BatchPlan:
    decode_reqs: list[Request]
    prefill_pieces: list[tuple[Request, int]]
    comp: BatchComposition
    loads_ready: int
    completion: int = 0
    layer_completions: list[int] = field(default_factory=list)


class IterationPricer:
    """Combines the dense table path with collectives and MoE terms."""

    def __init__(self, resolver: LatencyResolver, network: Network,
                 tp_degree: int, pp_degree: int, stage_nodes: list[list[str]],
                 placement: Optional[ExpertPlacement] = None,
                 gate: Optional[GatePolicy] = None,
                 gate_streams: Optional[list] = None,
                 routing_trace: Optional[RoutingTrace] = None,
                 host_node: str = "", ep_nodes: Optional[list[str]] = None):
        self.resolver = resolver
        self.network = network
        self.tp = tp_degree
        self.pp = pp_degree
        self.stage_nodes = stage_nodes
        self.ep_nodes = ep_nodes
        self.placement = placement
        self.gate = gate
        self.gate_streams = gate_streams or []
        self.routing_trace = routing_trace
        self.host_node = host_node
        self.meta = resolver.table.meta

    def layers_per_stage(self) -> list[int]:
        return stage_layer_counts(self.meta.layer_count, self.pp)

    def _allreduce(self, stage: int) -> Callable[[int], int]:
        nodes = self.stage_nodes[stage][:self.tp]
        return lambda nbytes: self.network.collective_time(
            CollectiveKind.ALL_REDUCE, nodes, nbytes)

    def price(self, comp: BatchComposition, anchor: int
              ) -> tuple[list[int], list[MoELayerCost], list[int]]:
        """Per-stage latencies, MoE layer costs and per-layer end offsets.

        Layer offsets are relative to their own stage's start; the replica
        maps them onto absolute times once actual stage starts are known.
        Expert-fetch link reservations anchor at `anchor`, the earliest
        the iteration can enter stage 0; later stages assume back-to-back
        entry, which only shifts fetch windows when pipeline skew and
        offloading combine.
        """
        meta = self.meta
        moe_costs: list[MoELayerCost] = []
        stage_lat: list[int] = []
        layer_offsets: list[int] = []
        phase = Phase.PREFILL if comp.prefill_tokens > 0 else Phase.DECODE
        tokens = comp.total_tokens
        layer_idx = 0
        cursor = anchor
        prev_layer_start = anchor
        for s, n_layers in enumerate(self.layers_per_stage()):
            costs = per_layer_dense_costs(
                self.resolver.table, comp, self.tp,
                self._allreduce(s) if self.tp > 1 else None,
                resolver=self.resolver)
            lat = costs.embed_us if s == 0 else 0
            for _ in range(n_layers):
                layer_start = cursor + lat
                lat += costs.per_layer_us
                if meta.is_moe and self.placement is not None:
                    assignment = route_tokens(
                        layer_idx, tokens, meta.expert_count, meta.top_k,
                        self.gate,
                        gen=(self.gate_streams[layer_idx]
                             if self.gate_streams else None),
                        trace=self.routing_trace)
                    cost = moe_layer_time(
                        assignment, self.placement, self.resolver, phase,
                        self.tp, self.network,
                        self.ep_nodes or self.stage_nodes[s],
                        self.host_node, meta.hidden_size, meta.dtype_bytes,
                        meta.expert_weight_bytes,
                        cursor + lat, prev_layer_start)
                    lat += cost.latency_us
                    moe_costs.append(cost)
                prev_layer_start = layer_start
                layer_offsets.append(lat)
                layer_idx += 1
            if s == self.pp - 1:
                lat += costs.lmhead_us
            stage_lat.append(lat)
            cursor += lat
        return stage_lat, moe_costs, layer_offsets


class Replica:
    """One data-parallel copy of an instance: scheduler + memory + stages."""

    def __init__(self, instance: "Instance", idx: int, engine: Engine,
                 network: Network, memmgr: MemoryManager,
                 pricer: IterationPricer, metrics: MetricsCollector,
                 params: SchedulerParams, block_size: int,
                 dev_nodes: list[str]):
        self.instance = instance
        self.idx = idx
        self.name = f"{instance.instance_id}#{idx}"
        self.engine = engine
        self.network = network
        self.memmgr = memmgr
        self.pricer = pricer
        self.metrics = metrics
        self.params = params
        self.block_size = block_size
        self.dev_nodes = dev_nodes

        self.queue: deque[Request] = deque()
        self.admitted_prefill: list[Request] = []
        self.decoding: list[Request] = []
        self.inflight: set[str] = set()        # request ids inside batches
        self.pending_kv: list[Request] = []    # decode side, waiting for room
        self.awaiting_transfer = 0             # prefill side, KV still held
        self.stage_free = [0] * pricer.pp
        self.busy_us = [0] * pricer.pp
        self.iterations = 0
        self.a2a_events = 0
        self.preemption_count = 0
        self.prefix_caching = False
        self.warned_no_token_ids = False
        self._admission_counter = 0
        self._pending_batch_start: Optional[int] = None
        self._batch_counter = 0
        # wired by the simulation when roles are split
        self.pd_handoff: Optional[
            Callable[[Request, "Replica", int, list[int]], None]] = None
        self.pd_requeue: Optional[Callable[[Request, int], None]] = None

    # --- admission plumbing ---

    def enqueue(self, request: Request, now: int) -> None:
        self.queue.append(request)
        self.maybe_schedule_batch_start(now)

    def has_work(self) -> bool:
        if self.queue or self.admitted_prefill:
            return True
        return any(r.request_id not in self.inflight for r in self.decoding)

    def outstanding_tokens(self) -> int:
        reqs = list(self.queue) + self.admitted_prefill + self.decoding + \
            self.pending_kv
        return sum(r.outstanding_tokens() for r in reqs)

    def maybe_schedule_batch_start(self, now: int) -> None:
        if not self.has_work():
            return
        desired = max(now, self.stage_free[0])
        if (self._pending_batch_start is not None
                and self._pending_batch_start <= desired):
            return
        self._pending_batch_start = desired
        self.engine.schedule(desired, EventKind.BATCH_START,
                             handler=self._on_batch_start,
                             note=f"replica={self.name}")

    def _on_batch_start(self, ev) -> None:
        now = ev.time
        self._pending_batch_start = None
        if self.stage_free[0] > now:
            self.maybe_schedule_batch_start(now)
            return
        plan = self.form_batch(now)
        if plan is None:
            self._check_deadlock()
            return
        self.run_iteration(plan, now)

    def _check_deadlock(self) -> None:
        if not self.has_work():
            return
        if self.inflight or self.awaiting_transfer or self.pending_kv:
            return
        stuck = [r.request_id for r in
                 list(self.queue) + self.admitted_prefill + self.decoding]
        pool = self.memmgr.pool
        raise Deadlock(
            f"{self.name}: no admissible work and nothing in flight; "
            f"stuck requests {stuck}; device {pool.device_used}B used of "
            f"{pool.device_capacity}B "
            f"({self.memmgr.nbytes_per_block}B per block)")

    # --- memory helpers ---

    def _blocks_needed(self, req: Request, kv_target: int) -> int:
        return max(0, -(-kv_target // self.block_size) - len(req.blocks))

    def _ensure_decode_capacity(self, req: Request, now: int) -> bool:
        """Make room for one decode step; may preempt. False when `req`
        itself got preempted."""
        while True:
            need = self._blocks_needed(req, req.kv_len + 1)
            if need == 0:
                return True
            try:
                fresh, _ = self.memmgr.allocate_with_evict(need, now)
                req.blocks.extend(fresh)
                return True
            except (InsufficientMemory, CannotSatisfy):
                victim = self._pick_victim()
                if victim is None:
                    pool = self.memmgr.pool
                    raise Deadlock(
                        f"{self.name}: request {req.request_id!r} needs "
                        f"{need} blocks for a decode step but nothing can "
                        f"be evicted or preempted (device {pool.device_used}"
                        f"B/{pool.device_capacity}B)")
                self.preempt(victim, now)
                if victim is req:
                    return False

    def _pick_victim(self) -> Optional[Request]:
        live = [r for r in self.decoding if r.request_id not in self.inflight]
        if not live:
            return None
        return max(live, key=lambda r: r.admission_seq)

    def preempt(self, victim: Request, now: int) -> None:
        """LIFO removal of a decoder: free its KV, replay prompt+output later."""
        self.memmgr.release(victim.blocks)
        victim.blocks = []
        victim.effective_input = victim.input_len + victim.tokens_generated
        victim.prefill_done = 0
        victim.kv_len = 0
        victim.state = RequestState.QUEUED
        victim.admission_seq = None
        victim.preemptions += 1
        self.preemption_count += 1
        self.decoding.remove(victim)
        self.metrics.annotate(victim.request_id,
                              preemptions=victim.preemptions)
        if self.instance.role is Role.DECODE:
            # a decode-only replica cannot replay the prefill itself;
            # hand the request back for re-dispatch to a prefill instance
            if self.pd_requeue is None:
                raise Deadlock(
                    f"{self.name}: preempted {victim.request_id!r} needs a "
                    f"prefill replay but no prefill path is wired")
            self.pd_requeue(victim, now)
        else:
            self.queue.appendleft(victim)

    def _admit_seq(self) -> int:
        self._admission_counter += 1
        return self._admission_counter

    # --- batch formation ---

    def form_batch(self, now: int) -> Optional[BatchPlan]:
        params = self.params
        budget = params.max_batch_tokens
        seqs = 0
        loads_ready = now
        decode_reqs: list[Request] = []
        for req in sorted(self.decoding, key=lambda r: r.admission_seq):
            if req.request_id in self.inflight:
                continue
            if seqs + 1 > params.max_batch_seqs or budget < 1:
                break
            if not self._ensure_decode_capacity(req, now):
                continue        # req was its own preemption victim
            if req not in self.decoding:
                continue
            decode_reqs.append(req)
            seqs += 1
            budget -= 1
        prefill_pieces: list[tuple[Request, int]] = []
        for req in sorted(self.admitted_prefill, key=lambda r: r.admission_seq):
            if req.request_id in self.inflight:
                continue
            if seqs >= params.max_batch_seqs:
                break
            chunk = min(req.prefill_remaining(), params.prefill_chunk, budget)
            if chunk <= 0:
                break
            if not self._reserve_prefill(req, chunk, now):
                break
            prefill_pieces.append((req, chunk))
            seqs += 1
            budget -= chunk
        while self.queue and budget > 0 and seqs < params.max_batch_seqs:
            head = self.queue[0]
            if head.state is RequestState.DECODING:
                # PD arrival: KV already materialized, joins the decode set
                head.admission_seq = self._admit_seq()
                self.queue.popleft()
                self.decoding.append(head)
                if self._ensure_decode_capacity(head, now) \
                        and head in self.decoding:
                    decode_reqs.append(head)
                    seqs += 1
                    budget -= 1
                continue
            if params.policy == "decode_priority" and self.decoding:
                break
            admitted, ready = self._admit_new_prefill(head, budget, now)
            if admitted is None:
                break
            loads_ready = max(loads_ready, ready)
            prefill_pieces.append(admitted)
            seqs += 1
            budget -= admitted[1]
        if not decode_reqs and not prefill_pieces:
            return None
        comp = BatchComposition(
            prefill_tokens=sum(c for _, c in prefill_pieces),
            prefill_context=max((r.prefill_done for r, _ in prefill_pieces),
                                default=0),
            decode_seqs=len(decode_reqs),
            decode_context=max((r.kv_len for r in decode_reqs), default=0),
        )
        return BatchPlan(decode_reqs, prefill_pieces, comp, loads_ready)

    def _reserve_prefill(self, req: Request, chunk: int, now: int) -> bool:
        need = self._blocks_needed(req, req.prefill_done + chunk)
        if need == 0:
            return True
        try:
            fresh, _ = self.memmgr.allocate_with_evict(need, now)
            req.blocks.extend(fresh)
            return True
        except (InsufficientMemory, CannotSatisfy):
            return False

    def _admit_new_prefill(self, req: Request, budget: int, now: int
                           ) -> tuple[Optional[tuple[Request, int]], int]:
        """Pop the queue head into Prefilling.

        Returns ((req, first_chunk), loads_ready) or (None, now) when the
        head does not fit; in that case every side effect is undone so the
        next formation retries from scratch.
        """
        ready = now
        match = MatchResult()
        if self.prefix_caching and self.instance.role is not Role.DECODE:
            if req.token_ids:
                try:
                    match = self.memmgr.prefix_match(
                        req.token_ids[:req.input_len], now)
                except (InsufficientMemory, CannotSatisfy):
                    return None, now
            else:
                self.memmgr.prefix_match((), now)   # counted as a lookup
                self.warned_no_token_ids = True
        if match.matched_tokens:
            req.blocks.extend(match.blocks)
            req.matched_tokens = match.matched_tokens
            req.prefill_done = match.matched_tokens
            req.kv_len = match.matched_tokens
            if req.prefill_done >= req.effective_input:
                # full-prompt hit: recompute the final position so the
                # first output token still has a producing iteration
                req.prefill_done = req.effective_input - 1
        if self.prefix_caching and req.token_ids:
            self.metrics.annotate(
                req.request_id,
                prefix_blocks_matched=len(match.blocks),
                prefix_blocks_lookup=req.input_len // self.block_size)
        chunk = min(req.prefill_remaining(), self.params.prefill_chunk, budget)
        ok = chunk > 0 and self._reserve_prefill(req, chunk, now)
        if ok and match.matched_tokens:
            try:
                ready, _ = self.memmgr.hit_load(match, now)
            except (InsufficientMemory, CannotSatisfy):
                ok = False
        if not ok:
            if match.matched_tokens:
                self.memmgr.release(req.blocks)
                req.blocks = []
                req.prefill_done = 0
                req.kv_len = 0
                req.matched_tokens = 0
            return None, now
        req.state = RequestState.PREFILLING
        req.admission_seq = self._admit_seq()
        self.queue.popleft()
        self.admitted_prefill.append(req)
        return (req, chunk), ready

    # --- execution ---

    def run_iteration(self, plan: BatchPlan, now: int) -> None:
        start0 = max(now, self.stage_free[0], plan.loads_ready)
        stage_lat, moe_costs, layer_offsets = self.pricer.price(
            plan.comp, start0)
        starts: list[int] = []
        cursor = start0
        for s, lat in enumerate(stage_lat):
            begin = max(cursor, self.stage_free[s])
            starts.append(begin)
            self.stage_free[s] = begin + lat
            self.busy_us[s] += lat
            cursor = begin + lat
        plan.completion = cursor
        li = 0
        for s, n_layers in enumerate(self.pricer.layers_per_stage()):
            for _ in range(n_layers):
                plan.layer_completions.append(starts[s] + layer_offsets[li])
                li += 1
        self._batch_counter += 1
        batch_id = self._batch_counter
        for i, cost in enumerate(moe_costs):
            self.a2a_events += cost.a2a_events
            if cost.a2a_events:
                t = plan.layer_completions[i]
                self.engine.schedule(
                    t, EventKind.CUSTOM, priority=6,
                    note=f"all_to_all dispatch replica={self.name} "
                         f"batch={batch_id} layer={i}")
                self.engine.schedule(
                    t, EventKind.CUSTOM, priority=6,
                    note=f"all_to_all return replica={self.name} "
                         f"batch={batch_id} layer={i}")
            for fetch in cost.fetch_plans:
                self.engine.schedule(
                    fetch.segments[0].start, EventKind.TRANSFER_START,
                    note=f"expert-fetch {fetch.nbytes}B replica={self.name}")
                self.engine.schedule(
                    fetch.completion, EventKind.TRANSFER_COMPLETE,
                    note=f"expert-fetch replica={self.name}")
        for req in plan.decode_reqs:
            self.inflight.add(req.request_id)
        for req, _ in plan.prefill_pieces:
            self.inflight.add(req.request_id)
        self.iterations += 1
        self.engine.schedule(
            plan.completion, EventKind.BATCH_COMPLETE,
            handler=lambda ev, p=plan: self._on_batch_complete(p, ev.time),
            note=f"replica={self.name} batch={batch_id}")
        self.maybe_schedule_batch_start(now)

    def _on_batch_complete(self, plan: BatchPlan, now: int) -> None:
        for req, chunk in plan.prefill_pieces:
            self.inflight.discard(req.request_id)
            req.prefill_done += chunk
            req.kv_len = max(req.kv_len, req.prefill_done)
            if req.prefill_done >= req.effective_input:
                self._prefill_complete(req, plan, now)
        for req in plan.decode_reqs:
            self.inflight.discard(req.request_id)
            req.kv_len += 1
            self._emit_token(req, now)
        self.maybe_schedule_batch_start(now)

    def _prefill_complete(self, req: Request, plan: BatchPlan,
                          now: int) -> None:
        if self.prefix_caching and req.token_ids:
            aligned = (req.input_len // self.block_size) * self.block_size
            n_aligned = aligned // self.block_size
            if n_aligned:
                self.memmgr.prefix_insert(
                    req.token_ids[:aligned], req.blocks[:n_aligned], now)
        self._emit_token(req, now)
        if req.state is RequestState.FINISHED:
            return
        self.admitted_prefill.remove(req)
        if self.instance.role is Role.PREFILL:
            req.state = RequestState.AWAITING_KV_TRANSFER
            self.awaiting_transfer += 1
            if self.pd_handoff is None:
                raise RoleMismatch(
                    f"{self.name}: prefill finished for {req.request_id!r} "
                    f"but no decode handoff is wired")
            self.pd_handoff(req, self, now, plan.layer_completions)
        else:
            req.state = RequestState.DECODING
            self.decoding.append(req)

    def _emit_token(self, req: Request, now: int) -> None:
        req.tokens_generated += 1
        self.metrics.record_token(req.request_id, now)
        if req.tokens_generated >= req.output_len:
            self.finish(req, now)

    def finish(self, req: Request, now: int) -> None:
        req.state = RequestState.FINISHED
        if req in self.decoding:
            self.decoding.remove(req)
        if req in self.admitted_prefill:
            self.admitted_prefill.remove(req)
        freed = self.memmgr.release(req.blocks)
        req.blocks = []
        self.metrics.mark_finished(req.request_id, now,
                                   instance_id=self.instance.instance_id)
        if freed > 0:
            self.engine.schedule(
                now, EventKind.RESOURCE_FREE,
                handler=lambda ev: self._on_memory_freed(ev.time),
                note=f"replica={self.name} freed={freed}B")

    def _on_memory_freed(self, now: int) -> None:
        if self.pending_kv:
            self.retry_pending_kv(now)
        self.maybe_schedule_batch_start(now)

    # --- PD plumbing ---

    def transfer_done(self, req: Request, now: int) -> None:
        """Prefill side: the KV left the building; drop our copy."""
        self.awaiting_transfer -= 1
        freed = self.memmgr.release(req.blocks)
        req.blocks = []
        if freed > 0:
            self.engine.schedule(
                now, EventKind.RESOURCE_FREE,
                handler=lambda ev: self._on_memory_freed(ev.time),
                note=f"replica={self.name} freed={freed}B")
        self.maybe_schedule_batch_start(now)

    def admit_kv_arrival(self, req: Request, now: int) -> None:
        """Decode side: materialize transferred KV, then queue for decoding."""
        n_blocks = -(-req.kv_len // self.block_size)
        try:
            req.blocks, _ = self.memmgr.allocate_with_evict(n_blocks, now)
        except (InsufficientMemory, CannotSatisfy):
            if self.memmgr.pool.device_used == 0:
                raise Deadlock(
                    f"{self.name}: transferred KV of {req.request_id!r} "
                    f"({n_blocks} blocks) exceeds device capacity")
            self.pending_kv.append(req)
            return
        req.state = RequestState.DECODING
        self.enqueue(req, now)

    def retry_pending_kv(self, now: int) -> None:
        waiting = self.pending_kv
        self.pending_kv = []
        for req in waiting:
            self.admit_kv_arrival(req, now)


class Instance:
    """dp_degree replicas behind one admission door."""

    def __init__(self, instance_id: str, role: Role, model_id: str,
                 hw_id: str, replicas: list[Replica]):
        self.instance_id = instance_id
        self.role = role
        self.model_id = model_id
        self.hw_id = hw_id
        self.replicas = replicas
        self._rr = 0

    def enqueue(self, request: Request, now: int) -> None:
        if self.role is Role.DECODE \
                and request.state is not RequestState.DECODING:
            raise RoleMismatch(
                f"{self.instance_id} is decode-only but "
                f"{request.request_id!r} still needs prefill")
        self.pick_replica().enqueue(request, now)

    def pick_replica(self) -> Replica:
        replica = self.replicas[self._rr % len(self.replicas)]
        self._rr += 1
        return replica

    def outstanding_tokens(self) -> int:
        return sum(r.outstanding_tokens() for r in self.replicas)

    def peek_prefix(self, token_ids: tuple[int, ...]) -> int:
        best = 0
        for replica in self.replicas:
            tree = replica.memmgr.tree
            if tree is not None:
                best = max(best, tree.peek(token_ids))
        return best

    def stats(self, span_us: int) -> dict:
        busy = sum(sum(r.busy_us) for r in self.replicas)
        stages = sum(len(r.busy_us) for r in self.replicas)
        cache = {}
        for key in ("lookups", "lookup_blocks", "matched_blocks",
                    "evicted_blocks", "spilled_blocks", "discarded_blocks",
                    "promotions", "remote_copies"):
            cache[key] = sum(r.memmgr.stats[key] for r in self.replicas)
        return {
            "role": self.role.value,
            "model_id": self.model_id,
            "hw_id": self.hw_id,
            "iterations": sum(r.iterations for r in self.replicas),
            "busy_us": busy,
            "utilization": (busy / (stages * span_us)) if span_us > 0 else 0.0,
            "preemptions": sum(r.preemption_count for r in self.replicas),
            "a2a_events": sum(r.a2a_events for r in self.replicas),
            "cache": cache,
            "memory": {
                "device_used_bytes": sum(r.memmgr.pool.device_used
                                         for r in self.replicas),
                "host_used_bytes": sum(r.memmgr.pool.host_used
                                       for r in self.replicas),
            },
        }
