"""Cluster assembly and the top-level run loop.

Everything the config describes becomes concrete here: topology nodes and
links, memory pools, prefix trees (per replica, or shared per model),
iteration pricers, replicas, instances, the router, and one arrival event
per workload record. `Simulation.run()` drains the event queue and folds
the collector into a Report.

Node naming: replica r of instance `i0` with tp*pp devices owns
`i0:r0:d0 .. i0:r0:dK`; the instance's host memory is `i0:host`. Every
device gets a self-loop memory channel and a link to the host; the
instance fabric (fully_connected or ring) joins the devices of one
replica at the configured bandwidth. `host_bridge` adds nothing extra:
the device<->host star IS that fabric, so its bandwidth is
`memory.host_link_bandwidth`, not `topology.bandwidth`. The `d0` node of
every replica joins a cluster-wide fully connected fabric at the
interconnect bandwidth; prefill->decode KV and shared-cache remote
copies ride those links.
"""

from __future__ import annotations

from typing import Any, Callable, Optional

from .config import InstanceSpec, MoESpec, SimConfig
from .engine import DrainStatus, Engine, EventKind
from .errors import CrossRefError
from .instance import (Instance, IterationPricer, KVTransferPolicy, Replica,
                       Request, Role)
from .memory import MemoryManager, MemoryPool, RadixTree, block_nbytes
from .metrics import MetricsCollector, Report, finalize
from .moe import (ExpertPlacement, OffloadPolicy, RoutingTrace,
                  TraceReplayGate, UniformGate, ZipfGate)
from .network import Network, Topology, connect_fully, connect_ring
from .perf import LatencyResolver, PerfTable, load_trace
from .rng import moe_stream_id, philox_stream
from .router import POLICIES, LeastOutstandingTokens, Router
from .workload import WorkloadRecord, load_workload, synthesize_arrivals

_ROLE = {"unified": Role.UNIFIED, "prefill": Role.PREFILL,
         "decode": Role.DECODE}
_KV_TRANSFER = {"full_blocking": KVTransferPolicy.FULL_BLOCKING,
                "layerwise_overlap": KVTransferPolicy.LAYERWISE_OVERLAP}
_OFFLOAD = {"on_demand": OffloadPolicy.ON_DEMAND,
            "prefetch": OffloadPolicy.PREFETCH}


def trace_key(spec: InstanceSpec) -> str:
    return f"{spec.model_id}@{spec.hw_id}"


class Simulation:
    """One fully wired cluster plus its workload, ready to run."""

    def __init__(self, cfg: SimConfig, tables: dict[str, PerfTable],
                 records: list[WorkloadRecord], *,
                 log_sink: Optional[Callable[[str], None]] = None):
        self.cfg = cfg
        self.tables = tables
        self.records = records
        self._validate(cfg, tables, records)
        if any(r.arrival_time_us is None for r in records):
            if cfg.arrival_rate_per_s is None:
                missing = next(r.request_id for r in records
                               if r.arrival_time_us is None)
                raise CrossRefError(
                    f"request {missing!r} has no arrival time and no "
                    f"arrival.rate_per_s is configured")
            synthesize_arrivals(records, cfg.arrival_rate_per_s, cfg.seed)

        self.engine = Engine(livelock_cap=cfg.livelock_cap, log_sink=log_sink)
        self.metrics = MetricsCollector()
        self.topology = Topology()
        self.network = Network(self.topology)
        self.instances: list[Instance] = []
        self.resolvers: dict[str, LatencyResolver] = {}
        self._build_cluster()

        pd_pairing = None
        if cfg.pd.pairing == "least_tokens":
            pd_pairing = LeastOutstandingTokens()
        self.router = Router(self.instances, POLICIES[cfg.router_policy](),
                             pd_pairing=pd_pairing,
                             static_pairs=cfg.pd.static_pairs)
        self._kv_transfer = _KV_TRANSFER[cfg.pd.kv_transfer]
        self._schedule_arrivals()

    # --- validation beyond what the config alone can see ---

    @staticmethod
    def _validate(cfg: SimConfig, tables: dict[str, PerfTable],
                  records: list[WorkloadRecord]) -> None:
        for i, spec in enumerate(cfg.instances):
            key = trace_key(spec)
            table = tables.get(key)
            if table is None:
                raise CrossRefError(
                    f"instances[{i}]: no perf table loaded for {key!r}; "
                    f"have {sorted(tables)}")
            meta = table.meta
            if spec.pp > meta.layer_count:
                raise CrossRefError(
                    f"instances[{i}]: pp={spec.pp} exceeds the "
                    f"{meta.layer_count} layers of {spec.model_id!r}")
            if not meta.is_moe:
                if spec.moe is not None:
                    raise CrossRefError(
                        f"instances[{i}]: moe settings given but "
                        f"{spec.model_id!r} declares no experts")
                if spec.ep > 1:
                    raise CrossRefError(
                        f"instances[{i}]: ep={spec.ep} on the dense model "
                        f"{spec.model_id!r}")
            else:
                moe = spec.moe or MoESpec()
                bad = [e for e in moe.offloaded_experts
                       if not 0 <= e < meta.expert_count]
                if bad:
                    raise CrossRefError(
                        f"instances[{i}]: offloaded experts {bad} out of "
                        f"range for {meta.expert_count} experts")
            per_block = block_nbytes(cfg.block_size,
                                     meta.kv_bytes_per_token_per_layer,
                                     meta.layer_count, spec.tp)
            if per_block > spec.memory.device_capacity:
                raise CrossRefError(
                    f"instances[{i}]: device_capacity "
                    f"{spec.memory.device_capacity}B cannot hold even one "
                    f"KV block ({per_block}B)")
        served = {spec.model_id for spec in cfg.instances}
        for rec in records:
            if rec.model_id is not None and rec.model_id not in served:
                raise CrossRefError(
                    f"request {rec.request_id!r} targets model "
                    f"{rec.model_id!r}; no instance serves it")
        models = {s.instance_id: s.model_id for s in cfg.instances}
        for pre, dec in sorted(cfg.pd.static_pairs.items()):
            if models.get(pre) != models.get(dec):
                raise CrossRefError(
                    f"pd.static_pairs: {pre!r} ({models.get(pre)}) and "
                    f"{dec!r} ({models.get(dec)}) serve different models")

    # --- assembly ---

    def _build_cluster(self) -> None:
        cfg = self.cfg
        shared_trees: dict[str, RadixTree] = {}
        model_managers: dict[str, list[MemoryManager]] = {}
        model_homes: dict[str, list[tuple[str, str, str]]] = {}
        d0_nodes: list[str] = []

        for inst_idx, spec in enumerate(cfg.instances):
            table = self.tables[trace_key(spec)]
            meta = table.meta
            iid = spec.instance_id
            host = f"{iid}:host"
            self.topology.add_node(host)
            resolver = LatencyResolver(table, tp_fallback=cfg.tp_fallback)
            self.resolvers[iid] = resolver
            nbytes_per_block = block_nbytes(
                cfg.block_size, meta.kv_bytes_per_token_per_layer,
                meta.layer_count, spec.tp)
            role = _ROLE[spec.role]
            instance = Instance(iid, role, spec.model_id, spec.hw_id, [])

            for r in range(spec.dp):
                devs = [f"{iid}:r{r}:d{j}" for j in range(spec.tp * spec.pp)]
                for d in devs:
                    self.topology.add_link(d, d, spec.memory.memory_bandwidth)
                    self.topology.add_link(d, host,
                                           spec.memory.host_link_bandwidth)
                if spec.topology.kind == "fully_connected":
                    connect_fully(self.topology, devs, spec.topology.bandwidth,
                                  spec.topology.base_latency_us)
                elif spec.topology.kind == "ring":
                    connect_ring(self.topology, devs, spec.topology.bandwidth,
                                 spec.topology.base_latency_us)
                # host_bridge: the device<->host star above already is the fabric
                d0_nodes.append(devs[0])

                pool = MemoryPool(spec.memory.device_capacity,
                                  spec.memory.host_capacity,
                                  spec.memory.memory_bandwidth,
                                  name=f"{iid}:r{r}")
                if cfg.prefix_caching and cfg.shared_prefix_cache:
                    tree = shared_trees.setdefault(spec.model_id,
                                                   RadixTree(cfg.block_size))
                else:
                    tree = RadixTree(cfg.block_size)
                memmgr = MemoryManager(pool, tree, self.network, devs[0],
                                       host, cfg.block_size, nbytes_per_block)
                model_managers.setdefault(spec.model_id, []).append(memmgr)
                model_homes.setdefault(spec.model_id, []).append(
                    (pool.name, devs[0], host))

                pricer = self._make_pricer(spec, inst_idx, r, resolver, table,
                                           devs, host)
                replica = Replica(instance, r, self.engine, self.network,
                                  memmgr, pricer, self.metrics,
                                  spec.scheduler, cfg.block_size, devs)
                replica.prefix_caching = (cfg.prefix_caching
                                          and role is not Role.DECODE)
                if role is Role.PREFILL:
                    replica.pd_handoff = self._pd_handoff
                if role is Role.DECODE:
                    replica.pd_requeue = self._pd_requeue
                instance.replicas.append(replica)
            self.instances.append(instance)

        if cfg.prefix_caching and cfg.shared_prefix_cache:
            for model_id, managers in model_managers.items():
                for mgr in managers:
                    for pool_name, dev, host in model_homes[model_id]:
                        mgr.register_home(pool_name, dev, host)
        if len(d0_nodes) > 1:
            connect_fully(self.topology, d0_nodes, cfg.interconnect_bandwidth,
                          cfg.interconnect_base_latency_us)

    def _make_pricer(self, spec: InstanceSpec, inst_idx: int, replica_idx: int,
                     resolver: LatencyResolver, table: PerfTable,
                     devs: list[str], host: str) -> IterationPricer:
        meta = table.meta
        stage_nodes = [devs[s * spec.tp:(s + 1) * spec.tp]
                       for s in range(spec.pp)]
        placement = gate = gate_streams = routing_trace = None
        if meta.is_moe:
            moe = spec.moe or MoESpec()
            placement = ExpertPlacement(meta.expert_count, spec.ep,
                                        frozenset(moe.offloaded_experts),
                                        _OFFLOAD[moe.offload_policy])
            if moe.gate == "uniform":
                gate = UniformGate()
            elif moe.gate == "zipf":
                gate = ZipfGate(moe.zipf_s)
            else:
                gate = TraceReplayGate(moe.trace_path)
                routing_trace = RoutingTrace(moe.trace_path)
            gate_streams = [
                philox_stream(self.cfg.seed,
                              moe_stream_id(inst_idx, replica_idx, layer))
                for layer in range(meta.layer_count)
            ]
        return IterationPricer(resolver, self.network, spec.tp, spec.pp,
                               stage_nodes, placement=placement, gate=gate,
                               gate_streams=gate_streams,
                               routing_trace=routing_trace, host_node=host,
                               ep_nodes=devs[:spec.ep])

    # --- arrivals and routing ---

    def _schedule_arrivals(self) -> None:
        prefill_models = {inst.model_id for inst in self.instances
                          if inst.role is Role.PREFILL}
        for rec in self.records:
            t = rec.arrival_time_us
            self.metrics.register(rec.request_id, t, rec.input_len,
                                  rec.output_len, rec.model_id or "")
            req = Request(rec.request_id, t, rec.input_len, rec.output_len,
                          token_ids=rec.token_ids, model_id=rec.model_id)
            use_pd = (rec.model_id in prefill_models if rec.model_id is not None
                      else bool(prefill_models))
            self.engine.schedule(
                t, EventKind.REQUEST_ARRIVAL,
                handler=lambda ev, req=req, pd=use_pd: self._on_arrival(req, pd, ev.time),
                note=f"request={rec.request_id} in={rec.input_len} "
                     f"out={rec.output_len}")

    def _on_arrival(self, req: Request, use_pd: bool, now: int) -> None:
        if use_pd:
            inst = self.router.dispatch_prefill(req)
        else:
            inst = self.router.dispatch(req)
        inst.enqueue(req, now)

    # --- prefill/decode split plumbing ---

    def _pd_handoff(self, req: Request, prefill_replica: Replica, now: int,
                    layer_completions: list[int]) -> None:
        """Move finished prompt KV to a decode instance and hand the request
        over when the last byte lands."""
        decode_inst = self.router.choose_decode(req, prefill_replica.instance)
        decode_replica = decode_inst.pick_replica()
        meta = self.tables[trace_key_of(prefill_replica.instance)].meta
        src = prefill_replica.dev_nodes[0]
        dst = decode_replica.dev_nodes[0]
        per_layer_bytes = req.kv_len * meta.kv_bytes_per_token_per_layer
        if self._kv_transfer is KVTransferPolicy.FULL_BLOCKING:
            plan = self.network.p2p_transfer(
                src, dst, per_layer_bytes * meta.layer_count, now)
            plans = [plan]
        else:
            # per-layer copies start when the final chunk finishes each
            # layer; reservations earlier than `now` are the model for
            # transfers that overlapped the tail of the prefill itself
            plans = [
                self.network.p2p_transfer(src, dst, per_layer_bytes,
                                          layer_completions[layer])
                for layer in range(meta.layer_count)
            ]
        # transfers that fully overlapped the prefill tail finish "before"
        # the handoff decision exists; they cost nothing further
        done = max(now, max(p.completion for p in plans))
        first = min(p.segments[0].start for p in plans)
        self.engine.schedule(
            max(now, first), EventKind.TRANSFER_START,
            note=f"kv request={req.request_id} {src}->{dst} "
                 f"{sum(p.nbytes for p in plans)}B")
        self.engine.schedule(
            done, EventKind.TRANSFER_COMPLETE,
            handler=lambda ev: self._kv_arrived(req, prefill_replica,
                                                decode_replica, ev.time),
            note=f"kv request={req.request_id} dst={decode_replica.name}")

    def _kv_arrived(self, req: Request, prefill_replica: Replica,
                    decode_replica: Replica, now: int) -> None:
        prefill_replica.transfer_done(req, now)
        decode_replica.admit_kv_arrival(req, now)

    def _pd_requeue(self, req: Request, now: int) -> None:
        inst = self.router.dispatch_prefill(req)
        inst.enqueue(req, now)

    # --- running and reporting ---

    def run(self, deadline: Optional[int] = None,
            allow_incomplete: bool = False) -> Report:
        status, end = self.engine.run_until(deadline)
        finished = [r for r in self.metrics.records.values()
                    if r.finished_at is not None]
        span = 0
        if finished:
            span = max(r.finished_at for r in finished) - \
                min(r.arrival_us for r in finished)
        instances: dict[str, Any] = {}
        cache_totals = {"lookups": 0, "lookup_blocks": 0, "matched_blocks": 0,
                        "evicted_blocks": 0, "spilled_blocks": 0,
                        "discarded_blocks": 0, "promotions": 0,
                        "remote_copies": 0}
        warnings: list[str] = []
        for inst in self.instances:
            st = inst.stats(span)
            st["dispatches"] = self.router.dispatch_counts[inst.instance_id]
            st["tp_fallback_hits"] = self.resolvers[inst.instance_id].fallback_hits
            instances[inst.instance_id] = st
            for k in cache_totals:
                cache_totals[k] += st["cache"][k]
            if st["tp_fallback_hits"]:
                warnings.append(
                    f"{inst.instance_id}: {st['tp_fallback_hits']} latency "
                    f"lookups used a tp-degree fallback scaling")
            if any(r.warned_no_token_ids for r in inst.replicas):
                warnings.append(
                    f"{inst.instance_id}: prefix caching is on but some "
                    f"requests carried no token ids; their lookups missed")
        lookups = cache_totals["lookup_blocks"]
        cache = dict(cache_totals)
        cache["hit_rate"] = (cache_totals["matched_blocks"] / lookups
                             if lookups else 0.0)
        counters = {
            "events_scheduled": self.engine.scheduled_count,
            "events_dispatched": self.engine.dispatched_count,
            "drain_status": status.value,
            "end_us": end,
        }
        return finalize(self.metrics, seed=self.cfg.seed,
                        config_echo=self.cfg.echo, instances=instances,
                        cache=cache, counters=counters, warnings=warnings,
                        allow_incomplete=allow_incomplete)


def trace_key_of(instance: Instance) -> str:
    return f"{instance.model_id}@{instance.hw_id}"


def load_tables(cfg: SimConfig) -> dict[str, PerfTable]:
    return {key: load_trace(path) for key, path in sorted(cfg.traces.items())}


def build_simulation(cfg: SimConfig, *,
                     workload_path: Optional[str] = None,
                     log_sink: Optional[Callable[[str], None]] = None
                     ) -> Simulation:
    """Load the traces and workload a config points at, then wire it all up."""
    path = workload_path or cfg.workload
    if path is None:
        raise CrossRefError("no workload: neither the config nor the caller "
                            "named one")
    return Simulation(cfg, load_tables(cfg), load_workload(path),
                      log_sink=log_sink)
