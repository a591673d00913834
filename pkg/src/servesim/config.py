"""Run configuration: JSON in, validated spec objects out.

Shape and type problems raise SchemaError naming the offending field by
path (``instances[0].scheduler.prefill_chunk``); relational problems that
are visible without loading any trace (a prefill role with no decode
instance to pair with, a static pair naming an unknown instance) raise
CrossRefError. Unknown keys are rejected everywhere, so a typo fails the
run instead of silently applying a default.

Relative paths (traces, workload, MoE routing traces) resolve against the
directory containing the config file.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Any, Optional

from .errors import CrossRefError, SchemaError
from .instance import SchedulerParams

ROLES = ("unified", "prefill", "decode")
FABRIC_KINDS = ("fully_connected", "ring", "host_bridge")
ROUTER_POLICIES = ("round_robin", "least_tokens", "prefix_aware")
SCHED_POLICIES = ("fifo", "decode_priority")
KV_TRANSFER = ("full_blocking", "layerwise_overlap")
PD_PAIRINGS = ("least_tokens", "static")
GATES = ("uniform", "zipf", "trace_replay")
OFFLOAD_POLICIES = ("on_demand", "prefetch")

CONFIG_SCHEMA = "servesim.config.v1"


@dataclass
class MemorySpec:
    device_capacity: int
    host_capacity: int = 0
    memory_bandwidth: float = 1.0e12
    host_link_bandwidth: float = 64.0e9


@dataclass
class TopologySpec:
    kind: str = "fully_connected"
    bandwidth: float = 300.0e9
    base_latency_us: int = 0


@dataclass
class MoESpec:
    gate: str = "uniform"
    zipf_s: float = 1.0
    trace_path: Optional[str] = None
    offloaded_experts: tuple[int, ...] = ()
    offload_policy: str = "on_demand"


@dataclass
class InstanceSpec:
    instance_id: str
    model_id: str
    hw_id: str
    role: str = "unified"
    tp: int = 1
    pp: int = 1
    dp: int = 1
    ep: int = 1
    memory: MemorySpec = field(default_factory=lambda: MemorySpec(1 << 34))
    scheduler: SchedulerParams = field(default_factory=SchedulerParams)
    topology: TopologySpec = field(default_factory=TopologySpec)
    moe: Optional[MoESpec] = None


@dataclass
class PDSpec:
    kv_transfer: str = "full_blocking"
    pairing: str = "least_tokens"
    static_pairs: dict[str, str] = field(default_factory=dict)


@dataclass
class SimConfig:
    seed: int = 42
    block_size: int = 16
    prefix_caching: bool = False
    shared_prefix_cache: bool = False
    tp_fallback: bool = False
    router_policy: str = "round_robin"
    pd: PDSpec = field(default_factory=PDSpec)
    livelock_cap: int = 100_000_000
    arrival_rate_per_s: Optional[float] = None
    interconnect_bandwidth: float = 300.0e9
    interconnect_base_latency_us: int = 0
    traces: dict[str, str] = field(default_factory=dict)
    workload: Optional[str] = None
    instances: list[InstanceSpec] = field(default_factory=list)
    echo: dict[str, Any] = field(default_factory=dict)


class _Walker:
    """Typed getters over one dict level; remembers which keys were read so
    leftovers can be rejected."""

    def __init__(self, raw: Any, path: str):
        if not isinstance(raw, dict):
            raise SchemaError(f"{path or 'config'}: expected an object, "
                              f"got {type(raw).__name__}")
        self.raw = raw
        self.path = path
        self.seen: set[str] = set()

    def _at(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def has(self, key: str) -> bool:
        return key in self.raw

    def get(self, key: str, default: Any = None) -> Any:
        self.seen.add(key)
        return self.raw.get(key, default)

    def str_(self, key: str, default: Optional[str] = None,
             choices: Optional[tuple[str, ...]] = None,
             required: bool = False) -> Optional[str]:
        if key not in self.raw:
            if required:
                raise SchemaError(f"{self._at(key)}: required")
            return default
        v = self.get(key)
        if not isinstance(v, str) or not v:
            raise SchemaError(f"{self._at(key)}: expected a non-empty string")
        if choices is not None and v not in choices:
            raise SchemaError(
                f"{self._at(key)}: expected one of {', '.join(choices)}; "
                f"got {v!r}")
        return v

    def int_(self, key: str, default: Optional[int] = None,
             minimum: Optional[int] = None, required: bool = False
             ) -> Optional[int]:
        if key not in self.raw:
            if required:
                raise SchemaError(f"{self._at(key)}: required")
            return default
        v = self.get(key)
        if isinstance(v, bool) or not isinstance(v, int):
            raise SchemaError(f"{self._at(key)}: expected an integer")
        if minimum is not None and v < minimum:
            raise SchemaError(f"{self._at(key)}: must be >= {minimum}, got {v}")
        return v

    def num_(self, key: str, default: Optional[float] = None,
             positive: bool = False, required: bool = False
             ) -> Optional[float]:
        if key not in self.raw:
            if required:
                raise SchemaError(f"{self._at(key)}: required")
            return default
        v = self.get(key)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise SchemaError(f"{self._at(key)}: expected a number")
        if positive and v <= 0:
            raise SchemaError(f"{self._at(key)}: must be positive, got {v}")
        return float(v)

    def bool_(self, key: str, default: bool = False) -> bool:
        if key not in self.raw:
            return default
        v = self.get(key)
        if not isinstance(v, bool):
            raise SchemaError(f"{self._at(key)}: expected true or false")
        return v

    def sub(self, key: str) -> Optional["_Walker"]:
        if key not in self.raw:
            return None
        return _Walker(self.get(key), self._at(key))

    def reject_unknown(self) -> None:
        extra = sorted(set(self.raw) - self.seen)
        if extra:
            where = self.path or "config"
            raise SchemaError(f"{where}: unknown field(s) {', '.join(extra)}")


def _parse_memory(w: Optional[_Walker], path: str) -> MemorySpec:
    if w is None:
        raise SchemaError(f"{path}.memory: required")
    spec = MemorySpec(
        device_capacity=w.int_("device_capacity", minimum=1, required=True),
        host_capacity=w.int_("host_capacity", 0, minimum=0),
        memory_bandwidth=w.num_("memory_bandwidth", 1.0e12, positive=True),
        host_link_bandwidth=w.num_("host_link_bandwidth", 64.0e9, positive=True),
    )
    w.reject_unknown()
    return spec


def _parse_scheduler(w: Optional[_Walker]) -> SchedulerParams:
    if w is None:
        return SchedulerParams()
    params = SchedulerParams(
        max_batch_tokens=w.int_("max_batch_tokens", 8192, minimum=1),
        max_batch_seqs=w.int_("max_batch_seqs", 256, minimum=1),
        prefill_chunk=w.int_("prefill_chunk", 512, minimum=1),
        policy=w.str_("policy", "fifo", choices=SCHED_POLICIES),
    )
    w.reject_unknown()
    return params


def _parse_topology(w: Optional[_Walker]) -> TopologySpec:
    if w is None:
        return TopologySpec()
    spec = TopologySpec(
        kind=w.str_("kind", "fully_connected", choices=FABRIC_KINDS),
        bandwidth=w.num_("bandwidth", 300.0e9, positive=True),
        base_latency_us=w.int_("base_latency_us", 0, minimum=0),
    )
    w.reject_unknown()
    return spec


def _parse_moe(w: Optional[_Walker], base_dir: str) -> Optional[MoESpec]:
    if w is None:
        return None
    gate = w.str_("gate", "uniform", choices=GATES)
    zipf_s = w.num_("zipf_s", 1.0, positive=True)
    trace_path = w.str_("trace_path", None)
    offloaded = w.get("offloaded_experts", [])
    if not isinstance(offloaded, list) or any(
            isinstance(e, bool) or not isinstance(e, int) or e < 0
            for e in offloaded):
        raise SchemaError(f"{w.path}.offloaded_experts: expected a list of "
                          f"non-negative integers")
    policy = w.str_("offload_policy", "on_demand", choices=OFFLOAD_POLICIES)
    w.reject_unknown()
    if gate == "trace_replay" and not trace_path:
        raise SchemaError(f"{w.path}.trace_path: required for trace_replay gate")
    if trace_path:
        trace_path = os.path.join(base_dir, trace_path) \
            if not os.path.isabs(trace_path) else trace_path
    return MoESpec(gate, zipf_s, trace_path, tuple(sorted(set(offloaded))),
                   policy)


def _parse_instance(raw: Any, path: str, base_dir: str) -> InstanceSpec:
    w = _Walker(raw, path)
    spec = InstanceSpec(
        instance_id=w.str_("instance_id", required=True),
        model_id=w.str_("model_id", required=True),
        hw_id=w.str_("hw_id", required=True),
        role=w.str_("role", "unified", choices=ROLES),
        tp=w.int_("tp", 1, minimum=1),
        pp=w.int_("pp", 1, minimum=1),
        dp=w.int_("dp", 1, minimum=1),
        ep=w.int_("ep", 1, minimum=1),
        memory=_parse_memory(w.sub("memory"), path),
        scheduler=_parse_scheduler(w.sub("scheduler")),
        topology=_parse_topology(w.sub("topology")),
        moe=_parse_moe(w.sub("moe"), base_dir),
    )
    w.reject_unknown()
    if spec.ep > spec.tp * spec.pp:
        raise SchemaError(
            f"{path}.ep: expert parallel degree {spec.ep} exceeds the "
            f"replica's {spec.tp * spec.pp} devices")
    return spec


def _parse_pd(w: Optional[_Walker]) -> PDSpec:
    if w is None:
        return PDSpec()
    spec = PDSpec(
        kv_transfer=w.str_("kv_transfer", "full_blocking", choices=KV_TRANSFER),
        pairing=w.str_("pairing", "least_tokens", choices=PD_PAIRINGS),
    )
    pairs = w.get("static_pairs", {})
    if not isinstance(pairs, dict) or any(
            not isinstance(k, str) or not isinstance(v, str)
            for k, v in pairs.items()):
        raise SchemaError(f"{w.path}.static_pairs: expected an object of "
                          f"prefill_id -> decode_id strings")
    spec.static_pairs = dict(pairs)
    w.reject_unknown()
    if spec.pairing == "static" and not spec.static_pairs:
        raise SchemaError(f"{w.path}.static_pairs: required for static pairing")
    return spec


def parse_config(raw: Any, base_dir: str = ".") -> SimConfig:
    w = _Walker(raw, "")
    schema = w.str_("schema", CONFIG_SCHEMA)
    if schema != CONFIG_SCHEMA:
        raise SchemaError(f"schema: expected {CONFIG_SCHEMA!r}, got {schema!r}")
    cfg = SimConfig(
        seed=w.int_("seed", 42, minimum=0),
        block_size=w.int_("block_size", 16, minimum=1),
        prefix_caching=w.bool_("prefix_caching", False),
        shared_prefix_cache=w.bool_("shared_prefix_cache", False),
        tp_fallback=w.bool_("tp_fallback", False),
    )
    router = w.sub("router")
    if router is not None:
        cfg.router_policy = router.str_("policy", "round_robin",
                                        choices=ROUTER_POLICIES)
        router.reject_unknown()
    cfg.pd = _parse_pd(w.sub("pd"))
    engine = w.sub("engine")
    if engine is not None:
        cfg.livelock_cap = engine.int_("livelock_cap", 100_000_000, minimum=0)
        engine.reject_unknown()
    arrival = w.sub("arrival")
    if arrival is not None:
        cfg.arrival_rate_per_s = arrival.num_("rate_per_s", None, positive=True)
        arrival.reject_unknown()
    inter = w.sub("interconnect")
    if inter is not None:
        cfg.interconnect_bandwidth = inter.num_("bandwidth", 300.0e9,
                                                positive=True)
        cfg.interconnect_base_latency_us = inter.int_("base_latency_us", 0,
                                                      minimum=0)
        inter.reject_unknown()
    traces = w.get("traces", {})
    if not isinstance(traces, dict) or any(
            not isinstance(k, str) or not isinstance(v, str)
            for k, v in traces.items()):
        raise SchemaError("traces: expected an object of "
                          "'model_id@hw_id' -> path strings")
    for key in traces:
        if key.count("@") != 1 or not all(key.split("@")):
            raise SchemaError(f"traces.{key}: key must look like "
                              f"'model_id@hw_id'")
    cfg.traces = {
        k: (v if os.path.isabs(v) else os.path.join(base_dir, v))
        for k, v in traces.items()
    }
    workload = w.str_("workload", None)
    if workload:
        cfg.workload = workload if os.path.isabs(workload) \
            else os.path.join(base_dir, workload)
    raw_instances = w.get("instances")
    if not isinstance(raw_instances, list) or not raw_instances:
        raise SchemaError("instances: expected a non-empty list")
    cfg.instances = [
        _parse_instance(item, f"instances[{i}]", base_dir)
        for i, item in enumerate(raw_instances)
    ]
    w.reject_unknown()

    ids = [i.instance_id for i in cfg.instances]
    dupes = sorted({x for x in ids if ids.count(x) > 1})
    if dupes:
        raise SchemaError(f"instances: duplicate instance_id(s) "
                          f"{', '.join(dupes)}")
    _cross_check(cfg)
    cfg.echo = config_echo(cfg)
    return cfg


def _cross_check(cfg: SimConfig) -> None:
    roles = {i.instance_id: i.role for i in cfg.instances}
    has_prefill = any(r == "prefill" for r in roles.values())
    has_decode = any(r == "decode" for r in roles.values())
    if has_prefill and not has_decode:
        raise CrossRefError(
            "prefill instances exist but no decode instance can receive "
            "their KV")
    if has_decode and not has_prefill:
        raise CrossRefError(
            "decode instances exist but nothing prefills for them")
    for pre, dec in sorted(cfg.pd.static_pairs.items()):
        if pre not in roles:
            raise CrossRefError(f"pd.static_pairs: unknown instance {pre!r}")
        if roles[pre] != "prefill":
            raise CrossRefError(
                f"pd.static_pairs: {pre!r} is {roles[pre]}, not prefill")
        if dec not in roles:
            raise CrossRefError(f"pd.static_pairs: unknown instance {dec!r}")
        if roles[dec] != "decode":
            raise CrossRefError(
                f"pd.static_pairs: {dec!r} is {roles[dec]}, not decode")
    for i, inst in enumerate(cfg.instances):
        key = f"{inst.model_id}@{inst.hw_id}"
        if cfg.traces and key not in cfg.traces:
            raise CrossRefError(
                f"instances[{i}] needs a perf trace for {key!r}; "
                f"traces has {sorted(cfg.traces)}")


def config_echo(cfg: SimConfig) -> dict[str, Any]:
    """Normalized, JSON-serializable copy of the effective configuration."""
    def inst(i: InstanceSpec) -> dict[str, Any]:
        out: dict[str, Any] = {
            "instance_id": i.instance_id, "role": i.role,
            "model_id": i.model_id, "hw_id": i.hw_id,
            "tp": i.tp, "pp": i.pp, "dp": i.dp, "ep": i.ep,
            "memory": {
                "device_capacity": i.memory.device_capacity,
                "host_capacity": i.memory.host_capacity,
                "memory_bandwidth": i.memory.memory_bandwidth,
                "host_link_bandwidth": i.memory.host_link_bandwidth,
            },
            "scheduler": {
                "max_batch_tokens": i.scheduler.max_batch_tokens,
                "max_batch_seqs": i.scheduler.max_batch_seqs,
                "prefill_chunk": i.scheduler.prefill_chunk,
                "policy": i.scheduler.policy,
            },
            "topology": {
                "kind": i.topology.kind,
                "bandwidth": i.topology.bandwidth,
                "base_latency_us": i.topology.base_latency_us,
            },
        }
        if i.moe is not None:
            out["moe"] = {
                "gate": i.moe.gate, "zipf_s": i.moe.zipf_s,
                "trace_path": i.moe.trace_path,
                "offloaded_experts": list(i.moe.offloaded_experts),
                "offload_policy": i.moe.offload_policy,
            }
        return out

    return {
        "schema": CONFIG_SCHEMA,
        "seed": cfg.seed,
        "block_size": cfg.block_size,
        "prefix_caching": cfg.prefix_caching,
        "shared_prefix_cache": cfg.shared_prefix_cache,
        "tp_fallback": cfg.tp_fallback,
        "router": {"policy": cfg.router_policy},
        "pd": {
            "kv_transfer": cfg.pd.kv_transfer,
            "pairing": cfg.pd.pairing,
            "static_pairs": dict(sorted(cfg.pd.static_pairs.items())),
        },
        "engine": {"livelock_cap": cfg.livelock_cap},
        "arrival": {"rate_per_s": cfg.arrival_rate_per_s},
        "interconnect": {
            "bandwidth": cfg.interconnect_bandwidth,
            "base_latency_us": cfg.interconnect_base_latency_us,
        },
        "traces": dict(sorted(cfg.traces.items())),
        "workload": cfg.workload,
        "instances": [inst(i) for i in cfg.instances],
    }


def load_config(path: str) -> SimConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise SchemaError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON: {exc}")
    return parse_config(raw, base_dir=os.path.dirname(os.path.abspath(path)))
