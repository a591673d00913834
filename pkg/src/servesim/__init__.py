"""Trace-driven discrete-event simulator for LLM serving clusters.

The library models heterogeneous serving fleets: multiple instances
behind a router, continuous batching with chunked prefill, paged KV
memory with radix-tree prefix caching and host spill, expert-parallel
MoE layers with optional weight offload, and disaggregated
prefill/decode with KV transfer over an explicit network model. Time is
integer microseconds throughout; runs are reproducible bit for bit
under a fixed seed.
"""

from .config import (InstanceSpec, MemorySpec, MoESpec, PDSpec, SimConfig,
                     TopologySpec, load_config, parse_config)
from .engine import DrainStatus, Engine, Event, EventKind
from .errors import (CannotSatisfy, CrossRefError, Deadlock, IncompleteRun,
                     InsufficientMemory, LivelockGuard, NoEligibleInstance,
                     NonMonotoneTime, ParseError, SchemaError, SimError,
                     Unreachable)
from .instance import (Instance, KVTransferPolicy, Replica, Request, Role,
                       SchedulerParams)
from .memory import (BlockTier, KVBlock, MemoryManager, MemoryPool, RadixTree,
                     block_nbytes)
from .metrics import (MetricsCollector, Report, aggregate_rows, build_rows,
                      finalize, read_rows, write_report)
from .moe import ExpertPlacement, OffloadPolicy, route_tokens
from .network import (CollectiveKind, Network, Topology, collective_time,
                      transfer_us)
from .perf import (BatchComposition, LatencyResolver, ModelMeta, PerfKey,
                   PerfTable, Phase, iteration_latency, load_trace)
from .presets import preset_names, write_presets
from .router import POLICIES, Router
from .simulation import Simulation, build_simulation, load_tables
from .workload import WorkloadRecord, load_workload, synthesize_arrivals

__version__ = "0.1.0"

__all__ = [
    "BatchComposition", "BlockTier", "CannotSatisfy", "CollectiveKind",
    "CrossRefError", "Deadlock", "DrainStatus", "Engine", "Event",
    "EventKind", "ExpertPlacement", "IncompleteRun", "Instance",
    "InstanceSpec", "InsufficientMemory", "KVBlock", "KVTransferPolicy",
    "LatencyResolver", "LivelockGuard", "MemoryManager", "MemoryPool",
    "MemorySpec", "MetricsCollector", "ModelMeta", "MoESpec", "Network",
    "NoEligibleInstance", "NonMonotoneTime", "OffloadPolicy", "POLICIES",
    "ParseError", "PDSpec", "PerfKey", "PerfTable", "Phase", "RadixTree",
    "Replica", "Report", "Request", "Role", "Router", "SchedulerParams",
    "SchemaError", "SimConfig", "SimError", "Simulation", "Topology",
    "TopologySpec", "Unreachable", "WorkloadRecord", "aggregate_rows",
    "block_nbytes", "build_rows", "build_simulation", "collective_time",
    "finalize", "iteration_latency", "load_config", "load_tables",
    "load_trace", "load_workload", "parse_config", "preset_names",
    "read_rows", "route_tokens", "synthesize_arrivals", "transfer_us",
    "write_presets", "write_report", "__version__",
]
