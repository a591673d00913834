"""Mixture-of-experts routing, expert-parallel pricing and weight offload.

Gate decisions only shape WHERE tokens go, so the simulator mimics the
router without computing activations. Each token picks top_k distinct
experts. Uniform draws them equiprobably; Zipf(s) weights expert e by
(e+1)^-s and samples sequentially by inverse CDF without replacement
(vectorized: pick, zero the column, renormalize, repeat); TraceReplay plays
back recorded (layer, token_index, expert_ids...) lines and raises
TraceExhausted when the recording runs dry. Draws come from a Philox
stream per (instance, replica, layer), so routing is a pure function of
(layer, token position, seed, policy).

One MoE layer costs: dispatch all-to-all + the slowest device's resident
expert work (ExpertFFN latency keyed by that expert's token count, context
0) + return all-to-all. With ep_degree 1 the collective terms are zero and
no all-to-all events are emitted. Offloaded experts must be fetched over
the host link before compute: OnDemand starts the fetch when the tokens
arrive, Prefetch starts it at the previous layer's start and only the
uncovered remainder stalls the layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np

from .errors import ParseError, TraceExhausted
from .network import CollectiveKind, Network, TransferPlan
from .perf import LatencyResolver, Phase, OP_EXPERT_FFN


class OffloadPolicy(Enum):
    ON_DEMAND = "OnDemand"
    PREFETCH = "Prefetch"


@dataclass(frozen=True)
class UniformGate:
    pass


@dataclass(frozen=True)
class ZipfGate:
    s: float = 1.0


@dataclass(frozen=True)
class TraceReplayGate:
    path: str


GatePolicy = UniformGate | ZipfGate | TraceReplayGate


@dataclass
class ExpertPlacement:
    expert_count: int
    ep_degree: int = 1
    offloaded: frozenset[int] = frozenset()
    offload_policy: OffloadPolicy = OffloadPolicy.ON_DEMAND

    def __post_init__(self) -> None:
        bad = [e for e in self.offloaded if not 0 <= e < self.expert_count]
        if bad:
            raise ValueError(f"offloaded experts out of range: {bad}")

    def device_of(self, expert: int) -> int:
        """EP rank hosting an expert (round-robin striping)."""
        return expert % self.ep_degree


@dataclass
class ExpertAssignment:
    layer: int
    token_experts: np.ndarray          # shape (n_tokens, top_k), distinct per row
    counts: np.ndarray                 # shape (expert_count,), tokens per expert

    @property
    def n_tokens(self) -> int:
        return int(self.token_experts.shape[0])


def _weights(gate: GatePolicy, expert_count: int) -> np.ndarray:
    if isinstance(gate, UniformGate):
        return np.full(expert_count, 1.0 / expert_count)
    if isinstance(gate, ZipfGate):
        w = (np.arange(1, expert_count + 1, dtype=float)) ** (-gate.s)
        return w / w.sum()
    raise TypeError(f"no static weights for {gate}")


def _sample_without_replacement(weights: np.ndarray, n: int, k: int,
                                gen: np.random.Generator) -> np.ndarray:
    """Sequential inverse-CDF picks, one zeroed column per round, vectorized."""
    e = len(weights)
    avail = np.tile(weights, (n, 1))
    picks = np.empty((n, k), dtype=np.int64)
    rows = np.arange(n)
    for j in range(k):
        u = gen.random(n)
        cdf = np.cumsum(avail, axis=1)
        r = u * cdf[:, -1]
        idx = np.minimum((cdf <= r[:, None]).sum(axis=1), e - 1)
        # float boundary can land on an exhausted column; step to the next live one
        dead = avail[rows, idx] <= 0.0
        for row in np.nonzero(dead)[0]:
            live = np.nonzero(avail[row] > 0.0)[0]
            later = live[live >= idx[row]]
            idx[row] = later[0] if len(later) else live[-1]
        picks[:, j] = idx
        avail[rows, idx] = 0.0
    return picks


class RoutingTrace:
    """Recorded gate decisions: lines of `layer,token_index,expert,expert,...`."""

    def __init__(self, path: str):
        self.per_layer: dict[int, list[tuple[int, ...]]] = {}
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                parts = line.split(",")
                if len(parts) < 3:
                    raise ParseError("expected layer,token_index,expert_ids...",
                                     path, lineno)
                try:
                    layer = int(parts[0])
                    token_index = int(parts[1])
                    experts = tuple(int(p) for p in parts[2:])
                except ValueError:
                    raise ParseError("non-integer field", path, lineno)
                if len(set(experts)) != len(experts):
                    raise ParseError("expert ids must be distinct", path, lineno)
                seq = self.per_layer.setdefault(layer, [])
                if token_index != len(seq):
                    raise ParseError(
                        f"token_index {token_index} out of order "
                        f"(expected {len(seq)})", path, lineno)
                seq.append(experts)
        self.cursor: dict[int, int] = {}

    def take(self, layer: int, n: int, top_k: int,
             expert_count: int) -> np.ndarray:
        seq = self.per_layer.get(layer, [])
        at = self.cursor.get(layer, 0)
        if at + n > len(seq):
            raise TraceExhausted(
                f"routing trace for layer {layer} has {len(seq)} tokens, "
                f"needs {at + n}")
        rows = seq[at:at + n]
        self.cursor[layer] = at + n
        out = np.empty((n, top_k), dtype=np.int64)
        for i, experts in enumerate(rows):
            if len(experts) != top_k:
                raise TraceExhausted(
                    f"layer {layer} trace row has {len(experts)} experts, "
                    f"top_k is {top_k}")
            if any(not 0 <= e < expert_count for e in experts):
                raise TraceExhausted(
                    f"layer {layer} trace row references expert outside "
                    f"[0,{expert_count})")
            out[i] = experts
        return out


def route_tokens(layer: int, n_tokens: int, expert_count: int, top_k: int,
                 gate: GatePolicy, gen: Optional[np.random.Generator] = None,
                 trace: Optional[RoutingTrace] = None) -> ExpertAssignment:
    """Assign each of n_tokens to top_k distinct experts."""
    if not 1 <= top_k <= expert_count:
        raise ValueError("top_k must be in [1, expert_count]")
    if n_tokens == 0:
        picks = np.empty((0, top_k), dtype=np.int64)
    elif isinstance(gate, TraceReplayGate):
        if trace is None:
            raise ValueError("TraceReplay gate needs a loaded RoutingTrace")
        picks = trace.take(layer, n_tokens, top_k, expert_count)
    else:
        if gen is None:
            raise ValueError(f"{type(gate).__name__} needs a generator")
        picks = _sample_without_replacement(_weights(gate, expert_count),
                                            n_tokens, top_k, gen)
    counts = np.bincount(picks.ravel(), minlength=expert_count)
    return ExpertAssignment(layer, picks, counts)


def offload_fetch(experts: list[int], placement: ExpertPlacement,
                  expert_weight_bytes: int, network: Network, host_node: str,
                  dev_node_of: Callable[[int], str], fetch_start: int,
                  compute_ready: int) -> tuple[list[TransferPlan], int]:
    """Fetch offloaded expert weights over the host link.

    Transfers are reserved in ascending expert id from `fetch_start`
    (OnDemand passes compute_ready, Prefetch the previous layer's start);
    contention serializes on the shared link. Returns the plans and the
    stall: max(0, last completion - compute_ready).
    """
    plans: list[TransferPlan] = []
    done = compute_ready
    for e in sorted(experts):
        plan = network.p2p_transfer(
            host_node, dev_node_of(placement.device_of(e)),
            expert_weight_bytes, fetch_start)
        plans.append(plan)
        done = max(done, plan.completion)
    return plans, max(0, done - compute_ready)


@dataclass
class MoELayerCost:
    latency_us: int
    dispatch_us: int
    compute_us: int
    ret_us: int
    stall_us: int
    fetch_plans: list[TransferPlan] = field(default_factory=list)
    a2a_events: int = 0


def moe_layer_time(assignment: ExpertAssignment, placement: ExpertPlacement,
                   resolver: LatencyResolver, phase: Phase, tp_degree: int,
                   network: Network, ep_nodes: list[str], host_node: str,
                   hidden_size: int, dtype_bytes: int,
                   expert_weight_bytes: int, layer_start: int,
                   prev_layer_start: int) -> MoELayerCost:
    """Price one MoE layer of one iteration.

    layer_start is the absolute time this layer's tokens are ready (after
    preceding layers); prev_layer_start anchors Prefetch transfers.
    """
    n = assignment.n_tokens
    ep = placement.ep_degree
    top_k = assignment.token_experts.shape[1] if n else 0
    dispatch = ret = 0
    a2a_events = 0
    if ep > 1 and n > 0:
        bytes_per_node = math.ceil(n * top_k * hidden_size * dtype_bytes / ep)
        dispatch = network.collective_time(CollectiveKind.ALL_TO_ALL,
                                           ep_nodes[:ep], bytes_per_node)
        ret = dispatch
        a2a_events = 2
    compute_ready = layer_start + dispatch
    fetch_plans: list[TransferPlan] = []
    stall = 0
    needed_offloaded = [e for e in sorted(placement.offloaded)
                        if assignment.counts[e] > 0]
    if needed_offloaded and expert_weight_bytes > 0:
        if placement.offload_policy is OffloadPolicy.PREFETCH:
            fetch_start = prev_layer_start
        else:
            fetch_start = compute_ready
        fetch_plans, stall = offload_fetch(
            needed_offloaded, placement, expert_weight_bytes, network,
            host_node, lambda rank: ep_nodes[rank], fetch_start, compute_ready)
    per_device = [0] * ep
    for e in np.nonzero(assignment.counts)[0]:
        lat = resolver.lookup(OP_EXPERT_FFN, phase, int(assignment.counts[e]),
                              0, tp_degree)
        per_device[placement.device_of(int(e))] += lat
    compute = max(per_device) if per_device else 0
    total = dispatch + stall + compute + ret
    return MoELayerCost(total, dispatch, compute, ret, stall,
                        fetch_plans, a2a_events)
