"""Interconnect topology, bandwidth reservations and collective costs.

Links are undirected and exclusive: a transfer holds the whole link for its
duration, so two equal transfers queued on one link serialize to twice the
makespan of one. A device's memory channel is modeled as a degenerate
self-loop link carrying the device memory bandwidth, which lets cache-hit
loads contend through the same reservation bookkeeping as real transfers.

Durations are integer microseconds, computed as
``base_latency_us + round_half_up(bytes / bandwidth)`` with bandwidth in
bytes per second. Collectives are analytic alpha+beta costs and reserve
nothing; point-to-point transfers reserve every hop along the minimum-hop
route (lowest node-id order breaks ties) with store-and-forward hops.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional

from .errors import Unreachable


def round_half_up(x: float) -> int:
    """Round a non-negative float to the nearest integer, halves up."""
    return math.floor(x + 0.5)


def transfer_us(nbytes: int, bandwidth: float, base_latency_us: int = 0) -> int:
    """Duration of moving nbytes over one link."""
    if nbytes <= 0:
        return int(base_latency_us)
    return int(base_latency_us) + round_half_up(nbytes * 1e6 / bandwidth)


class CollectiveKind(Enum):
    ALL_TO_ALL = "AllToAll"
    ALL_REDUCE = "AllReduce"
    ALL_GATHER = "AllGather"


@dataclass
class Link:
    a: str
    b: str
    bandwidth: float            # bytes per second, > 0
    base_latency_us: int = 0
    # busy intervals, kept sorted and non-overlapping
    reservations: list[tuple[int, int]] = field(default_factory=list)

    def key(self) -> tuple[str, str]:
        return (self.a, self.b) if self.a <= self.b else (self.b, self.a)

    def reserve(self, earliest: int, duration: int) -> tuple[int, int]:
        """Claim the first free window of `duration` at or after `earliest`."""
        if duration <= 0:
            return (earliest, earliest)
        start = earliest
        idx = 0
        for i, (s, e) in enumerate(self.reservations):
            if start + duration <= s:
                idx = i
                break
            start = max(start, e)
            idx = i + 1
        window = (start, start + duration)
        self.reservations.insert(idx, window)
        return window


@dataclass
class TransferSegment:
    link_key: tuple[str, str]
    start: int
    end: int


@dataclass
class TransferPlan:
    src: str
    dst: str
    nbytes: int
    segments: list[TransferSegment]
    completion: int


class Topology:
    """Named nodes joined by undirected links. Self-loops are memory channels."""

    def __init__(self) -> None:
        self.nodes: set[str] = set()
        self.links: dict[tuple[str, str], Link] = {}

    def add_node(self, name: str) -> None:
        self.nodes.add(name)

    def add_link(self, a: str, b: str, bandwidth: float, base_latency_us: int = 0) -> Link:
        if bandwidth <= 0:
            raise ValueError(f"link {a}-{b}: bandwidth must be positive")
        self.nodes.add(a)
        self.nodes.add(b)
        link = Link(a, b, bandwidth, int(base_latency_us))
        key = link.key()
        self.links[key] = link
        return link

    def link_between(self, a: str, b: str) -> Optional[Link]:
        return self.links.get((a, b) if a <= b else (b, a))

    def neighbors(self, node: str) -> list[str]:
        out = []
        for (a, b) in self.links:
            if a == b:
                continue        # memory channels route nothing
            if a == node:
                out.append(b)
            elif b == node:
                out.append(a)
        return sorted(out)

    def route(self, src: str, dst: str) -> list[str]:
        """Minimum-hop node path src..dst; lowest-id order breaks ties."""
        if src not in self.nodes or dst not in self.nodes:
            raise Unreachable(f"unknown endpoint in route {src} -> {dst}")
        if src == dst:
            return [src]
        parent: dict[str, str] = {src: src}
        frontier = deque([src])
        while frontier:
            cur = frontier.popleft()
            for nxt in self.neighbors(cur):
                if nxt not in parent:
                    parent[nxt] = cur
                    if nxt == dst:
                        path = [dst]
                        while path[-1] != src:
                            path.append(parent[path[-1]])
                        return list(reversed(path))
                    frontier.append(nxt)
        raise Unreachable(f"no route {src} -> {dst}")


# --- topology builders ---

def connect_fully(topo: Topology, nodes: list[str], bandwidth: float,
                  base_latency_us: int = 0) -> None:
    for i, a in enumerate(nodes):
        for b in nodes[i + 1:]:
            topo.add_link(a, b, bandwidth, base_latency_us)


def connect_ring(topo: Topology, nodes: list[str], bandwidth: float,
                 base_latency_us: int = 0) -> None:
    n = len(nodes)
    if n == 1:
        topo.add_node(nodes[0])
        return
    for i in range(n):
        a, b = nodes[i], nodes[(i + 1) % n]
        if a != b and topo.link_between(a, b) is None:
            topo.add_link(a, b, bandwidth, base_latency_us)


def connect_host_bridge(topo: Topology, devices: list[str], host: str,
                        bandwidth: float, base_latency_us: int = 0) -> None:
    """PCIe-like star: every device reaches the others through the host."""
    for d in devices:
        topo.add_link(d, host, bandwidth, base_latency_us)


def _collective_links(topo: Topology, participants: list[str]) -> list[Link]:
    """Links a collective runs over.

    Preference order: the participant-induced subgraph when it connects the
    group (fully-connected or ring fabrics); otherwise the union of the
    min-hop paths between consecutive participants (bridged fabrics).
    """
    members = sorted(set(participants))
    induced = [
        lk for (a, b), lk in sorted(topo.links.items())
        if a != b and a in members and b in members
    ]
    if induced:
        # connectivity check over the induced subgraph
        adj: dict[str, set[str]] = {m: set() for m in members}
        for lk in induced:
            adj[lk.a].add(lk.b)
            adj[lk.b].add(lk.a)
        seen = {members[0]}
        stack = [members[0]]
        while stack:
            for nxt in sorted(adj[stack.pop()]):
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        if seen == set(members):
            return induced
    links: dict[tuple[str, str], Link] = {}
    for a, b in zip(members, members[1:]):
        path = topo.route(a, b)     # raises Unreachable when disconnected
        for u, v in zip(path, path[1:]):
            lk = topo.link_between(u, v)
            links[lk.key()] = lk
    return list(links.values())


def collective_time(topo: Topology, kind: CollectiveKind,
                    participants: Iterable[str], bytes_per_node: int) -> int:
    """Analytic alpha+beta cost of one collective, in integer µs.

    AllToAll:  base + (bytes_per_node * (P-1)/P) / min_bw
    AllReduce: base + 2 * bytes_per_node * (P-1)/P / min_bw
    AllGather: base + bytes_per_node * (P-1) / min_bw
    """
    members = sorted(set(participants))
    p = len(members)
    if p <= 1 or bytes_per_node <= 0:
        return 0
    links = _collective_links(topo, members)
    if not links:
        raise Unreachable(f"collective participants not connected: {members}")
    bw = min(lk.bandwidth for lk in links)
    base = max(lk.base_latency_us for lk in links)
    frac = (p - 1) / p
    if kind is CollectiveKind.ALL_TO_ALL:
        wire = bytes_per_node * frac
    elif kind is CollectiveKind.ALL_REDUCE:
        wire = 2.0 * bytes_per_node * frac
    elif kind is CollectiveKind.ALL_GATHER:
        wire = bytes_per_node * (p - 1)
    else:
        raise ValueError(f"unknown collective kind {kind}")
    return base + round_half_up(wire * 1e6 / bw)


class Network:
    """Reservation front-end over a Topology."""

    def __init__(self, topology: Topology):
        self.topology = topology

    def p2p_transfer(self, src: str, dst: str, nbytes: int, earliest: int) -> TransferPlan:
        """Reserve a path for nbytes; hops serialize store-and-forward."""
        if src == dst:
            raise ValueError("p2p endpoints must differ")
        path = self.topology.route(src, dst)
        t = earliest
        segments: list[TransferSegment] = []
        for u, v in zip(path, path[1:]):
            link = self.topology.link_between(u, v)
            duration = transfer_us(nbytes, link.bandwidth, link.base_latency_us)
            start, end = link.reserve(t, duration)
            segments.append(TransferSegment(link.key(), start, end))
            t = end
        return TransferPlan(src, dst, nbytes, segments, t)

    def reserve_channel(self, node: str, nbytes: int, earliest: int) -> tuple[int, int]:
        """Occupy a node's memory channel (its self-loop link)."""
        link = self.topology.link_between(node, node)
        if link is None:
            raise Unreachable(f"no memory channel link for node {node}")
        duration = transfer_us(nbytes, link.bandwidth, link.base_latency_us)
        return link.reserve(earliest, duration)

    def collective_time(self, kind: CollectiveKind, participants: Iterable[str],
                        bytes_per_node: int) -> int:
        return collective_time(self.topology, kind, participants, bytes_per_node)
