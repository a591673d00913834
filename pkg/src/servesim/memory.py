"""Paged KV-cache memory with radix-tree prefix reuse and tiered eviction.

KV state lives in fixed-size blocks of `block_size` tokens. One block costs
``ceil(block_size * kv_bytes_per_token_per_layer * layer_count / tp_degree)``
bytes (the per-shard footprint on one device). Blocks sit in one of two
tiers, DEVICE or HOST, and a block with refcount > 0 is pinned: it is never
evicted and never changes tier.

Completed prompt prefixes are published in a radix tree whose edge labels
are block-aligned token runs (sub-block tails are never cached). Children
hang off their first token; two siblings may share a first token when their
prefixes diverge inside the first block, in which case they hang off the
same key and the walk disambiguates by content. Matching walks the longest
common prefix, truncates it to a block multiple, splits edges at the match
boundary, pins the matched blocks and refreshes last_access along the path.

Eviction scans the unpinned frontier (nodes holding device blocks with no
device-holding descendants) in ascending last_access order. Victims spill
to HOST when the host tier has room (a device-to-host transfer is priced
over the host link) and are discarded otherwise; discarding a node drops
its now-unreachable descendants too, and empty nodes are pruned.

Cache hits are not free: device-tier hits occupy the device memory channel
(a self-loop link) for their byte volume, host-tier hits ride the host link
back onto the device and are re-promoted to DEVICE first. In the shared-
cache configuration a hit on another instance's blocks copies them over the
inter-instance route into freshly allocated local blocks; the remote
originals are only timestamp-touched, never refcounted remotely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional

from .errors import CannotSatisfy, InsufficientMemory
from .network import Network, TransferPlan


class BlockTier(Enum):
    DEVICE = "DeviceLocal"
    HOST = "HostMemory"


def block_nbytes(block_size: int, kv_bytes_per_token_per_layer: int,
                 layer_count: int, tp_degree: int) -> int:
    """Per-shard bytes of one KV block on one device."""
    return math.ceil(block_size * kv_bytes_per_token_per_layer * layer_count
                     / tp_degree)


@dataclass
class KVBlock:
    block_id: int
    nbytes: int
    tier: BlockTier = BlockTier.DEVICE
    refcount: int = 0
    cached: bool = False            # adopted by a prefix tree
    pool: "MemoryPool" = None       # owning pool (set at allocation)

    def __repr__(self) -> str:
        return (f"KVBlock({self.block_id}, {self.nbytes}B, {self.tier.value}, "
                f"rc={self.refcount}{', cached' if self.cached else ''})")


class MemoryPool:
    """Byte accounting for one replica's device and host tiers."""

    def __init__(self, device_capacity: int, host_capacity: int,
                 memory_bandwidth: float, name: str = "pool"):
        self.name = name
        self.device_capacity = int(device_capacity)
        self.host_capacity = int(host_capacity)
        self.memory_bandwidth = memory_bandwidth
        self.device_used = 0
        self.host_used = 0
        self.blocks: dict[int, KVBlock] = {}    # live blocks, id -> block
        self._next_id = 0

    def device_free(self) -> int:
        return self.device_capacity - self.device_used

    def host_free(self) -> int:
        return self.host_capacity - self.host_used

    def allocate_device(self, nbytes: int) -> KVBlock:
        if self.device_used + nbytes > self.device_capacity:
            raise InsufficientMemory(
                f"{self.name}: need {nbytes}B device, "
                f"{self.device_free()}B free of {self.device_capacity}B")
        blk = KVBlock(self._next_id, nbytes, BlockTier.DEVICE, refcount=1,
                      pool=self)
        self._next_id += 1
        self.device_used += nbytes
        self.blocks[blk.block_id] = blk
        return blk

    def free(self, block: KVBlock) -> None:
        if block.block_id not in self.blocks:
            raise ValueError(f"{self.name}: double free of {block}")
        if block.tier is BlockTier.DEVICE:
            self.device_used -= block.nbytes
        else:
            self.host_used -= block.nbytes
        del self.blocks[block.block_id]

    def move_to_host(self, block: KVBlock) -> None:
        if block.refcount > 0:
            raise ValueError(f"{self.name}: cannot demote pinned {block}")
        if self.host_used + block.nbytes > self.host_capacity:
            raise InsufficientMemory(f"{self.name}: host tier full")
        self.device_used -= block.nbytes
        self.host_used += block.nbytes
        block.tier = BlockTier.HOST

    def move_to_device(self, block: KVBlock) -> None:
        if self.device_used + block.nbytes > self.device_capacity:
            raise InsufficientMemory(f"{self.name}: device tier full")
        self.host_used -= block.nbytes
        self.device_used += block.nbytes
        block.tier = BlockTier.DEVICE

    def check_accounting(self) -> None:
        """Tier sums re-derived from live blocks must equal the counters."""
        dev = sum(b.nbytes for b in self.blocks.values()
                  if b.tier is BlockTier.DEVICE)
        host = sum(b.nbytes for b in self.blocks.values()
                   if b.tier is BlockTier.HOST)
        assert dev == self.device_used, (dev, self.device_used)
        assert host == self.host_used, (host, self.host_used)


def allocate_kv(pool: MemoryPool, n_blocks: int, nbytes_per_block: int) -> list[KVBlock]:
    """All-or-nothing allocation of n device blocks."""
    if n_blocks * nbytes_per_block > pool.device_free():
        raise InsufficientMemory(
            f"{pool.name}: need {n_blocks} blocks "
            f"({n_blocks * nbytes_per_block}B), {pool.device_free()}B free")
    return [pool.allocate_device(nbytes_per_block) for _ in range(n_blocks)]


# --- radix tree ---

@dataclass
class RadixNode:
    node_id: int
    edge: tuple[int, ...]                   # block-aligned token run
    blocks: list[KVBlock]
    parent: Optional["RadixNode"] = None
    children: dict[int, list["RadixNode"]] = field(default_factory=dict)
    last_access: int = 0

    def own_pinned(self) -> bool:
        return any(b.refcount > 0 for b in self.blocks)

    def attach(self, child: "RadixNode") -> None:
        child.parent = self
        self.children.setdefault(child.edge[0], []).append(child)

    def detach(self, child: "RadixNode") -> None:
        sibs = self.children[child.edge[0]]
        sibs.remove(child)
        if not sibs:
            del self.children[child.edge[0]]
        child.parent = None


def _common_prefix(a: tuple[int, ...], b: tuple[int, ...]) -> int:
    n = min(len(a), len(b))
    i = 0
    while i < n and a[i] == b[i]:
        i += 1
    return i


class RadixTree:
    """Block-aligned prefix index over cached KV blocks."""

    def __init__(self, block_size: int):
        if block_size < 1:
            raise ValueError("block_size must be >= 1")
        self.block_size = block_size
        self.root = RadixNode(0, (), [])
        self._next_node_id = 1

    def _new_node(self, edge: tuple[int, ...], blocks: list[KVBlock],
                  now: int) -> RadixNode:
        node = RadixNode(self._next_node_id, edge, blocks, last_access=now)
        self._next_node_id += 1
        return node

    def _best_child(self, node: RadixNode, ids: tuple[int, ...]
                    ) -> tuple[Optional[RadixNode], int]:
        if not ids:
            return None, 0
        best, best_common = None, 0
        for child in node.children.get(ids[0], []):
            c = _common_prefix(child.edge, ids)
            if c > best_common:
                best, best_common = child, c
        return best, best_common

    def _split(self, node: RadixNode, at: int, now: int) -> RadixNode:
        """Split a node's edge at a block-aligned offset; returns the upper part."""
        b = self.block_size
        assert 0 < at < len(node.edge) and at % b == 0
        upper = self._new_node(node.edge[:at], node.blocks[:at // b], now)
        upper.last_access = node.last_access
        parent = node.parent
        parent.detach(node)
        node.edge = node.edge[at:]
        node.blocks = node.blocks[at // b:]
        parent.attach(upper)
        upper.attach(node)
        return upper

    def match(self, token_ids: Iterable[int], now: int,
              touch: bool = True) -> tuple[int, list[KVBlock]]:
        """Longest block-aligned cached prefix of token_ids.

        Returns (matched_token_count, blocks). Splits edges at the match
        boundary so every returned block belongs to a fully matched node.
        Refcounting is the caller's job (see MemoryManager.prefix_match).
        """
        b = self.block_size
        ids = tuple(token_ids)
        node = self.root
        pos = 0
        blocks: list[KVBlock] = []
        while True:
            child, common = self._best_child(node, ids[pos:])
            if child is None or common == 0:
                break
            aligned = (common // b) * b
            if aligned == 0:
                break
            if aligned < len(child.edge):
                child = self._split(child, aligned, now)
            if touch:
                child.last_access = now
            blocks.extend(child.blocks)
            node = child
            pos += aligned
        if touch and pos > 0:
            # refresh the whole path root-ward so LRU never evicts a live prefix
            walk = node
            while walk is not self.root:
                walk.last_access = max(walk.last_access, now)
                walk = walk.parent
        return pos, blocks

    def peek(self, token_ids: Iterable[int]) -> int:
        """Matched token count with zero side effects (router probing)."""
        b = self.block_size
        ids = tuple(token_ids)
        node = self.root
        pos = 0
        while True:
            child, common = self._best_child(node, ids[pos:])
            if child is None:
                break
            aligned = (common // b) * b
            if aligned == 0:
                break
            if aligned < len(child.edge):
                pos += aligned
                break
            node = child
            pos += aligned
        return pos

    def insert(self, token_ids: Iterable[int], blocks: list[KVBlock],
               now: int) -> list[KVBlock]:
        """Publish a block-aligned prefix; dedups against existing paths.

        `blocks` must cover token_ids at block granularity. Returns the
        caller's blocks that were NOT adopted (the span was already cached,
        or fell in the sub-block tail); the caller keeps owning those.
        Idempotent: re-inserting an existing prefix changes nothing.
        """
        b = self.block_size
        ids = tuple(token_ids)
        n = (len(ids) // b) * b
        usable = n // b
        redundant = list(blocks[usable:])       # sub-block tail, never cached
        node = self.root
        pos = 0
        while pos < n:
            child, common = self._best_child(node, ids[pos:n])
            aligned = (common // b) * b
            if child is None or aligned == 0:
                leaf = self._new_node(ids[pos:n], list(blocks[pos // b:usable]), now)
                for blk in leaf.blocks:
                    blk.cached = True
                node.attach(leaf)
                return redundant
            if aligned < len(child.edge):
                child = self._split(child, aligned, now)
            child.last_access = max(child.last_access, now)
            for i in range(pos // b, (pos + aligned) // b):
                mine = blocks[i]
                theirs = child.blocks[i - pos // b]
                if mine is not theirs:
                    redundant.append(mine)
            node = child
            pos += aligned
        return redundant

    # traversal helpers

    def nodes(self) -> list[RadixNode]:
        out: list[RadixNode] = []
        stack = [self.root]
        while stack:
            node = stack.pop()
            if node is not self.root:
                out.append(node)
            for key in sorted(node.children):
                stack.extend(node.children[key])
        return out

    def cached_blocks(self) -> list[KVBlock]:
        return [blk for node in self.nodes() for blk in node.blocks]

    def _subtree_blocks(self, node: RadixNode) -> list[KVBlock]:
        out = list(node.blocks)
        for key in sorted(node.children):
            for child in node.children[key]:
                out.extend(self._subtree_blocks(child))
        return out

    def evict_frontier(self, pool: Optional[MemoryPool] = None) -> list[RadixNode]:
        """Unpinned nodes holding device blocks with no device descendants."""
        frontier = []
        for node in self.nodes():
            if not node.blocks:
                continue
            if pool is not None and node.blocks[0].pool is not pool:
                continue
            if node.blocks[0].tier is not BlockTier.DEVICE:
                continue
            if node.own_pinned():
                continue
            if any(blk.tier is BlockTier.DEVICE
                   for key in node.children
                   for child in node.children[key]
                   for blk in self._subtree_blocks(child)):
                continue
            frontier.append(node)
        return frontier

    def evictable_device_bytes(self, pool: Optional[MemoryPool] = None) -> int:
        total = 0
        for node in self.nodes():
            if not node.blocks or node.own_pinned():
                continue
            if pool is not None and node.blocks[0].pool is not pool:
                continue
            total += sum(b.nbytes for b in node.blocks
                         if b.tier is BlockTier.DEVICE)
        return total

    def prune(self, node: RadixNode) -> None:
        """Remove a node and its (now prefix-less) subtree from the index."""
        if node.parent is not None:
            node.parent.detach(node)


@dataclass
class EvictOutcome:
    freed_device_bytes: int = 0
    spilled: list[KVBlock] = field(default_factory=list)
    discarded: list[KVBlock] = field(default_factory=list)
    spill_plans: list[TransferPlan] = field(default_factory=list)


@dataclass
class MatchResult:
    matched_tokens: int = 0
    blocks: list[KVBlock] = field(default_factory=list)        # held by the request
    local_hit_blocks: list[KVBlock] = field(default_factory=list)
    remote_copy_bytes: list[tuple[str, int]] = field(default_factory=list)

    @property
    def matched_blocks(self) -> int:
        return len(self.blocks)


class MemoryManager:
    """One replica's view of its pool, its (possibly shared) prefix tree,
    and the links that make cache traffic cost time."""

    def __init__(self, pool: MemoryPool, tree: Optional[RadixTree],
                 network: Network, dev_node: str, host_node: str,
                 block_size: int, nbytes_per_block: int):
        self.pool = pool
        self.tree = tree
        self.network = network
        self.dev_node = dev_node
        self.host_node = host_node
        self.block_size = block_size
        self.nbytes_per_block = nbytes_per_block
        # home nodes per pool, for shared-tree remote copies
        self._homes: dict[str, tuple[str, str]] = {pool.name: (dev_node, host_node)}
        self.stats = {"lookups": 0, "lookup_blocks": 0, "matched_blocks": 0,
                      "evicted_blocks": 0, "spilled_blocks": 0,
                      "discarded_blocks": 0, "promotions": 0,
                      "remote_copies": 0}

    def register_home(self, pool_name: str, dev_node: str, host_node: str) -> None:
        self._homes[pool_name] = (dev_node, host_node)

    # --- allocation ---

    def allocate(self, n_blocks: int) -> list[KVBlock]:
        return allocate_kv(self.pool, n_blocks, self.nbytes_per_block)

    def allocate_with_evict(self, n_blocks: int, now: int
                            ) -> tuple[list[KVBlock], EvictOutcome]:
        """Allocate, evicting cached blocks first when the tier is full."""
        need = n_blocks * self.nbytes_per_block - self.pool.device_free()
        outcome = EvictOutcome()
        if need > 0:
            outcome = self.evict(need, now)     # raises CannotSatisfy
        return self.allocate(n_blocks), outcome

    def release(self, blocks: Iterable[KVBlock]) -> int:
        """Drop one reference per block; frees uncached dead blocks.

        Returns the number of device bytes returned to the pool.
        """
        freed = 0
        for blk in blocks:
            if blk.refcount <= 0:
                raise ValueError(f"release of unpinned {blk}")
            blk.refcount -= 1
            if blk.refcount == 0 and not blk.cached:
                if blk.tier is BlockTier.DEVICE:
                    freed += blk.nbytes
                blk.pool.free(blk)
        return freed

    # --- prefix cache ---

    def prefix_match(self, token_ids: Iterable[int], now: int) -> MatchResult:
        """Longest cached prefix; pins local hits, plans remote copies.

        Remote hits (shared tree, blocks homed on another pool) are copied
        into freshly allocated local blocks; allocation may evict and may
        raise InsufficientMemory, in which case nothing is held.
        """
        res = MatchResult()
        self.stats["lookups"] += 1
        ids = tuple(token_ids)
        self.stats["lookup_blocks"] += len(ids) // self.block_size
        if self.tree is None:
            return res
        matched, blocks = self.tree.match(ids, now)
        if matched == 0:
            return res
        res.matched_tokens = matched
        remote: dict[str, int] = {}
        n_remote = 0
        for blk in blocks:
            if blk.pool is self.pool:
                blk.refcount += 1
                res.blocks.append(blk)
                res.local_hit_blocks.append(blk)
            else:
                src_dev, src_host = self._homes[blk.pool.name]
                src = src_dev if blk.tier is BlockTier.DEVICE else src_host
                remote[src] = remote.get(src, 0) + blk.nbytes
                n_remote += 1
        if n_remote:
            try:
                copies, _ = self.allocate_with_evict(n_remote, now)
            except (InsufficientMemory, CannotSatisfy):
                for blk in res.local_hit_blocks:
                    blk.refcount -= 1
                raise InsufficientMemory(
                    f"{self.pool.name}: no room for {n_remote} remote-hit copies")
            res.blocks = res.local_hit_blocks + copies
            res.remote_copy_bytes = sorted(remote.items())
            self.stats["remote_copies"] += n_remote
        self.stats["matched_blocks"] += res.matched_blocks
        return res

    def hit_load(self, result: MatchResult, now: int
                 ) -> tuple[int, list[TransferPlan]]:
        """Price moving matched blocks to where compute can see them.

        Device-tier hits occupy the device memory channel; host-tier hits
        are promoted over the host link (evicting if the device tier is
        full); remote hits ride the inter-instance route. Channels run in
        parallel, so readiness is the latest completion. Returns
        (ready_time, transfer_plans).
        """
        ready = now
        plans: list[TransferPlan] = []
        dev_bytes = sum(b.nbytes for b in result.local_hit_blocks
                        if b.tier is BlockTier.DEVICE)
        host_blocks = [b for b in result.local_hit_blocks
                       if b.tier is BlockTier.HOST]
        if dev_bytes:
            _, end = self.network.reserve_channel(self.dev_node, dev_bytes, now)
            ready = max(ready, end)
        if host_blocks:
            need = sum(b.nbytes for b in host_blocks) - self.pool.device_free()
            if need > 0:
                self.evict(need, now)   # InsufficientMemory surfaces via CannotSatisfy
            for blk in host_blocks:
                self.pool.move_to_device(blk)
                self.stats["promotions"] += 1
            nbytes = sum(b.nbytes for b in host_blocks)
            plan = self.network.p2p_transfer(self.host_node, self.dev_node,
                                             nbytes, now)
            plans.append(plan)
            ready = max(ready, plan.completion)
        for src, nbytes in result.remote_copy_bytes:
            plan = self.network.p2p_transfer(src, self.dev_node, nbytes, now)
            plans.append(plan)
            ready = max(ready, plan.completion)
        return ready, plans

    def prefix_insert(self, token_ids: Iterable[int], blocks: list[KVBlock],
                      now: int) -> list[KVBlock]:
        if self.tree is None:
            return list(blocks)
        return self.tree.insert(token_ids, blocks, now)

    # --- eviction ---

    def evict(self, bytes_needed: int, now: int) -> EvictOutcome:
        """Free at least bytes_needed device bytes from this pool's cached
        blocks, spilling to host when it fits and discarding otherwise.

        Raises CannotSatisfy when pinned blocks make the target
        unreachable; the precheck fires before any state changes except in
        the shared-tree corner where another pool's device blocks shadow
        this pool's inner nodes.
        """
        if self.tree is None:
            raise CannotSatisfy(
                f"{self.pool.name}: prefix caching off, nothing evictable")
        if self.tree.evictable_device_bytes(self.pool) < bytes_needed:
            raise CannotSatisfy(
                f"{self.pool.name}: only "
                f"{self.tree.evictable_device_bytes(self.pool)}B evictable, "
                f"{bytes_needed}B needed")
        outcome = EvictOutcome()
        while outcome.freed_device_bytes < bytes_needed:
            frontier = self.tree.evict_frontier(self.pool)
            if not frontier:
                raise CannotSatisfy(
                    f"{self.pool.name}: eviction frontier exhausted at "
                    f"{outcome.freed_device_bytes}B of {bytes_needed}B")
            victim = min(frontier, key=lambda n: (n.last_access, n.node_id))
            node_bytes = sum(b.nbytes for b in victim.blocks)
            if self.pool.host_free() >= node_bytes:
                for blk in victim.blocks:
                    self.pool.move_to_host(blk)
                    outcome.spilled.append(blk)
                outcome.spill_plans.append(self.network.p2p_transfer(
                    self.dev_node, self.host_node, node_bytes, now))
                self.stats["spilled_blocks"] += len(victim.blocks)
            else:
                for blk in self.tree._subtree_blocks(victim):
                    blk.cached = False
                    if blk.refcount == 0:
                        blk.pool.free(blk)
                    outcome.discarded.append(blk)
                self.stats["discarded_blocks"] += len(victim.blocks)
                self.tree.prune(victim)
            outcome.freed_device_bytes += node_bytes
            self.stats["evicted_blocks"] += len(victim.blocks)
        return outcome
