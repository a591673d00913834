"""Counter-based random streams.

Every stochastic draw in the simulator comes from a Philox generator keyed
by (run seed, stream id), so any component can be replayed in isolation and
two runs with the same seed are bit-for-bit identical regardless of module
evaluation order.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

# fixed stream ids; MoE gate streams start above this band
STREAM_ARRIVALS = 1
STREAM_MOE_BASE = 1 << 20


def philox_stream(seed: int, stream: int) -> np.random.Generator:
    key = np.array([seed & _MASK64, stream & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def moe_stream_id(instance_index: int, replica_index: int, layer: int) -> int:
    return STREAM_MOE_BASE + (((instance_index << 8) | replica_index) << 16) + layer
