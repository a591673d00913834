"""Device adapters: the only porting surface.

The profiler never touches clocks, synchronization, or memory limits
directly. Everything hardware-specific goes through a DeviceAdapter:

* ``time_pass(steps, ...)`` runs one forward pass given as an ordered list
  of per-operator callables and returns per-op durations plus the
  end-to-end total measured around the whole pass.
* ``ensure_fits(...)`` raises OOMAtGridPoint before any allocation happens
  so an oversized grid point becomes a recorded gap, not a crash.

CPUAdapter is the real implementation for this host. ScriptedAdapter
replaces the clock with a deterministic script; tests use it to pin
aggregation arithmetic exactly, and it doubles as the reference for what a
port to a new device has to provide.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .errors import DeviceUnavailable, OOMAtGridPoint

# op step: (op_kind, layer_idx, thunk). layer_idx is -1 for per-iteration
# ops (Embedding, LMHead) and >= 0 for per-layer ops.
OpStep = tuple[str, int, Callable[[], None]]


@dataclass
class PassTiming:
    """Timing of one forward pass: per-op segments plus the true total."""
    per_op: list[tuple[str, int, float]]    # (op_kind, layer_idx, microseconds)
    total_us: float


class DeviceAdapter:
    """Base adapter. Subclasses override the three hardware touchpoints."""

    name = "abstract"

    def synchronize(self) -> None:
        """Wait for outstanding device work. No-op on synchronous devices."""

    def ensure_fits(self, *, phase: str, batch: int, context: int,
                    tp_degree: int, elements: int) -> None:
        """Raise OOMAtGridPoint when `elements` exceeds the device budget."""

    def time_pass(self, steps: Iterable[OpStep], *, phase: str, batch: int,
                  context: int, tp_degree: int, rep: int) -> PassTiming:
        raise NotImplementedError


class CPUAdapter(DeviceAdapter):
    """Wall-clock timing on the host CPU.

    Per-op durations come from monotonic stamps taken between steps, so
    within a single pass they telescope to the end-to-end total exactly.
    """

    name = "cpu"

    def __init__(self, element_budget: int = 1 << 27):
        # ~128M tensor elements; generous for toy models, small enough that
        # a runaway grid point fails fast instead of swapping.
        self.element_budget = element_budget

    def ensure_fits(self, *, phase: str, batch: int, context: int,
                    tp_degree: int, elements: int) -> None:
        if elements > self.element_budget:
            raise OOMAtGridPoint(
                f"grid point needs ~{elements} elements, budget is "
                f"{self.element_budget}", phase, batch, context, tp_degree)

    def time_pass(self, steps, *, phase, batch, context, tp_degree, rep):
        self.synchronize()
        stamps = [time.perf_counter_ns()]
        kinds: list[tuple[str, int]] = []
        for op_kind, layer_idx, thunk in steps:
            thunk()
            self.synchronize()
            stamps.append(time.perf_counter_ns())
            kinds.append((op_kind, layer_idx))
        per_op = [(op, layer, (stamps[i + 1] - stamps[i]) / 1e3)
                  for i, (op, layer) in enumerate(kinds)]
        total = (stamps[-1] - stamps[0]) / 1e3
        return PassTiming(per_op, total)


class ScriptedAdapter(DeviceAdapter):
    """Virtual clock driven by a user script.

    ``script(op_kind, layer_idx, phase, batch, context, tp_degree, rep)``
    returns the duration in microseconds for that op in that repetition.
    Op thunks are not executed, so runs are instant and fully
    deterministic: the pass total is the sum of the scripted segments by
    construction, which is exactly the property validation arithmetic is
    tested against.
    """

    name = "scripted"

    def __init__(self, script: Callable[..., float],
                 element_budget: int | None = None):
        self.script = script
        self.element_budget = element_budget

    def ensure_fits(self, *, phase, batch, context, tp_degree, elements):
        if self.element_budget is not None and elements > self.element_budget:
            raise OOMAtGridPoint(
                f"grid point needs ~{elements} elements, budget is "
                f"{self.element_budget}", phase, batch, context, tp_degree)

    def time_pass(self, steps, *, phase, batch, context, tp_degree, rep):
        per_op = []
        for op_kind, layer_idx, _thunk in steps:
            us = float(self.script(op_kind, layer_idx, phase, batch, context,
                                   tp_degree, rep))
            per_op.append((op_kind, layer_idx, us))
        return PassTiming(per_op, sum(us for _, _, us in per_op))


def get_adapter(hw_id: str) -> DeviceAdapter:
    """Map a hardware id to a live adapter or raise DeviceUnavailable."""
    if hw_id == "cpu":
        return CPUAdapter()
    if hw_id == "cuda":
        try:
            import torch
            if torch.cuda.is_available():
                raise DeviceUnavailable(
                    "cuda adapter not implemented yet; port DeviceAdapter "
                    "(see ScriptedAdapter for the required surface)")
        except ImportError:
            pass
        raise DeviceUnavailable("no CUDA device on this host")
    raise DeviceUnavailable(f"unknown hardware id {hw_id!r}; known: cpu")
