"""Profile plans: what to measure and how often.

A plan is the cartesian grid (phase x batch x context x tp_degree) plus
repetition policy. Grids must be non-empty, repetitions at least 3 (a
median needs a middle), warmup at least 1 (first call pays allocator and
code-path setup costs that steady state never sees).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

from .errors import PlanError

PHASES = ("prefill", "decode")


def context_buckets(max_context: int) -> list[int]:
    """Default context grid: 0 plus powers of two up to max_context."""
    if max_context < 0:
        raise PlanError("max_context must be >= 0")
    buckets = [0]
    c = 1
    while c <= max_context:
        buckets.append(c)
        c *= 2
    return buckets


def batch_buckets(max_batch: int) -> list[int]:
    """Default batch grid: powers of two up to max_batch."""
    if max_batch < 1:
        raise PlanError("max_batch must be >= 1")
    buckets = []
    b = 1
    while b <= max_batch:
        buckets.append(b)
        b *= 2
    return buckets


@dataclass
class ProfilePlan:
    model_id: str
    hw_id: str
    phases: tuple[str, ...]
    batches: tuple[int, ...]
    contexts: tuple[int, ...]
    tp_degrees: tuple[int, ...] = (1,)
    warmup: int = 3
    repetitions: int = 10
    aggregation: str = "median"

    def __post_init__(self):
        self.phases = tuple(self.phases)
        self.batches = tuple(self.batches)
        self.contexts = tuple(self.contexts)
        self.tp_degrees = tuple(self.tp_degrees)
        if not self.model_id or not self.hw_id:
            raise PlanError("model_id and hw_id must be non-empty")
        for name, grid in (("phases", self.phases), ("batches", self.batches),
                           ("contexts", self.contexts),
                           ("tp_degrees", self.tp_degrees)):
            if not grid:
                raise PlanError(f"{name} grid must be non-empty")
        for ph in self.phases:
            if ph not in PHASES:
                raise PlanError(f"phase must be prefill|decode, got {ph!r}")
        if any(b < 1 for b in self.batches):
            raise PlanError("batch values must be >= 1")
        if any(c < 0 for c in self.contexts):
            raise PlanError("context values must be >= 0")
        if any(tp < 1 for tp in self.tp_degrees):
            raise PlanError("tp_degree values must be >= 1")
        if len(set(self.batches)) != len(self.batches) \
                or len(set(self.contexts)) != len(self.contexts) \
                or len(set(self.tp_degrees)) != len(self.tp_degrees):
            raise PlanError("grid values must be unique")
        if self.repetitions < 3:
            raise PlanError("repetitions must be >= 3")
        if self.warmup < 1:
            raise PlanError("warmup must be >= 1")
        if self.aggregation != "median":
            raise PlanError(
                f"aggregation must be 'median', got {self.aggregation!r}")

    def grid(self) -> Iterator[tuple[str, int, int, int]]:
        """Yield (phase, batch, context, tp_degree) points in stable order."""
        for phase in self.phases:
            for tp in self.tp_degrees:
                for batch in self.batches:
                    for context in self.contexts:
                        yield phase, batch, context, tp

    def grid_size(self) -> int:
        return (len(self.phases) * len(self.batches) * len(self.contexts)
                * len(self.tp_degrees))
