"""Deterministic discrete-event kernel.

The clock is a single integer microsecond counter. Events are dispatched in
(time, priority, insertion id) order, so replaying the same schedule yields
bit-for-bit identical traces. Priorities exist to fix intra-tick ordering:
transfer completions run before batch formation at the same timestamp, which
makes freed memory and link bandwidth visible to the scheduler within the
tick that released them.

Quick start::

    eng = Engine()
    eng.schedule(10, EventKind.CUSTOM, handler=lambda ev: None, note="hello")
    status, now = eng.run_until()     # -> (DrainStatus.DRAINED, 10)
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Optional

from .errors import LivelockGuard, SchedulingInPast


class EventKind(Enum):
    REQUEST_ARRIVAL = "RequestArrival"
    BATCH_START = "BatchStart"
    BATCH_COMPLETE = "BatchComplete"
    TRANSFER_START = "TransferStart"
    TRANSFER_COMPLETE = "TransferComplete"
    RESOURCE_FREE = "ResourceFree"
    CUSTOM = "Custom"


# Intra-tick dispatch order. Completions and releases run before arrivals,
# and batch formation runs last, so one tick settles in a fixed sequence:
# finish work, free resources, accept new requests, then schedule.
DEFAULT_PRIORITY = {
    EventKind.TRANSFER_COMPLETE: 0,
    EventKind.RESOURCE_FREE: 1,
    EventKind.BATCH_COMPLETE: 2,
    EventKind.REQUEST_ARRIVAL: 3,
    EventKind.TRANSFER_START: 4,
    EventKind.BATCH_START: 5,
    EventKind.CUSTOM: 6,
}


class DrainStatus(Enum):
    DRAINED = "Drained"
    DEADLINE_REACHED = "DeadlineReached"


@dataclass
class Event:
    """One scheduled occurrence. `note` is the payload summary for the log."""

    id: int
    time: int
    kind: EventKind
    priority: int
    handler: Optional[Callable[["Event"], None]] = None
    payload: Any = None
    note: str = ""

    def sort_key(self) -> tuple[int, int, int]:
        return (self.time, self.priority, self.id)


class Engine:
    """Event queue plus clock.

    Args:
        livelock_cap: maximum number of consecutive dispatches allowed
            without the clock advancing before LivelockGuard fires.
        log_sink: optional callable receiving one formatted line per
            dispatched event (``"{time_us} {kind} {note}"``).
    """

    def __init__(self, livelock_cap: int = 100_000_000,
                 log_sink: Optional[Callable[[str], None]] = None):
        if livelock_cap < 0:
            raise ValueError("livelock_cap must be non-negative")
        self._heap: list[tuple[tuple[int, int, int], Event]] = []
        self._now = 0
        self._next_id = 0
        self._livelock_cap = livelock_cap
        self._same_time_streak = 0
        self._log_sink = log_sink
        self.scheduled_count = 0
        self.dispatched_count = 0

    @property
    def now(self) -> int:
        return self._now

    def pending(self) -> int:
        return len(self._heap)

    def schedule(self, time: int, kind: EventKind,
                 handler: Optional[Callable[[Event], None]] = None,
                 payload: Any = None, note: str = "",
                 priority: Optional[int] = None) -> int:
        """Insert an event; returns its id. Ids are strictly increasing."""
        time = int(time)
        if time < self._now:
            raise SchedulingInPast(
                f"cannot schedule {kind.value} at {time} (clock is {self._now})"
            )
        if priority is None:
            priority = DEFAULT_PRIORITY[kind]
        ev = Event(self._next_id, time, kind, priority, handler, payload, note)
        self._next_id += 1
        self.scheduled_count += 1
        heapq.heappush(self._heap, (ev.sort_key(), ev))
        return ev.id

    def run_until(self, deadline: Optional[int] = None) -> tuple[DrainStatus, int]:
        """Dispatch events until the queue drains or the deadline passes.

        The clock only advances when an event is dispatched; on
        DEADLINE_REACHED it reads the time of the last dispatched event,
        and at least one event with time > deadline remains queued.
        """
        while self._heap:
            key, ev = self._heap[0]
            if deadline is not None and ev.time > deadline:
                return (DrainStatus.DEADLINE_REACHED, self._now)
            heapq.heappop(self._heap)
            if ev.time == self._now and self.dispatched_count > 0:
                self._same_time_streak += 1
                if self._same_time_streak > self._livelock_cap:
                    raise LivelockGuard(
                        f"{self._same_time_streak} events dispatched at t={self._now} "
                        f"without the clock advancing (cap {self._livelock_cap}); "
                        f"last event: {ev.kind.value} {ev.note!r}"
                    )
            else:
                self._same_time_streak = 0
            self._now = ev.time
            self.dispatched_count += 1
            if self._log_sink is not None:
                self._log_sink(f"{ev.time} {ev.kind.value} {ev.note}")
            if ev.handler is not None:
                ev.handler(ev)
        return (DrainStatus.DRAINED, self._now)
