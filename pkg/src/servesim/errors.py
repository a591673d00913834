"""Exception types shared across the simulator.

Every error raised on a contract boundary derives from SimError so the CLI
can map failures onto stable exit codes.
"""

from __future__ import annotations


class SimError(Exception):
    """Base class for simulator errors."""


# --- sim kernel ---

class SchedulingInPast(SimError):
    """An event was scheduled earlier than the current clock."""


class LivelockGuard(SimError):
    """Too many events dispatched without the clock advancing."""


# --- file formats ---

class ParseError(SimError):
    """Malformed input file; message carries file and line context."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        loc = ""
        if path is not None:
            loc = f"{path}: "
        if line is not None:
            loc += f"line {line}: "
        super().__init__(f"{loc}{message}")
        self.path = path
        self.line = line


class DuplicateKey(ParseError):
    """Two rows with identical key fields."""


class EmptyTable(ParseError):
    """A table file parsed successfully but held zero data rows."""


class DuplicateId(ParseError):
    """Two workload records share a request id."""


class TokenCountMismatch(ParseError):
    """Sidecar token ids disagree with a record's input_len."""


# --- perf model ---

class NoDataForOperator(SimError):
    """No table entries share the categorical key fields of a lookup."""


# --- network model ---

class Unreachable(SimError):
    """No route between endpoints, or collective participants disconnected."""


# --- memory model ---

class InsufficientMemory(SimError):
    """An allocation or promotion does not fit the device tier."""


class CannotSatisfy(SimError):
    """Eviction cannot free the requested bytes (everything left is pinned)."""


# --- instance ---

class RoleMismatch(SimError):
    """A request reached an instance whose role cannot serve its phase."""


class Deadlock(SimError):
    """A request can never fit in memory; progress is impossible."""


# --- router ---

class NoEligibleInstance(SimError):
    """No instance can serve a request's model/phase."""


# --- moe ---

class TraceExhausted(SimError):
    """A routing trace ended before the workload did."""


# --- metrics ---

class UnknownRequest(SimError):
    """A token was recorded for an unregistered or finished request."""


class NonMonotoneTime(SimError):
    """A recorded timestamp went backwards for a request."""


class IncompleteRun(SimError):
    """finalize() was called while requests were still unfinished."""

    def __init__(self, unfinished: list[str]):
        super().__init__(
            "run ended with unfinished requests: " + ", ".join(sorted(unfinished))
        )
        self.unfinished = list(unfinished)


# --- config ---

class SchemaError(SimError):
    """Config value of the wrong shape; message names the offending field."""


class CrossRefError(SimError):
    """Config is well-formed but internally inconsistent."""
