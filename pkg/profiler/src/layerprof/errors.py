"""Error types raised by the profiler."""


class ProfilerError(Exception):
    """Base class for everything this package raises on purpose."""


class PlanError(ProfilerError):
    """A profile plan violates an invariant (empty grid, too few reps...)."""


class DeviceUnavailable(ProfilerError):
    """The requested hardware id has no usable adapter on this host."""


class OOMAtGridPoint(ProfilerError):
    """One grid point does not fit on the device.

    Profiling catches this, records the point as a gap, and keeps going;
    it must never surface as a fake latency value.
    """

    def __init__(self, message: str, phase: str, batch: int, context: int,
                 tp_degree: int):
        super().__init__(message)
        self.phase = phase
        self.batch = batch
        self.context = context
        self.tp_degree = tp_degree


class CoverageGap(ProfilerError):
    """Validation asked for a shape the trace never profiled."""
