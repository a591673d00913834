"""layerprof: measure per-operator latencies of toy transformer models and
emit trace files a latency-table consumer can load directly."""

from .device import CPUAdapter, DeviceAdapter, PassTiming, ScriptedAdapter, \
    get_adapter
from .errors import CoverageGap, DeviceUnavailable, OOMAtGridPoint, \
    PlanError, ProfilerError
from .models import REGISTRY, ModelSpec, ToyModel, build_model
from .plan import ProfilePlan, batch_buckets, context_buckets
from .profile import ProfileResult, run_profile, trace_paths, write_trace
from .validate import ValidationReport, read_trace, validate_trace

__all__ = [
    "CPUAdapter", "DeviceAdapter", "PassTiming", "ScriptedAdapter",
    "get_adapter", "CoverageGap", "DeviceUnavailable", "OOMAtGridPoint",
    "PlanError", "ProfilerError", "REGISTRY", "ModelSpec", "ToyModel",
    "build_model", "ProfilePlan", "batch_buckets", "context_buckets",
    "ProfileResult", "run_profile", "trace_paths", "write_trace",
    "ValidationReport", "read_trace", "validate_trace",
]
