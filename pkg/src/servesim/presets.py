"""Built-in demo bundles: synthetic perf traces, workloads, and configs.

`write_presets(out_dir)` materializes everything needed to run the
preset configurations with no external data: six named cluster shapes
(`sd`/`sm` single-instance dense/MoE, `md`/`mm` multi-instance,
`pdd`/`pdm` disaggregated prefill/decode) plus a `_pc` variant of each
with prefix caching enabled over a prefix-heavy workload. Latencies come
from fixed affine formulas (no randomness), workloads from a fixed
generator seed, so the files are byte-identical on every invocation and
runs over them are reproducible end to end.

The two synthetic models share one fictional accelerator (`sim-gpu`):

* ``densemini``: 8 layers, hidden 1024, 4096 KV bytes per token-layer
* ``moemini``: same dims plus 8 experts, top-2 routing, 8 MiB per expert
"""

from __future__ import annotations

import json
import os
from typing import Callable

import numpy as np

from .perf import META_SCHEMA, TRACE_HEADER

DENSE_MODEL = "densemini"
MOE_MODEL = "moemini"
HW = "sim-gpu"

PREFILL_BATCHES = [1, 16, 128, 1024, 8192]
DECODE_BATCHES = [1, 8, 64, 256]
CONTEXTS = [0, 256, 1024, 8192]
TP_DEGREES = [1, 2]

# op -> phase -> (base_us, us_per_batch_unit, us_per_context_token)
_FORMULAS = {
    "Attention": {"prefill": (12.0, 0.080, 0.0040),
                  "decode": (9.0, 0.050, 0.0060)},
    "FFN":       {"prefill": (18.0, 0.100, 0.0),
                  "decode": (14.0, 0.060, 0.0)},
    "ExpertFFN": {"prefill": (6.0, 0.050, 0.0),
                  "decode": (5.0, 0.030, 0.0)},
    "Norm":      {"prefill": (2.0, 0.005, 0.0),
                  "decode": (2.0, 0.003, 0.0)},
    "Embedding": {"prefill": (3.0, 0.010, 0.0),
                  "decode": (2.0, 0.005, 0.0)},
    "LMHead":    {"prefill": (8.0, 0.020, 0.0),
                  "decode": (6.0, 0.010, 0.0)},
}

DENSE_OPS = ["Attention", "FFN", "Norm", "Embedding", "LMHead"]
MOE_OPS = ["Attention", "ExpertFFN", "Norm", "Embedding", "LMHead"]


def formula_latency(op: str, phase: str, batch: int, context: int,
                    tp: int) -> int:
    base, per_b, per_c = _FORMULAS[op][phase]
    return max(1, round(base + per_b * batch / tp + per_c * context))


def _write_trace(path: str, model_id: str, ops: list[str]) -> None:
    lines = [",".join(TRACE_HEADER)]
    for op in ops:
        for phase in ("prefill", "decode"):
            batches = PREFILL_BATCHES if phase == "prefill" else DECODE_BATCHES
            for tp in TP_DEGREES:
                for b in batches:
                    for c in CONTEXTS:
                        lat = formula_latency(op, phase, b, c, tp)
                        lines.append(f"{model_id},{HW},{op},{phase},"
                                     f"{b},{c},{tp},{lat}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _write_meta(path: str, model_id: str, moe: bool) -> None:
    meta = {
        "schema": META_SCHEMA,
        "model_id": model_id,
        "layer_count": 8,
        "hidden_size": 1024,
        "kv_bytes_per_token_per_layer": 4096,
        "dtype_bytes": 2,
    }
    if moe:
        meta.update(expert_count=8, top_k=2, expert_weight_bytes=8 << 20)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_base_workload(path: str, n: int = 100) -> None:
    gen = np.random.default_rng(2024)
    lines = ["request_id,input_len,output_len"]
    for i in range(n):
        input_len = int(gen.integers(16, 257))
        output_len = int(gen.integers(4, 33))
        lines.append(f"r{i:03d},{input_len},{output_len}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _write_prefix_workload(path: str, groups: int = 25,
                           per_group: int = 4) -> None:
    """Requests in groups of four sharing a 64-token prompt prefix."""
    gen = np.random.default_rng(4099)
    rows = []
    tokens = []
    i = 0
    for g in range(groups):
        prefix = [10_000 + 64 * g + k for k in range(64)]
        for _ in range(per_group):
            suffix_len = int(gen.integers(16, 97))
            suffix = [int(x) for x in gen.integers(1, 9999, size=suffix_len)]
            ids = prefix + suffix
            output_len = int(gen.integers(4, 17))
            rows.append(f"r{i:03d},{len(ids)},{output_len}")
            tokens.append(f"r{i:03d}: " + " ".join(str(t) for t in ids))
            i += 1
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("request_id,input_len,output_len\n")
        fh.write("\n".join(rows) + "\n")
    stem, _ = os.path.splitext(path)
    with open(stem + ".tokens", "w", encoding="utf-8") as fh:
        fh.write("\n".join(tokens) + "\n")


def _memory(device_mib: int, host_mib: int = 0) -> dict:
    out = {"device_capacity": device_mib << 20}
    if host_mib:
        out["host_capacity"] = host_mib << 20
    return out


def _base_config(workload: str, traces: dict[str, str]) -> dict:
    return {
        "schema": "servesim.config.v1",
        "seed": 42,
        "block_size": 16,
        "arrival": {"rate_per_s": 10.0},
        "traces": traces,
        "workload": workload,
    }


_DENSE_TRACES = {f"{DENSE_MODEL}@{HW}": "trace_dense.csv"}
_MOE_TRACES = {f"{MOE_MODEL}@{HW}": "trace_moe.csv"}


def _preset_sd() -> dict:
    """Single dense instance."""
    cfg = _base_config("wl_base.csv", _DENSE_TRACES)
    cfg["instances"] = [{
        "instance_id": "i0", "model_id": DENSE_MODEL, "hw_id": HW,
        "memory": _memory(256, 512),
    }]
    return cfg


def _preset_sm() -> dict:
    """Single MoE instance: tp2/ep2, skewed gate, two offloaded experts."""
    cfg = _base_config("wl_base.csv", _MOE_TRACES)
    cfg["instances"] = [{
        "instance_id": "i0", "model_id": MOE_MODEL, "hw_id": HW,
        "tp": 2, "ep": 2,
        "memory": _memory(256, 512),
        "moe": {"gate": "zipf", "zipf_s": 1.1,
                "offloaded_experts": [6, 7], "offload_policy": "on_demand"},
    }]
    return cfg


def _preset_md() -> dict:
    """Three dense instances behind a load-aware router."""
    cfg = _base_config("wl_base.csv", _DENSE_TRACES)
    cfg["router"] = {"policy": "least_tokens"}
    cfg["instances"] = [
        {"instance_id": f"i{k}", "model_id": DENSE_MODEL, "hw_id": HW,
         "memory": _memory(256, 512)}
        for k in range(3)
    ]
    return cfg


def _preset_mm() -> dict:
    """Two pipelined MoE instances with decode-priority scheduling."""
    cfg = _base_config("wl_base.csv", _MOE_TRACES)
    cfg["router"] = {"policy": "least_tokens"}
    cfg["instances"] = [
        {"instance_id": f"i{k}", "model_id": MOE_MODEL, "hw_id": HW,
         "pp": 2, "memory": _memory(256, 512),
         "scheduler": {"policy": "decode_priority"}}
        for k in range(2)
    ]
    return cfg


def _preset_pdd() -> dict:
    """Disaggregated dense pair moving KV in one blocking transfer."""
    cfg = _base_config("wl_base.csv", _DENSE_TRACES)
    cfg["pd"] = {"kv_transfer": "full_blocking", "pairing": "least_tokens"}
    cfg["instances"] = [
        {"instance_id": "p0", "role": "prefill", "model_id": DENSE_MODEL,
         "hw_id": HW, "memory": _memory(256, 512)},
        {"instance_id": "d0", "role": "decode", "model_id": DENSE_MODEL,
         "hw_id": HW, "memory": _memory(256, 512)},
    ]
    return cfg


def _preset_pdm() -> dict:
    """Disaggregated MoE pair: layer-overlapped KV, prefetched experts."""
    cfg = _base_config("wl_base.csv", _MOE_TRACES)
    cfg["pd"] = {"kv_transfer": "layerwise_overlap", "pairing": "static",
                 "static_pairs": {"p0": "d0"}}
    cfg["instances"] = [
        {"instance_id": "p0", "role": "prefill", "model_id": MOE_MODEL,
         "hw_id": HW, "tp": 2, "ep": 2, "memory": _memory(256, 512),
         "moe": {"offloaded_experts": [5, 6, 7],
                 "offload_policy": "prefetch"}},
        {"instance_id": "d0", "role": "decode", "model_id": MOE_MODEL,
         "hw_id": HW, "tp": 2, "ep": 2, "memory": _memory(256, 512),
         "moe": {"offloaded_experts": [5, 6, 7],
                 "offload_policy": "prefetch"}},
    ]
    return cfg


def _pc_variant(base: Callable[[], dict], shared: bool) -> Callable[[], dict]:
    """Same cluster, prefix caching on, prefix-heavy workload."""
    def build() -> dict:
        cfg = base()
        cfg["workload"] = "wl_prefix.csv"
        cfg["prefix_caching"] = True
        if shared:
            cfg["shared_prefix_cache"] = True
            cfg["router"] = {"policy": "prefix_aware"}
        return cfg
    return build


PRESETS: dict[str, Callable[[], dict]] = {
    "sd": _preset_sd,
    "sm": _preset_sm,
    "md": _preset_md,
    "mm": _preset_mm,
    "pdd": _preset_pdd,
    "pdm": _preset_pdm,
    "sd_pc": _pc_variant(_preset_sd, shared=False),
    "sm_pc": _pc_variant(_preset_sm, shared=False),
    "md_pc": _pc_variant(_preset_md, shared=True),
    "mm_pc": _pc_variant(_preset_mm, shared=True),
    "pdd_pc": _pc_variant(_preset_pdd, shared=False),
    "pdm_pc": _pc_variant(_preset_pdm, shared=False),
}

BASE_PRESETS = ("sd", "sm", "md", "mm", "pdd", "pdm")


def preset_names() -> list[str]:
    return sorted(PRESETS)


def write_presets(out_dir: str) -> list[str]:
    """Write traces, workloads, and all preset configs; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    def emit(name: str, writer, *args) -> str:
        path = os.path.join(out_dir, name)
        writer(path, *args)
        written.append(path)
        return path

    emit("trace_dense.csv", _write_trace, DENSE_MODEL, DENSE_OPS)
    emit("trace_dense.meta.json", _write_meta, DENSE_MODEL, False)
    emit("trace_moe.csv", _write_trace, MOE_MODEL, MOE_OPS)
    emit("trace_moe.meta.json", _write_meta, MOE_MODEL, True)
    emit("wl_base.csv", _write_base_workload)
    emit("wl_prefix.csv", _write_prefix_workload)
    written.append(os.path.join(out_dir, "wl_prefix.tokens"))
    for name in preset_names():
        path = os.path.join(out_dir, f"{name}.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(PRESETS[name](), fh, indent=2, sort_keys=True)
            fh.write("\n")
        written.append(path)
    return written
