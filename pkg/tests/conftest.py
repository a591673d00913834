"""Shared builders for the test suite.

Most tests price work against affine synthetic tables: each operator's
latency is `alpha + beta*batch + gamma*context` with integer
coefficients, and entries are stored only at the grid corners. Piecewise
linear interpolation (and linear extrapolation) reproduces an affine
function exactly, so table lookups equal the closed form at every
integer point and hand computations stay exact.
"""

from __future__ import annotations

from typing import Optional

from servesim.config import SimConfig, parse_config
from servesim.metrics import Report
from servesim.perf import ModelMeta, PerfKey, PerfTable, Phase
from servesim.simulation import Simulation
from servesim.workload import WorkloadRecord

BATCH_CORNERS = (1, 8192)
CTX_CORNERS = (0, 8192)

DENSE_COEFFS = {
    "Attention": {"prefill": (5, 1, 0), "decode": (4, 1, 0)},
    "FFN": {"prefill": (7, 1, 0), "decode": (6, 1, 0)},
    "Norm": {"prefill": (1, 0, 0), "decode": (1, 0, 0)},
    "Embedding": {"prefill": (2, 0, 0), "decode": (1, 0, 0)},
    "LMHead": {"prefill": (3, 0, 0), "decode": (2, 0, 0)},
}

MOE_COEFFS = dict(DENSE_COEFFS, **{
    "ExpertFFN": {"prefill": (3, 1, 0), "decode": (2, 1, 0)},
})
MOE_COEFFS.pop("FFN")


def affine_latency(coeffs, op: str, phase: str, batch: int, context: int) -> int:
    alpha, beta, gamma = coeffs[op][phase]
    return max(1, alpha + beta * batch + gamma * context)


def affine_table(model_id: str = "toy", hw_id: str = "hw", *,
                 layer_count: int = 2, hidden_size: int = 64,
                 kvptpl: int = 256, dtype_bytes: int = 2,
                 expert_count: int = 0, top_k: int = 0,
                 expert_weight_bytes: int = 0,
                 coeffs=None, tp_degrees=(1,)) -> PerfTable:
    if coeffs is None:
        coeffs = MOE_COEFFS if expert_count else DENSE_COEFFS
    meta = ModelMeta(model_id=model_id, layer_count=layer_count,
                     hidden_size=hidden_size,
                     kv_bytes_per_token_per_layer=kvptpl,
                     dtype_bytes=dtype_bytes, expert_count=expert_count,
                     top_k=top_k, expert_weight_bytes=expert_weight_bytes)
    entries: dict[PerfKey, int] = {}
    for op, phases in coeffs.items():
        for phase_name in phases:
            phase = Phase(phase_name)
            for tp in tp_degrees:
                for b in BATCH_CORNERS:
                    for c in CTX_CORNERS:
                        entries[PerfKey(model_id, hw_id, op, phase, b, c, tp)] = \
                            affine_latency(coeffs, op, phase_name, b, c)
    return PerfTable(model_id, hw_id, meta, entries)


def iteration_cost(coeffs, phase: str, batch: int, context: int,
                   layer_count: int) -> int:
    """Closed-form single-phase iteration latency for tp=1 affine tables."""
    per_layer = sum(affine_latency(coeffs, op, phase, batch, context)
                    for op in coeffs
                    if op not in ("Embedding", "LMHead", "ExpertFFN"))
    once = sum(affine_latency(coeffs, op, phase, batch, context)
               for op in ("Embedding", "LMHead") if op in coeffs)
    return once + layer_count * per_layer


def one_instance_cfg(*, model_id: str = "toy", hw_id: str = "hw",
                     block_size: int = 16, device_capacity: int = 1 << 30,
                     host_capacity: int = 0,
                     memory_bandwidth: float = 1.0e12,
                     host_link_bandwidth: float = 64.0e9,
                     tp: int = 1, pp: int = 1, dp: int = 1, ep: int = 1,
                     scheduler: Optional[dict] = None,
                     moe: Optional[dict] = None,
                     prefix_caching: bool = False,
                     seed: int = 1, **top) -> SimConfig:
    inst = {
        "instance_id": "i0", "model_id": model_id, "hw_id": hw_id,
        "tp": tp, "pp": pp, "dp": dp, "ep": ep,
        "memory": {
            "device_capacity": device_capacity,
            "host_capacity": host_capacity,
            "memory_bandwidth": memory_bandwidth,
            "host_link_bandwidth": host_link_bandwidth,
        },
    }
    if scheduler:
        inst["scheduler"] = scheduler
    if moe:
        inst["moe"] = moe
    raw = {"schema": "servesim.config.v1", "seed": seed,
           "block_size": block_size, "prefix_caching": prefix_caching,
           "instances": [inst]}
    raw.update(top)
    return parse_config(raw)


def recs(*tuples) -> list[WorkloadRecord]:
    """(rid, arrival, input, output[, token_ids]) -> records."""
    out = []
    for t in tuples:
        rid, arrival, inp, outp = t[:4]
        ids = tuple(t[4]) if len(t) > 4 else None
        out.append(WorkloadRecord(rid, inp, outp, arrival_time_us=arrival,
                                  token_ids=ids))
    return out


def run_sim(cfg: SimConfig, table: PerfTable, records, **runkw):
    key = f"{cfg.instances[0].model_id}@{cfg.instances[0].hw_id}"
    sim = Simulation(cfg, {key: table}, records)
    report = sim.run(**runkw)
    return report, sim


def token_times(report: Report) -> dict[str, list[int]]:
    return {row["request_id"]: [int(t) for t in row["token_times_us"].split()]
            for row in report.rows}


def random_equivalence_case(rng):
    """Draw one single-instance dense scenario for sim-vs-oracle comparison.

    Returns (cfg, table, records, oracle_kwargs, label). Capacity always
    admits the largest request alone, so runs finish; preemption and
    queueing still occur whenever two requests cannot coexist.
    """
    from servesim.memory import block_nbytes

    def pick(seq):
        return seq[int(rng.integers(len(seq)))]

    block = pick((4, 8, 16))
    layers = int(rng.integers(1, 4))
    coeffs = {
        op: {phase: (int(rng.integers(1, 9)), int(rng.integers(0, 3)),
                     int(rng.integers(0, 2)))
             for phase in ("prefill", "decode")}
        for op in DENSE_COEFFS
    }
    table = affine_table(layer_count=layers, coeffs=coeffs)
    n_req = int(rng.integers(1, 11))
    reqs = []
    for k in range(n_req):
        reqs.append((f"r{k}", int(rng.integers(0, 3001)),
                     int(rng.integers(1, 41)), int(rng.integers(1, 9))))
    nb = block_nbytes(block, table.meta.kv_bytes_per_token_per_layer,
                      layers, 1)
    worst = max(-(-(i + o) // block) for _, _, i, o in reqs)
    cap_blocks = worst + int(rng.integers(0, 4))
    sched = {
        "prefill_chunk": pick((4, 16, 512)),
        "max_batch_tokens": pick((16, 64, 8192)),
        "max_batch_seqs": pick((1, 2, 256)),
        "policy": pick(("fifo", "decode_priority")),
    }
    cfg = one_instance_cfg(block_size=block,
                           device_capacity=cap_blocks * nb,
                           scheduler=sched)
    records = recs(*reqs)
    oracle_kwargs = dict(block_size=block, device_capacity=cap_blocks * nb,
                         nbytes_per_block=nb,
                         max_batch_tokens=sched["max_batch_tokens"],
                         max_batch_seqs=sched["max_batch_seqs"],
                         prefill_chunk=sched["prefill_chunk"],
                         policy=sched["policy"])
    label = (f"B={block} L={layers} n={n_req} cap={cap_blocks} "
             f"sched={sched}")
    return cfg, table, [(r, a, i, o) for r, a, i, o in reqs], records, \
        oracle_kwargs, label


def dump_trace(table: PerfTable, dirpath, name: str = "trace.csv") -> str:
    """Persist an in-memory table as a loadable trace CSV plus sidecar."""
    import json
    from servesim.perf import meta_sidecar_path

    header = "model_id,hw_id,op_kind,phase,batch,context,tp_degree,latency_us"
    rows = [
        f"{k.model_id},{k.hw_id},{k.op_kind},{k.phase.value},"
        f"{k.batch},{k.context},{k.tp_degree},{lat}"
        for k, lat in sorted(
            table.entries.items(),
            key=lambda kv: (kv[0].op_kind, kv[0].phase.value, kv[0].batch,
                            kv[0].context, kv[0].tp_degree))
    ]
    path = dirpath / name
    path.write_text("\n".join([header] + rows) + "\n", encoding="utf-8")
    meta = table.meta
    sidecar = {
        "schema": "servesim.model_meta.v1",
        "model_id": meta.model_id,
        "layer_count": meta.layer_count,
        "hidden_size": meta.hidden_size,
        "kv_bytes_per_token_per_layer": meta.kv_bytes_per_token_per_layer,
        "dtype_bytes": meta.dtype_bytes,
    }
    if meta.expert_count:
        sidecar.update(expert_count=meta.expert_count, top_k=meta.top_k,
                       expert_weight_bytes=meta.expert_weight_bytes)
    (dirpath / meta_sidecar_path(name)).write_text(json.dumps(sidecar),
                                                   encoding="utf-8")
    return str(path)
