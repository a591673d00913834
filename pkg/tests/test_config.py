"""Config parsing: defaults, dotted error paths, and cross-field checks."""

import copy
import json

import pytest

from servesim.config import CONFIG_SCHEMA, load_config, parse_config
from servesim.errors import CrossRefError, SchemaError


def minimal_raw(**extra):
    raw = {
        "schema": CONFIG_SCHEMA,
        "instances": [
            {
                "instance_id": "i0",
                "model_id": "toy",
                "hw_id": "hw",
                "memory": {"device_capacity": 1 << 20},
            }
        ],
    }
    raw.update(extra)
    return raw


def test_defaults_fill_in():
    cfg = parse_config(minimal_raw())
    assert cfg.seed == 42
    assert cfg.block_size == 16
    assert cfg.prefix_caching is False
    assert cfg.router_policy == "round_robin"
    assert cfg.pd.kv_transfer == "full_blocking"
    assert cfg.livelock_cap == 100_000_000
    assert cfg.interconnect_bandwidth == 300.0e9
    spec = cfg.instances[0]
    assert (spec.tp, spec.pp, spec.dp, spec.ep) == (1, 1, 1, 1)
    assert spec.role == "unified"
    assert spec.scheduler.max_batch_tokens == 8192
    assert spec.scheduler.prefill_chunk == 512
    assert spec.scheduler.policy == "fifo"
    assert spec.memory.memory_bandwidth == 1.0e12
    assert spec.memory.host_link_bandwidth == 64.0e9
    assert spec.topology.kind == "fully_connected"
    assert spec.moe is None
    assert cfg.echo["schema"] == CONFIG_SCHEMA


def test_schema_tag_is_mandatory():
    raw = minimal_raw()
    raw["schema"] = "something.else"
    with pytest.raises(SchemaError, match="schema: expected"):
        parse_config(raw)


@pytest.mark.parametrize("mutate, path", [
    (lambda r: r.__setitem__("seed", -1), r"seed: must be >= 0"),
    (lambda r: r.__setitem__("seed", "x"), r"seed: expected an integer"),
    (lambda r: r.__setitem__("block_size", 0), r"block_size: must be >= 1"),
    (lambda r: r.__setitem__("prefix_caching", "yes"),
     r"prefix_caching: expected true or false"),
    (lambda r: r.__setitem__("router", {"policy": "best_effort"}),
     r"router\.policy: expected one of"),
    (lambda r: r.__setitem__("arrival", {"rate_per_s": 0}),
     r"arrival\.rate_per_s: must be positive"),
    (lambda r: r["instances"][0].__delitem__("memory"),
     r"instances\[0\]\.memory: required"),
    (lambda r: r["instances"][0]["memory"].__setitem__("device_capacity", 0),
     r"instances\[0\]\.memory\.device_capacity: must be >= 1"),
    (lambda r: r["instances"][0].__setitem__("role", "hybrid"),
     r"instances\[0\]\.role: expected one of"),
    (lambda r: r["instances"][0].__setitem__(
        "scheduler", {"policy": "sjf"}),
     r"instances\[0\]\.scheduler\.policy: expected one of"),
    (lambda r: r["instances"][0].__setitem__(
        "moe", {"gate": "oracle"}),
     r"instances\[0\]\.moe\.gate: expected one of"),
    (lambda r: r["instances"][0].__setitem__(
        "moe", {"offloaded_experts": [1, -2]}),
     r"offloaded_experts: expected a list of non-negative"),
    (lambda r: r["instances"][0].__setitem__(
        "moe", {"gate": "trace_replay"}),
     r"trace_path: required for trace_replay"),
    (lambda r: r.__setitem__("pd", {"pairing": "static"}),
     r"pd\.static_pairs: required for static pairing"),
    (lambda r: r.__setitem__("instances", []),
     r"instances: expected a non-empty list"),
    (lambda r: r.__setitem__("traces", {"noseparator": "t.csv"}),
     r"traces\.noseparator: key must look like"),
])
def test_schema_errors_name_the_field(mutate, path):
    raw = minimal_raw()
    mutate(raw)
    with pytest.raises(SchemaError, match=path):
        parse_config(raw)


@pytest.mark.parametrize("mutate, where", [
    (lambda r: r.__setitem__("colour", "red"), r"config: unknown field"),
    (lambda r: r["instances"][0].__setitem__("speed", 9),
     r"instances\[0\]: unknown field"),
    (lambda r: r["instances"][0]["memory"].__setitem__("swap", 1),
     r"instances\[0\]\.memory: unknown field"),
    (lambda r: r.__setitem__("router", {"policy": "round_robin", "x": 1}),
     r"router: unknown field"),
])
def test_unknown_fields_rejected_at_every_level(mutate, where):
    raw = minimal_raw()
    mutate(raw)
    with pytest.raises(SchemaError, match=where):
        parse_config(raw)


def test_expert_parallelism_bounded_by_device_count():
    raw = minimal_raw()
    raw["instances"][0].update(tp=2, pp=1, ep=4)
    with pytest.raises(SchemaError, match=r"instances\[0\]\.ep"):
        parse_config(raw)
    raw["instances"][0].update(tp=2, pp=2, ep=4)
    cfg = parse_config(raw)
    assert cfg.instances[0].ep == 4


def test_duplicate_instance_ids_rejected():
    raw = minimal_raw()
    raw["instances"].append(copy.deepcopy(raw["instances"][0]))
    with pytest.raises(SchemaError, match="duplicate instance_id"):
        parse_config(raw)


def pd_raw(roles):
    raw = minimal_raw()
    raw["instances"] = []
    for i, role in enumerate(roles):
        raw["instances"].append({
            "instance_id": f"i{i}", "model_id": "toy", "hw_id": "hw",
            "role": role, "memory": {"device_capacity": 1 << 20},
        })
    return raw


def test_prefill_without_decode_is_a_cross_ref_error():
    with pytest.raises(CrossRefError, match="no decode instance"):
        parse_config(pd_raw(["prefill", "unified"]))
    with pytest.raises(CrossRefError, match="nothing prefills"):
        parse_config(pd_raw(["decode", "unified"]))
    parse_config(pd_raw(["prefill", "decode"]))  # balanced pair is fine


def test_static_pairs_must_name_real_roles():
    raw = pd_raw(["prefill", "decode"])
    raw["pd"] = {"pairing": "static", "static_pairs": {"ghost": "i1"}}
    with pytest.raises(CrossRefError, match="unknown instance 'ghost'"):
        parse_config(raw)
    raw["pd"]["static_pairs"] = {"i1": "i0"}
    with pytest.raises(CrossRefError, match="is decode, not prefill"):
        parse_config(raw)
    raw["pd"]["static_pairs"] = {"i0": "i0"}
    with pytest.raises(CrossRefError, match="is prefill, not decode"):
        parse_config(raw)
    raw["pd"]["static_pairs"] = {"i0": "i1"}
    assert parse_config(raw).pd.static_pairs == {"i0": "i1"}


def test_traces_must_cover_every_instance_pair():
    raw = minimal_raw(traces={"other@hw": "t.csv"})
    with pytest.raises(CrossRefError, match="needs a perf trace for 'toy@hw'"):
        parse_config(raw)


def test_relative_paths_resolve_against_base_dir():
    raw = minimal_raw(traces={"toy@hw": "traces/t.csv"}, workload="wl.csv")
    cfg = parse_config(raw, base_dir="/data/run7")
    assert cfg.traces["toy@hw"] == "/data/run7/traces/t.csv"
    assert cfg.workload == "/data/run7/wl.csv"
    raw = minimal_raw(traces={"toy@hw": "/abs/t.csv"})
    assert parse_config(raw, base_dir="/x").traces["toy@hw"] == "/abs/t.csv"


def test_echo_round_trips_through_json():
    raw = minimal_raw()
    raw["instances"][0]["moe"] = {"gate": "zipf", "zipf_s": 1.2,
                                  "offloaded_experts": [3, 1, 3]}
    cfg = parse_config(raw)
    echoed = json.loads(json.dumps(cfg.echo))
    assert echoed["instances"][0]["moe"]["offloaded_experts"] == [1, 3]
    assert echoed["instances"][0]["moe"]["gate"] == "zipf"
    assert echoed["pd"]["kv_transfer"] == "full_blocking"


def test_load_config_reports_file_problems(tmp_path):
    with pytest.raises(SchemaError, match="not found"):
        load_config(str(tmp_path / "missing.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    with pytest.raises(SchemaError, match="invalid JSON"):
        load_config(str(bad))
    good = tmp_path / "good.json"
    raw = minimal_raw(workload="wl.csv")
    good.write_text(json.dumps(raw), encoding="utf-8")
    cfg = load_config(str(good))
    assert cfg.workload == str(tmp_path / "wl.csv")
