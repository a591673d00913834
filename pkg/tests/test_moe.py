from __future__ import annotations

import numpy as np
import pytest

from servesim.errors import ParseError, TraceExhausted
from servesim.moe import (
    ExpertAssignment,
    ExpertPlacement,
    OffloadPolicy,
    RoutingTrace,
    TraceReplayGate,
    UniformGate,
    ZipfGate,
    moe_layer_time,
    offload_fetch,
    route_tokens,
)
from servesim.network import CollectiveKind, Network, Topology, transfer_us
from servesim.perf import LatencyResolver, Phase
from servesim.rng import moe_stream_id, philox_stream

from conftest import MOE_COEFFS, affine_latency, affine_table

MiB = 1 << 20


def expert_resolver():
    table = affine_table(expert_count=8, top_k=2, expert_weight_bytes=MiB)
    return LatencyResolver(table)


def expert_cost(count: int, phase="prefill") -> int:
    return affine_latency(MOE_COEFFS, "ExpertFFN", phase, count, 0)


def make_net(ep, *, fabric_bw=32e9, host_bw=32e9):
    topo = Topology()
    devs = [f"d{i}" for i in range(ep)]
    for i, a in enumerate(devs):
        for b in devs[i + 1:]:
            topo.add_link(a, b, fabric_bw)
        topo.add_link(a, "host", host_bw)
    return Network(topo), devs


# --- routing ---

def test_every_token_gets_exactly_top_k_distinct_experts():
    gen = philox_stream(7, moe_stream_id(0, 0, 0))
    asg = route_tokens(0, 500, expert_count=8, top_k=3, gate=UniformGate(),
                       gen=gen)
    assert asg.token_experts.shape == (500, 3)
    for row in asg.token_experts:
        assert len(set(int(e) for e in row)) == 3
    assert asg.counts.sum() == 1500
    assert asg.n_tokens == 500


def test_uniform_routing_is_balanced_within_3_sigma():
    gen = philox_stream(42, moe_stream_id(0, 0, 5))
    n, e, k = 10_000, 8, 2
    asg = route_tokens(5, n, e, k, UniformGate(), gen=gen)
    expected = n * k / e
    sigma = np.sqrt(n * (k / e) * (1 - k / e))
    for count in asg.counts:
        assert abs(count - expected) <= 3 * sigma


def test_zipf_skews_toward_low_ids_and_flattens_as_s_drops():
    gen = philox_stream(1, 0)
    hot = route_tokens(0, 4000, 8, 1, ZipfGate(s=1.5), gen=gen)
    assert hot.counts[0] > 2 * hot.counts[4]
    gen = philox_stream(1, 1)
    n, e, k = 10_000, 8, 2
    flat = route_tokens(0, n, e, k, ZipfGate(s=1e-9), gen=gen)
    sigma = np.sqrt(n * (k / e) * (1 - k / e))
    for count in flat.counts:
        assert abs(count - n * k / e) <= 3 * sigma


def test_routing_is_reproducible_per_stream():
    a = route_tokens(0, 50, 8, 2, UniformGate(), gen=philox_stream(9, 123))
    b = route_tokens(0, 50, 8, 2, UniformGate(), gen=philox_stream(9, 123))
    c = route_tokens(0, 50, 8, 2, UniformGate(), gen=philox_stream(9, 124))
    assert np.array_equal(a.token_experts, b.token_experts)
    assert not np.array_equal(a.token_experts, c.token_experts)


def test_moe_stream_ids_never_collide():
    seen = set()
    for ii in range(4):
        for ri in range(4):
            for layer in range(64):
                seen.add(moe_stream_id(ii, ri, layer))
    assert len(seen) == 4 * 4 * 64


def test_route_tokens_validates_top_k():
    with pytest.raises(ValueError):
        route_tokens(0, 1, 4, 5, UniformGate(), gen=philox_stream(1, 1))
    with pytest.raises(ValueError):
        route_tokens(0, 1, 4, 0, UniformGate(), gen=philox_stream(1, 1))


def test_trace_replay_round_trip(tmp_path):
    path = tmp_path / "route.csv"
    path.write_text(
        "# layer,token_index,experts\n"
        "0,0,1,3\n"
        "0,1,2,0\n"
        "1,0,7,6\n",
        encoding="utf-8")
    trace = RoutingTrace(str(path))
    asg = route_tokens(0, 2, 8, 2, TraceReplayGate(str(path)), trace=trace)
    assert asg.token_experts.tolist() == [[1, 3], [2, 0]]
    asg1 = route_tokens(1, 1, 8, 2, TraceReplayGate(str(path)), trace=trace)
    assert asg1.token_experts.tolist() == [[7, 6]]
    with pytest.raises(TraceExhausted):
        route_tokens(0, 1, 8, 2, TraceReplayGate(str(path)), trace=trace)


def test_trace_rejects_duplicates_and_gaps(tmp_path):
    bad_dup = tmp_path / "dup.csv"
    bad_dup.write_text("0,0,3,3\n", encoding="utf-8")
    with pytest.raises(ParseError):
        RoutingTrace(str(bad_dup))
    bad_gap = tmp_path / "gap.csv"
    bad_gap.write_text("0,1,1,2\n", encoding="utf-8")
    with pytest.raises(ParseError):
        RoutingTrace(str(bad_gap))


def test_placement_rejects_out_of_range_offloads():
    with pytest.raises(ValueError):
        ExpertPlacement(expert_count=4, offloaded=frozenset({4}))
    place = ExpertPlacement(expert_count=4, ep_degree=2)
    assert [place.device_of(e) for e in range(4)] == [0, 1, 0, 1]


# --- layer pricing ---

def balanced_assignment(n_per_expert, experts, expert_count=None):
    counts = np.zeros(expert_count or max(experts) + 1, dtype=np.int64)
    rows = []
    for e in experts:
        counts[e] = n_per_expert
        rows.extend([[e]] * n_per_expert)
    return ExpertAssignment(0, np.array(rows, dtype=np.int64), counts)


def test_balanced_ep2_layer_is_a2a_plus_compute_plus_a2a():
    net, devs = make_net(2)
    place = ExpertPlacement(expert_count=2, ep_degree=2)
    asg = balanced_assignment(6, [0, 1])    # 6 tokens on each device
    cost = moe_layer_time(
        asg, place, expert_resolver(), Phase.PREFILL, 1, net, devs, "host",
        hidden_size=1024, dtype_bytes=2, expert_weight_bytes=0,
        layer_start=0, prev_layer_start=0)
    bytes_per_node = (12 * 1 * 1024 * 2 + 1) // 2
    a2a = net.collective_time(CollectiveKind.ALL_TO_ALL, devs, bytes_per_node)
    L = expert_cost(6)
    assert cost.dispatch_us == a2a and cost.ret_us == a2a
    assert cost.compute_us == L
    assert cost.stall_us == 0
    assert cost.latency_us == a2a + L + a2a
    assert cost.a2a_events == 2


def test_straggler_device_sets_layer_compute():
    net, devs = make_net(2)
    place = ExpertPlacement(expert_count=4, ep_degree=2)
    counts = np.array([9, 1, 9, 1])     # device 0 hosts experts 0 and 2
    rows = [[0]] * 9 + [[1]] + [[2]] * 9 + [[3]]
    asg = ExpertAssignment(0, np.array(rows, dtype=np.int64), counts)
    cost = moe_layer_time(
        asg, place, expert_resolver(), Phase.PREFILL, 1, net, devs, "host",
        hidden_size=64, dtype_bytes=2, expert_weight_bytes=0,
        layer_start=0, prev_layer_start=0)
    assert cost.compute_us == 2 * expert_cost(9)       # slow device wins
    assert cost.compute_us > 2 * expert_cost(1)        # idle-ish device loses


def test_ep1_layer_has_no_collectives():
    net, devs = make_net(1)
    place = ExpertPlacement(expert_count=4, ep_degree=1)
    asg = balanced_assignment(3, [0, 2])
    cost = moe_layer_time(
        asg, place, expert_resolver(), Phase.DECODE, 1, net, devs, "host",
        hidden_size=64, dtype_bytes=2, expert_weight_bytes=0,
        layer_start=0, prev_layer_start=0)
    assert cost.dispatch_us == 0 and cost.ret_us == 0 and cost.a2a_events == 0
    assert cost.compute_us == 2 * expert_cost(3, "decode")
    assert cost.latency_us == cost.compute_us


def test_empty_assignment_prices_to_zero():
    net, devs = make_net(2)
    place = ExpertPlacement(expert_count=4, ep_degree=2)
    asg = route_tokens(0, 0, 4, 2, UniformGate(), gen=philox_stream(1, 1))
    cost = moe_layer_time(
        asg, place, expert_resolver(), Phase.PREFILL, 1, net, devs, "host",
        hidden_size=64, dtype_bytes=2, expert_weight_bytes=MiB,
        layer_start=0, prev_layer_start=0)
    assert cost.latency_us == 0 and cost.a2a_events == 0


# --- offload ---

def test_on_demand_fetch_of_256mib_stalls_8389us():
    net, devs = make_net(1)
    place = ExpertPlacement(expert_count=2, ep_degree=1,
                            offloaded=frozenset({1}),
                            offload_policy=OffloadPolicy.ON_DEMAND)
    plans, stall = offload_fetch([1], place, 256 * MiB, net, "host",
                                 lambda r: devs[r], fetch_start=1000,
                                 compute_ready=1000)
    assert stall == 8389
    assert plans[0].completion == 1000 + 8389


def test_prefetch_with_a_wide_enough_window_stalls_zero():
    net, devs = make_net(1)
    place = ExpertPlacement(expert_count=2, ep_degree=1,
                            offloaded=frozenset({1}),
                            offload_policy=OffloadPolicy.PREFETCH)
    transfer = transfer_us(256 * MiB, 32e9)
    plans, stall = offload_fetch([1], place, 256 * MiB, net, "host",
                                 lambda r: devs[r],
                                 fetch_start=1000 - transfer,
                                 compute_ready=1000)
    assert stall == 0


def test_fetches_serialize_on_the_shared_host_link():
    net, devs = make_net(1)
    place = ExpertPlacement(expert_count=4, ep_degree=1,
                            offloaded=frozenset({1, 2, 3}))
    one = transfer_us(64 * MiB, 32e9)
    plans, stall = offload_fetch([1, 2, 3], place, 64 * MiB, net, "host",
                                 lambda r: devs[r], fetch_start=0,
                                 compute_ready=0)
    assert [p.completion for p in plans] == [one, 2 * one, 3 * one]
    assert stall == 3 * one


def test_only_offloaded_experts_with_tokens_are_fetched():
    net, devs = make_net(1)
    place = ExpertPlacement(expert_count=4, ep_degree=1,
                            offloaded=frozenset({2, 3}),
                            offload_policy=OffloadPolicy.ON_DEMAND)
    asg = balanced_assignment(2, [0, 2], expert_count=4)    # expert 3 idle
    cost = moe_layer_time(
        asg, place, expert_resolver(), Phase.PREFILL, 1, net, devs, "host",
        hidden_size=64, dtype_bytes=2, expert_weight_bytes=MiB,
        layer_start=0, prev_layer_start=0)
    assert len(cost.fetch_plans) == 1
    assert cost.stall_us == transfer_us(MiB, 32e9)
    assert cost.latency_us == cost.stall_us + cost.compute_us


def test_prefetch_anchors_at_previous_layer_start():
    def run(policy, prev_start):
        net, devs = make_net(1)
        place = ExpertPlacement(expert_count=2, ep_degree=1,
                                offloaded=frozenset({0}),
                                offload_policy=policy)
        asg = balanced_assignment(1, [0])
        return moe_layer_time(
            asg, place, expert_resolver(), Phase.DECODE, 1, net, devs, "host",
            hidden_size=64, dtype_bytes=2, expert_weight_bytes=32 * MiB,
            layer_start=500, prev_layer_start=prev_start)

    fetch = transfer_us(32 * MiB, 32e9)
    od = run(OffloadPolicy.ON_DEMAND, 200)
    assert od.stall_us == fetch
    pf = run(OffloadPolicy.PREFETCH, 200)
    assert pf.stall_us == max(0, fetch - 300)
    pf_aligned = run(OffloadPolicy.PREFETCH, 500)   # zero-width window
    assert pf_aligned.stall_us == od.stall_us
