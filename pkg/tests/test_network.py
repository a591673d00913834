from __future__ import annotations

import pytest

from servesim.errors import Unreachable
from servesim.network import (
    CollectiveKind,
    Link,
    Network,
    Topology,
    collective_time,
    connect_fully,
    connect_host_bridge,
    connect_ring,
    round_half_up,
    transfer_us,
)

MiB = 1 << 20


def test_round_half_up_at_the_boundary():
    assert round_half_up(2.4) == 2
    assert round_half_up(2.5) == 3
    assert round_half_up(2.6) == 3
    assert round_half_up(0.0) == 0


def test_transfer_duration_64mib_over_32gbps_is_2097us():
    assert transfer_us(64 * MiB, 32e9) == 2097


def test_transfer_duration_frozen_points():
    assert transfer_us(1 * MiB, 32e9) == 33
    assert transfer_us(2 * MiB, 32e9) == 66
    assert transfer_us(128 * MiB, 32e9) == 4194
    assert transfer_us(256 * MiB, 32e9) == 8389
    assert transfer_us(8 * MiB, 936e9) == 9


def test_transfer_zero_bytes_costs_only_base_latency():
    assert transfer_us(0, 32e9) == 0
    assert transfer_us(0, 32e9, base_latency_us=4) == 4
    assert transfer_us(-5, 32e9, base_latency_us=4) == 4


def test_link_reservations_serialize_equal_transfers():
    link = Link("a", "b", 32e9)
    d = transfer_us(1 * MiB, 32e9)
    first = link.reserve(0, d)
    second = link.reserve(0, d)
    assert first == (0, 33)
    assert second == (33, 66)
    assert second[1] == 2 * first[1]


def test_link_reserve_takes_first_fitting_gap():
    link = Link("a", "b", 1e9)
    link.reserve(10, 10)                 # [10, 20)
    assert link.reserve(0, 5) == (0, 5)  # fits before the existing window
    assert link.reserve(0, 15) == (20, 35)
    assert link.reservations == [(0, 5), (10, 20), (20, 35)]


def test_link_reserve_zero_duration_is_instant_and_free():
    link = Link("a", "b", 1e9)
    link.reserve(0, 50)
    assert link.reserve(10, 0) == (10, 10)
    assert link.reservations == [(0, 50)]


def test_link_reserve_allows_retroactive_windows():
    link = Link("a", "b", 1e9)
    assert link.reserve(-30, 10) == (-30, -20)


def test_add_link_replaces_same_pair_and_normalizes_direction():
    topo = Topology()
    topo.add_link("b", "a", 1e9)
    topo.add_link("a", "b", 7e9)
    link = topo.link_between("b", "a")
    assert link is topo.link_between("a", "b")
    assert link.bandwidth == 7e9
    assert len(topo.links) == 1


def test_route_min_hop_with_lowest_id_tiebreak():
    topo = Topology()
    for a, b in [("a", "b"), ("a", "c"), ("b", "d"), ("c", "d")]:
        topo.add_link(a, b, 1e9)
    assert topo.route("a", "d") == ["a", "b", "d"]
    assert topo.route("a", "a") == ["a"]


def test_self_loops_carry_no_routes():
    topo = Topology()
    topo.add_link("a", "a", 1e9)
    topo.add_link("b", "b", 1e9)
    assert topo.neighbors("a") == []
    with pytest.raises(Unreachable):
        topo.route("a", "b")


def test_store_and_forward_two_hops_doubles_completion():
    topo = Topology()
    topo.add_link("a", "b", 32e9)
    topo.add_link("b", "c", 32e9)
    net = Network(topo)
    plan = net.p2p_transfer("a", "c", 1 * MiB, earliest=0)
    assert [s.link_key for s in plan.segments] == [("a", "b"), ("b", "c")]
    assert plan.segments[0].end == 33
    assert plan.segments[1].start == 33
    assert plan.completion == 66


def test_p2p_base_latency_charged_per_hop():
    topo = Topology()
    topo.add_link("a", "b", 32e9, base_latency_us=2)
    topo.add_link("b", "c", 32e9, base_latency_us=2)
    net = Network(topo)
    plan = net.p2p_transfer("a", "c", 1 * MiB, earliest=0)
    assert plan.completion == 2 * (33 + 2)


def test_p2p_rejects_identical_endpoints():
    topo = Topology()
    topo.add_link("a", "b", 1e9)
    with pytest.raises(ValueError):
        Network(topo).p2p_transfer("a", "a", 10, 0)


def test_memory_channel_reservation_needs_self_loop():
    topo = Topology()
    topo.add_link("d0", "d0", 936e9)
    net = Network(topo)
    assert net.reserve_channel("d0", 8 * MiB, 100) == (100, 109)
    with pytest.raises(Unreachable):
        net.reserve_channel("ghost", 1, 0)


def test_alltoall_4_nodes_4mib_over_32gbps_is_98us():
    topo = Topology()
    nodes = [f"d{i}" for i in range(4)]
    connect_fully(topo, nodes, 32e9)
    assert collective_time(topo, CollectiveKind.ALL_TO_ALL, nodes, 4 * MiB) == 98


def test_allreduce_2_nodes_1mib_over_32gbps_is_33us():
    topo = Topology()
    connect_fully(topo, ["d0", "d1"], 32e9)
    assert collective_time(topo, CollectiveKind.ALL_REDUCE, ["d0", "d1"], 1 * MiB) == 33


def test_allgather_scales_with_group_size_minus_one():
    topo = Topology()
    nodes = [f"d{i}" for i in range(4)]
    connect_fully(topo, nodes, 32e9)
    got = collective_time(topo, CollectiveKind.ALL_GATHER, nodes, 1 * MiB)
    assert got == transfer_us(3 * MiB, 32e9)


def test_collective_degenerate_cases_cost_zero():
    topo = Topology()
    connect_fully(topo, ["a", "b"], 1e9)
    assert collective_time(topo, CollectiveKind.ALL_TO_ALL, ["a"], 4 * MiB) == 0
    assert collective_time(topo, CollectiveKind.ALL_REDUCE, ["a", "b"], 0) == 0


def test_collective_bottleneck_uses_slowest_link_and_max_base():
    topo = Topology()
    topo.add_link("a", "b", 64e9, base_latency_us=1)
    topo.add_link("b", "c", 32e9, base_latency_us=5)
    topo.add_link("a", "c", 64e9, base_latency_us=1)
    got = collective_time(topo, CollectiveKind.ALL_TO_ALL, ["a", "b", "c"], 3 * MiB)
    assert got == 5 + round_half_up((3 * MiB) * (2 / 3) * 1e6 / 32e9)


def test_collective_over_host_bridge_routes_through_star():
    topo = Topology()
    connect_host_bridge(topo, ["d0", "d1"], "host", 32e9)
    got = collective_time(topo, CollectiveKind.ALL_REDUCE, ["d0", "d1"], 1 * MiB)
    assert got == 33


def test_collective_unreachable_participants_raise():
    topo = Topology()
    topo.add_link("a", "b", 1e9)
    topo.add_node("z")
    with pytest.raises(Unreachable):
        collective_time(topo, CollectiveKind.ALL_TO_ALL, ["a", "z"], 1 * MiB)


def test_ring_builder_wraps_and_handles_singletons():
    topo = Topology()
    connect_ring(topo, ["a", "b", "c"], 1e9)
    assert len(topo.links) == 3
    solo = Topology()
    connect_ring(solo, ["a"], 1e9)
    assert solo.nodes == {"a"} and not solo.links


def test_collectives_reserve_nothing():
    topo = Topology()
    connect_fully(topo, ["a", "b"], 32e9)
    collective_time(topo, CollectiveKind.ALL_REDUCE, ["a", "b"], 1 * MiB)
    assert topo.link_between("a", "b").reservations == []
