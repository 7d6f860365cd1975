from __future__ import annotations

import itertools
import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from geochord.dht import (
    AdjacencyMatrix,
    Directory,
    FingerEntry,
    NodeId,
    build_routing_table,
    candidates,
    fail,
    finger_bound,
    join,
    leave,
    level_capacity,
    shared_levels,
    stabilize,
    successor_count,
    update_adjacency,
    update_indicator,
)
from geochord.errors import DuplicateKey, RoutingStuck, TtlExceeded, UnknownNode
from geochord.geokey import GeoPoint, RingKey, ring_distance

from conftest import empty_overlay, make_overlay, uniform_points


def nid(key: int, path: str = "", bits: int = 8, x: float = 0.0) -> NodeId:
    return NodeId(RingKey(key, bits), key, GeoPoint(x, 0.0), path)


def sorted_ring(net) -> list[int]:
    return sorted(net.directory.keys)


def assert_storage_bound(net) -> None:
    c = net.config
    fb = finger_bound(c.k, c.h)
    for node in net.live():
        assert node.table.finger_count() <= fb
        assert node.table.entry_count() <= fb + c.M + net.s
        assert len(node.table.neighbors) <= c.M


# --- capacity -----------------------------------------------------------------


def test_level_capacity_matches_ceil_log2():
    for k in (2, 3, 4, 5, 8):
        for i in range(7):
            assert level_capacity(i, k) == math.ceil(math.log2(k**i) - 1e-12)


@pytest.mark.parametrize("k, h, bound", [(2, 3, 6), (2, 5, 15), (4, 2, 6), (3, 2, 2 + 4)])
def test_finger_bound_examples(k, h, bound):
    assert finger_bound(k, h) == bound


def test_successor_list_length():
    assert successor_count(1) == 3
    assert successor_count(8) == 3
    assert successor_count(1024) == 10
    assert successor_count(1000) == 10


# --- building tables ------------------------------------------------------------


def test_single_node_has_no_fingers_and_self_loops():
    net = make_overlay(1)
    node = net.live()[0]
    assert node.table.finger_count() == 0
    assert node.table.successors == []
    assert net.successor_ring() == [node.key]
    assert node.owns(12345)


def test_equidistant_neighbours_break_ties_by_key():
    d = Directory(8)
    me = nid(100)
    d.add(me)
    for v in (3, 250, 17, 99, 180, 5, 60):
        d.add(nid(v))
    table = build_routing_table(me, d, 4, 3, random.Random(0), lambda a, b: 7.0, 2, 0)
    assert [e.key for e in table.neighbors] == [3, 5, 17, 60]


def test_neighbours_are_latency_nearest(overlay64):
    net = overlay64
    for node in net.live()[:8]:
        got = [e.key for e in node.table.neighbors]
        lat = {e.key: net.latency(node.id.position, e.peer.position) for e in node.table.neighbors}
        assert got == sorted(got, key=lambda v: (lat[v], v))
        assert len(got) == net.config.M


def test_successor_lists_follow_key_order(overlay64):
    net = overlay64
    keys = sorted_ring(net)
    for i, v in enumerate(keys):
        succ = [e.key for e in net.nodes[v].table.successors]
        assert succ == [keys[(i + j) % len(keys)] for j in range(1, net.s + 1)]


def test_fingers_stay_in_sibling_clusters(overlay64):
    net = overlay64
    for node in net.live():
        path = node.id.cluster_path
        for level, bucket in enumerate(node.table.levels):
            for e in bucket:
                other = e.peer.cluster_path
                assert other[: level - 1] == path[: level - 1]
                assert other[level - 1] != path[level - 1]


def test_storage_bound_holds_at_build(overlay64):
    assert_storage_bound(overlay64)


# --- membership -----------------------------------------------------------------


def test_join_empty_then_one():
    net = empty_overlay()
    a = join(net, GeoPoint(100, 100))
    assert net.successor_ring() == [a.key]
    b = join(net, GeoPoint(900, 900))
    assert a.table.successor.key == b.key and b.table.successor.key == a.key
    assert a.table.predecessor.key.value == b.key


def test_eight_sequential_joins_form_the_sorted_ring():
    net = empty_overlay(seed=5)
    for p in uniform_points(8, seed=11):
        join(net, p)
    assert net.successor_ring() == sorted_ring(net)
    assert len(net) == 8


def test_join_rejects_duplicate_keys():
    net = empty_overlay()
    join(net, GeoPoint(5, 5))
    with pytest.raises(DuplicateKey):
        join(net, GeoPoint(5, 5))


def test_leave_two_node_network():
    net = make_overlay(2)
    a, b = net.live()
    leave(net, a.key)
    assert net.successor_ring() == [b.key]
    assert b.table.successors == [] and b.table.predecessor is None


def test_unknown_node_errors():
    net = make_overlay(4)
    with pytest.raises(UnknownNode):
        leave(net, 1)
    victim = net.live()[0].key
    fail(net, victim)
    with pytest.raises(UnknownNode):
        fail(net, victim)


def test_fail_then_stabilise_reconnects_the_ring():
    net = make_overlay(48, seed=2)
    rng = random.Random(1)
    for v in rng.sample(sorted_ring(net), 10):
        fail(net, v)
    for _ in range(3 * math.ceil(math.log2(48))):
        for node in net.live():
            stabilize(net, node)
    fresh = sorted_ring(net)
    assert net.successor_ring() == fresh
    for i, v in enumerate(fresh):
        assert net.nodes[v].table.predecessor.key.value == fresh[i - 1]


def test_fail_all_but_one():
    net = make_overlay(6)
    keys = sorted_ring(net)
    for v in keys[1:]:
        fail(net, v)
    stabilize(net, net.nodes[keys[0]])
    assert net.successor_ring() == [keys[0]]
    assert net.nodes[keys[0]].table.successors == []


def test_stabilise_is_a_fixed_point_on_a_healthy_ring(overlay64):
    net = overlay64
    before = {n.key: n.table.dump() for n in net.live()}
    for _ in range(5):
        for node in net.live():
            stabilize(net, node)
    assert {n.key: n.table.dump() for n in net.live()} == before


def test_failed_successor_is_replaced_by_the_second():
    net = make_overlay(16, seed=4)
    node = net.live()[0]
    first, second = node.table.successors[0].key, node.table.successors[1].key
    fail(net, first)
    stabilize(net, node)
    assert node.table.successor.key == second


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 1000), st.lists(st.sampled_from(["join", "leave", "fail", "stab"]), min_size=1, max_size=25))
def test_storage_bound_after_any_operation_sequence(seed, ops):
    net = make_overlay(24, seed=seed % 7)
    rng = random.Random(seed)
    for op in ops:
        if op == "join":
            try:
                join(net, GeoPoint(rng.uniform(0, 1000), rng.uniform(0, 1000)))
            except (DuplicateKey, RoutingStuck, TtlExceeded):
                # Unrepaired failures may have cut every successor of some node.
                pass
        elif op in ("leave", "fail") and len(net) > 2:
            (leave if op == "leave" else fail)(net, rng.choice(net.directory.keys))
        else:
            for node in net.live():
                stabilize(net, node)
        assert_storage_bound(net)


# --- candidates -----------------------------------------------------------------


def _entry(key, path):
    return FingerEntry(nid(key, path))


def _table(owner_key, entries, owner_path=""):
    d = Directory(8)
    me = nid(owner_key, owner_path)
    d.add(me)
    t = build_routing_table(me, d, 0, 3, random.Random(0), lambda a, b: 0.0, 2, 0)
    t.neighbors = entries
    return t


def test_candidates_empty_for_own_key():
    t = _table(10, [_entry(20, "0"), _entry(200, "1")])
    assert candidates(t, 10) == []


def test_candidates_single_successor():
    t = _table(10, [])
    t.successors = [_entry(40, "")]
    assert [e.key for e in candidates(t, 90)] == [40]


def test_candidates_crafted_order():
    # Owner 0, target 200 with path "01".
    entries = [_entry(150, "1"), _entry(190, "00"), _entry(120, "01"), _entry(180, "01"), _entry(230, "01")]
    t = _table(0, entries)
    got = [e.key for e in candidates(t, 200, "01")]
    # 230 lies past the target; 180 and 120 share two levels, 190 one, 150 none.
    assert got == [180, 120, 190, 150]


@given(
    st.lists(st.tuples(st.integers(1, 255), st.text("012", max_size=3)), min_size=1, max_size=12, unique_by=lambda t: t[0]),
    st.integers(0, 255),
    st.text("012", max_size=3),
)
def test_candidates_order_is_a_strict_total_order(entries, target, tpath):
    t = _table(0, [_entry(k, p) for k, p in entries])
    got = candidates(t, target, tpath)
    tk = RingKey(target, 8)

    def rank(e):
        return (-shared_levels(e.peer.cluster_path, tpath), ring_distance(e.peer.key, tk), e.key)

    ranks = [rank(e) for e in got]
    assert len(set(ranks)) == len(ranks)
    for a, b in itertools.combinations(range(len(got)), 2):
        assert ranks[a] < ranks[b]
    expected = {k for k, _ in entries if 0 < k <= target}
    assert {e.key for e in got} == expected


# --- indicators and adjacency ---------------------------------------------------


def test_indicator_first_sample_and_fixed_point():
    e = FingerEntry(nid(1))
    update_indicator(e, 100.0, True)
    assert e.indicators.latency_ewma == 100.0
    for _ in range(200):
        update_indicator(e, 50.0, True)
    assert e.indicators.latency_ewma == pytest.approx(50.0)
    assert e.indicators.usage_count == 201


def test_availability_alternating_settles_around_half():
    e = FingerEntry(nid(1))
    a = 1.0
    history = []
    for i in range(30):
        ok = i % 2 == 0
        update_indicator(e, 10.0 if ok else None, ok)
        a = 0.2 * ok + 0.8 * a
        history.append(e.indicators.availability)
    assert e.indicators.availability == pytest.approx(a)
    # The recurrence settles into the two-cycle {4/9, 5/9} around 0.5.
    assert history[-2] == pytest.approx(5 / 9, abs=1e-3)
    assert history[-1] == pytest.approx(4 / 9, abs=1e-3)
    assert abs((history[-1] + history[-2]) / 2 - 0.5) < 0.05


def test_adjacency_examples():
    m = AdjacencyMatrix(1)
    update_adjacency(m, "0", "1", 40.0)
    assert m.get("0", "1") == m.get("1", "0") == 40.0
    update_adjacency(m, "0", "1", 60.0)
    assert m.get("0", "1") == pytest.approx(44.0)
    update_adjacency(m, "1", "0", 60.0)
    assert m.get("0", "1") == pytest.approx(47.2)
    update_adjacency(m, "0", "0", 99.0)
    assert m.get("0", "0") == 0.0


def test_adjacency_staleness_window():
    m = AdjacencyMatrix(1)
    update_adjacency(m, "0", "1", 40.0, epoch=3)
    assert m.get("0", "1", epoch=13, window=10) == 40.0
    assert m.get("0", "1", epoch=14, window=10) is None


@given(st.lists(st.tuples(st.sampled_from("abcd"), st.sampled_from("abcd"), st.floats(0, 1e4)), max_size=40))
def test_adjacency_symmetry_and_zero_diagonal(updates):
    m = AdjacencyMatrix(2)
    for p, q, v in updates:
        update_adjacency(m, p, q, v)
    for p, q in itertools.product("abcd", repeat=2):
        assert m.get(p, q) == m.get(q, p)
        if p == q:
            assert m.get(p, q) == 0.0
        elif m.get(p, q) is not None:
            assert m.get(p, q) >= 0


def test_table_dump_format(overlay64):
    node = overlay64.live()[0]
    lines = node.table.dump().splitlines()
    assert len(lines) == node.table.entry_count()
    for line in lines:
        level, key, lat, avail, load, usage = line.split(",")
        assert len(key) == 8 and float(lat) >= 0 and 0 <= float(avail) <= 1 and int(usage) >= 0
