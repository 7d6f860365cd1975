from __future__ import annotations

import json
import math
import random
import statistics

import pytest
from hypothesis import given, strategies as st

from geochord.errors import QueueOverflow, UnrecoverableFrame
from geochord.geokey import GeoPoint
from geochord.nettest import ChurnSchedule, LinkModel, SimConfig, fec_decode, fec_encode, frame_delivery_probability, link_latency, parse_config
from geochord.nettest.baselines import FlatChord, XorOverlay, evenly_spaced_ids
from geochord.nettest.config import config_from_mapping, load_config
from geochord.nettest.sim import Simulator, poisson, uniform_positions

RNG = random.Random(0)


# --- link model -----------------------------------------------------------------


def test_same_point_has_zero_latency():
    assert link_latency(GeoPoint(3, 4), GeoPoint(3, 4), LinkModel(), RNG) == 0.0


def test_latency_is_distance_over_unit_velocity():
    assert link_latency(GeoPoint(100, 100), GeoPoint(160, 180), LinkModel(), RNG) == pytest.approx(100.0)


def test_quadrant_multiplier_halves_latency():
    a, b = GeoPoint(100, 100), GeoPoint(160, 180)
    fast = LinkModel(velocity_grid=((2.0, 1.0), (1.0, 1.0)))
    assert link_latency(a, b, fast, RNG) == pytest.approx(50.0)
    # The same segment in an unaffected quadrant keeps full latency.
    assert link_latency(GeoPoint(600, 600), GeoPoint(660, 680), fast, RNG) == pytest.approx(100.0)


def test_jitter_is_bounded_and_zero_jitter_is_exact():
    m = LinkModel(jitter=5.0)
    a, b = GeoPoint(0, 0), GeoPoint(30, 40)
    for _ in range(200):
        assert 50.0 <= link_latency(a, b, m, RNG) < 55.0
    assert {link_latency(a, b, LinkModel(), random.Random(i)) for i in range(5)} == {50.0}


def test_link_model_validation():
    with pytest.raises(ValueError):
        LinkModel(velocity_grid=((1.0, 2.0),))
    with pytest.raises(ValueError):
        LinkModel(base_velocity=0.0)
    with pytest.raises(ValueError):
        LinkModel(jitter=-1.0)


# --- FEC ------------------------------------------------------------------------


def test_single_shard_frame_duplicates_into_parity():
    f = fec_encode(b"hello", 1)
    assert f.shards[0] == f.shards[1]
    assert fec_decode([f.shard(0)]) == b"hello"
    assert fec_decode([f.shard(1)]) == b"hello"


def test_dropping_parity_is_plain_reassembly():
    payload = bytes(range(37))
    f = fec_encode(payload, 4)
    assert fec_decode(f.all_shards()[:4]) == payload


def test_lost_data_shard_is_the_xor_of_survivors():
    rng = random.Random(5)
    for _ in range(50):
        payload = rng.randbytes(rng.randrange(1, 200))
        f = fec_encode(payload, 4)
        acc = bytearray(len(f.shards[0]))
        for i in (0, 1, 3, 4):
            acc = bytearray(x ^ y for x, y in zip(acc, f.shards[i]))
        assert bytes(acc) == f.shards[2]
        assert fec_decode([f.shard(i) for i in (0, 1, 3, 4)]) == payload


@given(st.binary(max_size=300), st.integers(1, 16), st.data())
def test_any_single_loss_round_trips(payload, k, data):
    f = fec_encode(payload, k)
    drop = data.draw(st.integers(0, k))
    kept = [s for s in f.all_shards() if s.index != drop]
    data.draw(st.randoms()).shuffle(kept)
    assert fec_decode(kept) == payload


def test_two_missing_shards_are_unrecoverable():
    f = fec_encode(b"abcdefgh", 4)
    with pytest.raises(UnrecoverableFrame):
        fec_decode([f.shard(i) for i in (0, 1, 4)])
    with pytest.raises(UnrecoverableFrame):
        fec_decode([])


def test_shards_of_different_frames_do_not_mix():
    a, b = fec_encode(b"aaaa", 2, frame_id=1), fec_encode(b"bbbb", 2, frame_id=2)
    with pytest.raises(ValueError):
        fec_decode([a.shard(0), b.shard(1)])


def test_encode_rejects_zero_shards():
    with pytest.raises(ValueError):
        fec_encode(b"x", 0)


def test_delivery_probability_formula():
    loss = 0.05
    assert frame_delivery_probability(4, loss) == pytest.approx((1 - loss) ** 5 + 5 * loss * (1 - loss) ** 4)
    assert frame_delivery_probability(4, 0.05) == pytest.approx(0.977, abs=5e-4)
    assert frame_delivery_probability(3, 0.0) == 1.0


# --- simulator --------------------------------------------------------------------


def two_node_sim(**kw) -> Simulator:
    return Simulator(SimConfig(nodes=2, seed=1, **kw))


def test_empty_queue_runs_to_nothing():
    sim = two_node_sim()
    assert sim.run() == {}
    assert sim.now == 0.0


def test_one_message_arrives_after_the_link_latency():
    sim = two_node_sim()
    a, b = sim.overlay.directory.keys
    seen = []
    sim.handlers["probe"] = lambda dst, src, payload, meta: seen.append((sim.now, dst, src, payload))
    sim.send(a, b, b"ping", kind="probe")
    metrics = sim.run()
    lat = sim.link.base(sim.overlay.nodes[a].id.position, sim.overlay.nodes[b].id.position)
    assert seen == [(lat, b, a, b"ping")]
    assert metrics["frames_delivered"] == 1 and metrics["messages"] == 1


def test_events_run_in_time_then_sequence_order():
    sim = Simulator(SimConfig(nodes=2, seed=1), trace=True)
    order = []
    for delay in (5.0, 1.0, 5.0, 3.0, 1.0):
        sim.schedule(delay, "timer", fn=lambda s, d=delay: order.append((s.now, d)))
    sim.run()
    assert [t for t, _ in order] == [1.0, 1.0, 3.0, 5.0, 5.0]
    seqs = [row[:2] for row in sim.trace]
    assert seqs == sorted(seqs, key=lambda r: (float(r[0]), r[1]))
    assert all(t == d for t, d in order)
    with pytest.raises(ValueError):
        sim.schedule(-1.0, "timer", fn=lambda s: None)


def test_run_until_leaves_later_events_queued():
    sim = two_node_sim()
    sim.schedule(10.0, "timer", fn=lambda s: None)
    sim.run(until=4.0)
    assert sim.pending() == 1 and sim.now == 4.0


def test_queue_overflow():
    sim = two_node_sim(queue_cap=3)
    a, b = sim.overlay.directory.keys
    with pytest.raises(QueueOverflow):
        sim.send(a, b, b"x" * 16, k_shards=4)


def _traffic(sim, n, seed):
    rng = random.Random(seed)
    keys = sim.overlay.directory.keys
    for _ in range(n):
        a, b = rng.sample(keys, 2)
        sim.send(a, b, rng.randbytes(12))
    return sim.run()


def test_same_seed_replays_byte_for_byte():
    cfg = SimConfig(nodes=20, seed=9, loss=0.2, jitter=3.0)
    runs = []
    for _ in range(2):
        sim = Simulator(cfg, trace=True)
        m = _traffic(sim, 200, 4)
        runs.append((json.dumps(m), sim.trace_csv()))
    assert runs[0] == runs[1]
    assert runs[0][1].count("\n") > 200


def test_lossless_and_total_loss():
    sim = Simulator(SimConfig(nodes=10, seed=2, loss=0.0))
    assert _traffic(sim, 100, 1)["frames_delivered"] == 100
    sim = Simulator(SimConfig(nodes=10, seed=2, loss=1.0))
    assert _traffic(sim, 100, 1).get("frames_delivered", 0) == 0


def test_frame_delivery_rate_matches_the_binomial_prediction():
    sim = Simulator(SimConfig(nodes=10, seed=3, loss=0.05, fec_shards=4))
    m = _traffic(sim, 10_000, 2)
    assert m["frames_delivered"] / 10_000 == pytest.approx(frame_delivery_probability(4, 0.05), abs=0.01)


def test_shards_to_a_dead_node_are_dropped():
    sim = Simulator(SimConfig(nodes=4, seed=2))
    a, b = sim.overlay.directory.keys[:2]
    sim.send(a, b, b"late")
    sim.overlay.nodes[b].alive = False
    m = sim.run()
    assert m.get("frames_delivered", 0) == 0 and m["shards_dropped"] == 5


def test_poisson_sampler_mean_and_variance():
    rng = random.Random(7)
    for lam in (0.0, 0.7, 3.5, 120.0):
        xs = [poisson(rng, lam) for _ in range(4000)]
        assert statistics.fmean(xs) == pytest.approx(lam, abs=max(0.05, 4 * math.sqrt(lam / 4000)))
        if lam:
            assert statistics.pvariance(xs) == pytest.approx(lam, rel=0.15)


def test_uniform_positions_stay_inside_the_region():
    pts = uniform_positions(500, 10.0, random.Random(1))
    assert all(0 <= p.x < 10 and 0 <= p.y < 10 for p in pts)


# --- broadcast --------------------------------------------------------------------


@pytest.mark.parametrize("n, messages", [(1, 0), (2, 1)])
def test_tiny_broadcasts(n, messages):
    sim = Simulator(SimConfig(nodes=n, seed=1))
    res = sim.broadcast(sim.overlay.directory.keys[0])
    assert res.messages == messages and res.reached == n


@pytest.mark.parametrize("n, seed", [(16, 1), (16, 2), (40, 3), (100, 4)])
def test_broadcast_reaches_everyone_exactly_once(n, seed):
    sim = Simulator(SimConfig(nodes=n, seed=seed, height=3))
    for src in sim.overlay.directory.keys[:4]:
        res = sim.broadcast(src)
        assert set(res.receipts) == set(sim.overlay.directory.keys)
        assert all(c == 1 for c in res.receipts.values()) and res.duplicates == 0
        assert n - 1 <= res.messages <= n * math.ceil(math.log2(n))
    if n == 16:
        assert res.reached == 16 and 15 <= res.messages <= 64


# --- churn ------------------------------------------------------------------------


def test_zero_rates_change_nothing():
    sim = Simulator(SimConfig(nodes=32, seed=1))
    before = list(sim.overlay.directory.keys)
    dumps = {n.key: n.table.dump() for n in sim.overlay.live()}
    assert sim.churn_step(ChurnSchedule()) == {"joined": 0, "join_failed": 0, "left": 0, "failed": 0}
    assert sim.overlay.directory.keys == before
    assert {n.key: n.table.dump() for n in sim.overlay.live()} == dumps


def test_failing_ten_percent_leaves_the_exact_survivor_count():
    sim = Simulator(SimConfig(nodes=50, seed=1))
    victims = sim.fail_fraction(0.1)
    assert len(victims) == 5 and len(sim.overlay) == 45
    assert not set(victims) & set(sim.overlay.directory.keys)


def test_join_fail_equilibrium_holds_the_population():
    sim = Simulator(SimConfig(nodes=256, seed=4, churn=ChurnSchedule(join=1.0, fail=1.0)))
    for _ in range(100):
        sim.epoch_step()
    assert 0.8 * 256 <= len(sim.overlay) <= 1.2 * 256
    assert sim.metrics["joined"] > 50 and sim.metrics["failed"] > 50
    assert sim.overlay.successor_ring() == sorted(sim.overlay.directory.keys)


def test_churn_schedule_validation():
    with pytest.raises(ValueError):
        ChurnSchedule(join=-1.0)
    with pytest.raises(ValueError):
        ChurnSchedule(fail=math.inf)
    assert ChurnSchedule().idle and not ChurnSchedule(leave=0.1).idle


# --- baselines --------------------------------------------------------------------


def test_flat_chord_worst_case_is_log_n_at_sixteen():
    pts = uniform_positions(16, 1000.0, random.Random(1))
    ids = evenly_spaced_ids(16, 32)
    net = FlatChord(pts, LinkModel(), ids=ids)
    worst = 0
    for a in ids:
        for b in ids:
            p = net.route(a, b)
            assert p.hops[-1].key.value == b
            worst = max(worst, p.hop_count)
    assert worst == 4


def test_flat_chord_single_node_path_when_source_owns_target():
    pts = uniform_positions(8, 1000.0, random.Random(1))
    net = FlatChord(pts, LinkModel())
    v = net.keys[3]
    p = net.route(v, v)
    assert p.hop_count == 0 and p.total_latency == 0.0
    assert net.route(v, (net.keys[2] + 1)).hop_count == 0


def test_flat_chord_reaches_the_owner_of_random_keys():
    net = FlatChord(uniform_positions(64, 1000.0, random.Random(2)), LinkModel())
    rng = random.Random(3)
    for _ in range(300):
        t = rng.randrange(1 << 32)
        assert net.route(rng.choice(net.keys), t).hops[-1].key.value == net.owner(t)


def test_xor_baseline_mean_hops_within_log_n():
    net = XorOverlay(uniform_positions(256, 1000.0, random.Random(4)), LinkModel(), seed=4)
    rng = random.Random(5)
    hops = []
    for _ in range(1000):
        a, b = rng.sample(net.keys, 2)
        p = net.route(a, b)
        assert p.hops[-1].key.value == b
        hops.append(p.hop_count)
    assert statistics.fmean(hops) <= math.log2(256)
    v = net.keys[0]
    assert net.route(v, v).hop_count == 0


def test_baselines_reject_duplicate_ids():
    with pytest.raises(ValueError):
        FlatChord(uniform_positions(2, 10.0, random.Random(0)), LinkModel(side=10.0), ids=[5, 5])


# --- configuration ----------------------------------------------------------------


def test_key_value_config():
    cfg = parse_config(
        """
        # two-level net
        seed = 3
        nodes = 128
        height = 2
        loss = 0.05   # per shard
        velocity_grid = 1,2;1,1
        churn.fail = 0.5
        """
    )
    assert (cfg.seed, cfg.nodes, cfg.height, cfg.loss) == (3, 128, 2, 0.05)
    assert cfg.velocity_grid == ((1.0, 2.0), (1.0, 1.0))
    assert cfg.churn == ChurnSchedule(fail=0.5)


def test_json_config_and_round_trip(tmp_path):
    cfg = parse_config('{"nodes": 16, "k": 4, "churn": {"join": 2}}')
    assert cfg.nodes == 16 and cfg.k == 4 and cfg.churn.join == 2.0
    again = config_from_mapping(cfg.to_dict())
    assert again == cfg
    path = tmp_path / "net.cfg"
    path.write_text("nodes = 9\n")
    assert load_config(path).nodes == 9


@pytest.mark.parametrize("text", ["colour = blue", "nodes = 0", "loss = 1.5", "velocity_grid = 1,2", "k = 1"])
def test_bad_configs_are_rejected(text):
    with pytest.raises(ValueError):
        parse_config(text)
