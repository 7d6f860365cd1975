"""End-to-end acceptance suite: one test per criterion, each printing a
PASS/FAIL verdict and enforcing its runtime budget."""
from __future__ import annotations

import math
import os
import random
import subprocess
import sys
import time

import numpy as np
import pytest

from geochord.bench import run_experiment
from geochord.bench.checks import run_checks
from geochord.bench.experiments import stretch_samples
from geochord.cluster import em_fit
from geochord.dht import finger_bound
from geochord.geokey import AnchorObservation, GeoPoint, estimate_location, flag_outliers
from geochord.nettest import SimConfig, fec_decode, fec_encode, frame_delivery_probability
from geochord.nettest.sim import Simulator
from geochord.swarm import SwarmState, generate_traffic, minimize, network_latency, optimize_network

from conftest import record

SQUARE_MEAN = (2 + math.sqrt(2) + 5 * math.log(1 + math.sqrt(2))) / 15

pytestmark = pytest.mark.acceptance


class Budget:
    def __init__(self, seconds: float):
        self.seconds = seconds

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start

    @property
    def ok(self) -> bool:
        return self.elapsed < self.seconds


def test_c01_storage_bound():
    with Budget(10) as b:
        sim = Simulator(SimConfig(nodes=1024, k=2, height=5, neighborhood=4, seed=0))
        net = sim.overlay
        fb = finger_bound(2, 5)
        worst_f = max(n.table.finger_count() for n in net.live())
        worst_e = max(n.table.entry_count() for n in net.live())
    ok = fb == 15 and worst_f <= 15 and worst_e <= 15 + 4 + net.s and len(net) == 1024
    detail = f"max fingers {worst_f}/15, max entries {worst_e}/{15 + 4 + net.s}, {b.elapsed:.1f}s"
    assert record(1, "storage bound", ok and b.ok, detail)


def test_c02_path_length():
    ns = [64, 256, 1024]
    with Budget(60) as b:
        rep = run_experiment(SimConfig(seed=0), "path-length", nodes=ns, pairs=1000)
    ours = [rep.get("ours_mean_hops", N=n).value for n in ns]
    chord = [rep.get("chord_mean_hops", N=n).value for n in ns]
    lg = np.log2(ns)
    slope, icept = np.polyfit(lg, ours, 1)
    fit = slope * lg + icept
    r2 = 1 - np.sum((ours - fit) ** 2) / np.sum((ours - np.mean(ours)) ** 2)
    ratios = [c / l for c, l in zip(chord, lg)]
    ok = all(o <= 1.5 * l for o, l in zip(ours, lg)) and r2 >= 0.9 and all(0.4 <= r <= 0.6 for r in ratios)
    detail = (
        "hops " + ", ".join(f"N={n}: {o:.2f}" for n, o in zip(ns, ours))
        + f"; R^2 {r2:.3f}; flat Chord/log2N " + ", ".join(f"{r:.3f}" for r in ratios)
        + f"; {b.elapsed:.1f}s"
    )
    assert record(2, "path length", ok and b.ok, detail)


def test_c03_peer_latency_decay():
    parts, ok = [], True
    with Budget(60) as b:
        for k, h in ((2, 5), (4, 3)):
            rep = run_experiment(SimConfig(nodes=4096, k=k, height=h, seed=0), "peer-latency")
            ratio = rep.get("common_ratio", level="fit").value
            level0 = rep.get("mean_latency", level=0).value
            per_level = [v for p, v in rep.values("ratio_to_parent")]
            ok &= abs(ratio / k**-0.5 - 1) <= 0.15
            ok &= abs(level0 / (SQUARE_MEAN * 1000) - 1) <= 0.02
            parts.append(
                f"k={k}: ratio {ratio:.3f} vs {k ** -0.5:.3f} (levels " + " ".join(f"{r:.2f}" for r in per_level)
                + f"), level-0 {level0:.1f} vs {SQUARE_MEAN * 1000:.1f}"
            )
    assert record(3, "peer-latency decay", ok and b.ok, "; ".join(parts) + f"; {b.elapsed:.1f}s")


def test_c04_path_latency():
    with Budget(120) as b:
        per_seed = [run_experiment(SimConfig(nodes=1024, seed=s), "path-latency", pairs=1000) for s in range(5)]
    ours = [r.get("ours_mean_latency").value for r in per_seed]
    chord = [r.get("chord_mean_latency").value for r in per_seed]
    ok = all(o < c for o, c in zip(ours, chord)) and np.mean(ours) < np.mean(chord)
    detail = f"ours {np.mean(ours):.0f} vs flat Chord {np.mean(chord):.0f} (per seed " + ", ".join(
        f"{o:.0f}<{c:.0f}" for o, c in zip(ours, chord)
    ) + f"); {b.elapsed:.1f}s"
    assert record(4, "path latency", ok and b.ok, detail)


def test_c05_routing_quality():
    sim = Simulator(SimConfig(nodes=256, seed=0))
    keys = list(sim.overlay.directory.keys)
    rng = random.Random("stretch")
    pairs = [tuple(rng.sample(keys, 2)) for _ in range(200)]
    median = float(np.median(stretch_samples(sim.overlay, pairs)))
    delivered = total = 0
    for n in (2, 17, 33, 64):
        small = Simulator(SimConfig(nodes=n, seed=n))
        ks = small.overlay.directory.keys
        for a in ks:
            for t in ks:
                total += 1
                delivered += small.lookup(a, t, record=False).hops[-1].key.value == t
    ok = median <= 2.0 and delivered == total
    assert record(5, "routing quality", ok, f"median stretch {median:.3f} at N=256; delivered {delivered}/{total} exhaustive pairs")


def test_c06_broadcast():
    ok, parts = True, []
    for n in (16, 256):
        sim = Simulator(SimConfig(nodes=n, seed=1))
        keys = sim.overlay.directory.keys
        for src in keys[:: max(1, len(keys) // 8)]:
            res = sim.broadcast(src)
            once = set(res.receipts) == set(keys) and all(c == 1 for c in res.receipts.values())
            ok &= once and n - 1 <= res.messages <= n * math.ceil(math.log2(n))
        parts.append(f"N={n}: {res.messages} messages, reached {res.reached}")
    assert record(6, "broadcast", ok, "; ".join(parts))


def test_c07_fec():
    rng = random.Random(7)
    bad = 0
    for i in range(10_000):
        k = rng.randint(1, 16)
        payload = rng.randbytes(rng.randrange(0, 256))
        shards = fec_encode(payload, k, i).all_shards()
        for drop in range(k + 1):
            bad += fec_decode(shards[:drop] + shards[drop + 1:]) != payload
    sim = Simulator(SimConfig(nodes=8, seed=7, loss=0.05, fec_shards=4))
    keys = sim.overlay.directory.keys
    for _ in range(10_000):
        a, b = rng.sample(keys, 2)
        sim.send(a, b, rng.randbytes(32))
    rate = sim.run()["frames_delivered"] / 10_000
    predicted = frame_delivery_probability(4, 0.05)
    ok = bad == 0 and abs(rate - predicted) <= 0.01
    assert record(7, "FEC", ok, f"{bad} bad reconstructions; delivery {rate:.4f} vs {predicted:.4f}")


def _observations(rng, truth, anchors, noise=0.0):
    out = []
    for a in anchors:
        rtt = 2 * truth.distance(a)
        out.append(AnchorObservation(a, rtt * (1 + noise * rng.gauss(0, 1)) if noise else rtt))
    return out


def test_c08_localization():
    side = 1000.0
    rng = random.Random(8)

    def setup(n_anchors=8):
        anchors = [GeoPoint(rng.uniform(0, side), rng.uniform(0, side)) for _ in range(n_anchors)]
        return GeoPoint(rng.uniform(0, side), rng.uniform(0, side)), anchors

    worst = 0.0
    for _ in range(500):
        truth, anchors = setup()
        est, _ = estimate_location(_observations(rng, truth, anchors))
        worst = max(worst, est.distance(truth) / side)
    within = 0
    for _ in range(1000):
        truth, anchors = setup()
        est, _ = estimate_location(_observations(rng, truth, anchors, noise=0.01))
        within += est.distance(truth) <= 0.05 * side * math.sqrt(2)
    flagged = 0
    trials = 1000
    for _ in range(trials):
        truth, anchors = setup()
        obs = _observations(rng, truth, anchors)
        bad = rng.randrange(len(obs))
        obs[bad] = AnchorObservation(obs[bad].anchor, obs[bad].rtt * 10)
        flagged += bad in flag_outliers(obs, estimate_location(obs), tau=3.0)
    ok = worst <= 1e-6 and within >= 0.95 * 1000 and flagged >= 0.99 * trials
    detail = f"zero-noise rel. error {worst:.1e}; 1% noise within 5% diameter {within / 10:.1f}%; outlier flagged {flagged / trials:.1%} (8 anchors)"
    assert record(8, "localization", ok, detail)


def test_c09_estimation():
    rng = np.random.default_rng(9)
    monotone = 0
    for i in range(100):
        k = int(rng.integers(1, 5))
        X = np.vstack([rng.normal(rng.uniform(0, 100, 2), rng.uniform(1, 15), (int(rng.integers(20, 80)), 2)) for _ in range(k)])
        trace: list[float] = []
        em_fit(X, k, seed=i, trace=trace, tol=0.0, max_iter=80)
        total = np.array(trace) * len(X)
        monotone += bool(np.all(np.diff(total) >= -1e-9))
    sphere = sum(
        minimize(lambda x: float(np.sum(x * x)), 10, (-5.12, 5.12), particles=20, iterations=2000, seed=s, target=1e-3)[1] < 1e-3
        for s in range(10)
    )
    degrade = gbest_ok = True
    summary = []
    for seed in range(3):
        sim = Simulator(SimConfig(nodes=64, seed=seed))
        net = sim.overlay
        generate_traffic(net, 40, random.Random(f"{seed}:traffic"))
        initial = network_latency(net)
        checkpoints = []
        optimize_network(net, 400, seed=seed, on_epoch=lambda e, n: checkpoints.append(network_latency(n)) if e % 5 == 0 else None)
        final = network_latency(net)
        degrade &= all(c <= initial + 1e-9 for c in checkpoints + [final])
        for node in net.live():
            h = node.swarm.gbest_history if isinstance(node.swarm, SwarmState) else []
            gbest_ok &= all(b <= a for a, b in zip(h, h[1:]))
        summary.append(f"{initial:.1f}->{final:.1f}")
    ok = monotone == 100 and sphere >= 9 and degrade and gbest_ok
    detail = f"EM monotone {monotone}/100; sphere {sphere}/10; mean latency " + ", ".join(summary) + f"; gbest monotone {gbest_ok}"
    assert record(9, "estimation", ok, detail)


def test_c10_overhead_converges_to_zero():
    rep = run_experiment(SimConfig(nodes=64, seed=0), "convergence")
    checks = run_checks(rep)
    sim = Simulator(SimConfig(nodes=64, seed=0))
    generate_traffic(sim.overlay, 40, random.Random("0:traffic"))
    run = optimize_network(sim.overlay, 600, seed=0, stop_when_saturated=False)
    sat = run.saturated_epoch
    after = [r for r in run.rates if sat is not None and r.epoch > sat]
    zero = bool(after) and all(r.messages == 0 and r.t_c == 0 and r.t_p == 0 for r in after)
    zero &= all(run.counters.epoch_messages(r.epoch) == 0 for r in after)
    ok = zero and all(c for _, c in checks)
    detail = f"saturated at epoch {sat}, {len(after)} silent epochs after; " + "; ".join(d for d, c in checks if not c or "non-increasing" in d)
    assert record(10, "overhead converges to zero", ok, detail)


def test_c11_churn():
    rep = run_experiment(SimConfig(nodes=256, seed=0), "churn", fractions=[0.1], lookups=1000)
    row = rep.values("success_after_repair")[0][1]
    rounds = rep.values("rounds")[0][1]
    before = rep.values("success_before_repair")[0][1]
    ok = row == 1.0 and rounds == 3 * math.ceil(math.log2(256))
    assert record(11, "churn", ok, f"success {before:.3f} before repair, {row:.3f} after {rounds:.0f} rounds")


CLI_RUNS = [
    ["--experiment", "path-length", "--nodes", "128", "--pairs", "300", "--reps", "2"],
    ["--experiment", "churn", "--nodes", "64", "--fractions", "0.1,0.2", "--pairs", "100"],
    ["--experiment", "convergence", "--nodes", "24", "--epochs", "60"],
    ["--experiment", "storage", "--nodes", "64", "--seed", "5"],
]


def _cli(args, hashseed):
    env = {**os.environ, "PYTHONHASHSEED": hashseed}
    env.pop("GEOCHORD_OUT_DIR", None)
    proc = subprocess.run([sys.executable, "-m", "geochord.bench.cli", "run", *args], capture_output=True, env=env, check=True)
    return proc.stdout


def test_c12_determinism():
    same = 0
    for args in CLI_RUNS:
        a, b = _cli(args, "1"), _cli(args, "2")
        same += a == b and len(a) > 100
    ok = same == len(CLI_RUNS)
    assert record(12, "determinism", ok, f"{same}/{len(CLI_RUNS)} experiments byte-identical across processes")
