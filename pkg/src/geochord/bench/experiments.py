"""Named experiments.  Each one measures a single repetition per seed; the
runner averages repetitions and attaches standard errors."""
from __future__ import annotations

import math
import random
import statistics
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from .. import cluster as clust
from ..dht import Overlay, finger_bound
from ..errors import GeoChordError, UnknownExperiment
from ..nettest.baselines import FlatChord, XorOverlay
from ..nettest.config import SimConfig
from ..nettest.sim import Simulator, link_from_config, uniform_positions
from ..route import trace_csv
from ..swarm import generate_traffic, network_latency, optimize_network
from .report import MetricsReport

UNIFORM_SQUARE_MEAN = 0.5214054331647207  # E|P - Q| for P, Q uniform in the unit square


@dataclass
class Experiment:
    name: str
    sweep: dict[str, list] = field(default_factory=dict)
    repetitions: int = 1
    seeds: tuple[int, ...] = ()
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in EXPERIMENTS:
            raise UnknownExperiment(f"unknown experiment {self.name!r}; choose from {', '.join(EXPERIMENTS)}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.seeds and (len(set(self.seeds)) != len(self.seeds) or len(self.seeds) != self.repetitions):
            raise ValueError("need one distinct seed per repetition")


# --- helpers --------------------------------------------------------------------


def _pairs(keys: list[int], count: int, rng: random.Random) -> list[tuple[int, int]]:
    if len(keys) < 2:
        return []
    return [tuple(rng.sample(keys, 2)) for _ in range(count)]


def _p95(xs: list[float]) -> float:
    return float(np.percentile(xs, 95)) if xs else 0.0


def _baselines(sim: Simulator) -> tuple[list[int], FlatChord, XorOverlay]:
    keys = list(sim.overlay.directory.keys)
    pos = [sim.overlay.nodes[v].id.position for v in keys]
    return keys, FlatChord(pos, sim.link, bits=sim.overlay.config.bits), XorOverlay(pos, sim.link, seed=sim.config.seed)


def overlay_graph(net: Overlay) -> tuple[list[int], csr_matrix]:
    """Directed overlay graph, one edge per routing-table entry, weighted by
    jitter-free link latency."""
    keys = list(net.directory.keys)
    index = {v: i for i, v in enumerate(keys)}
    rows, cols, w = [], [], []
    for v in keys:
        node = net.nodes[v]
        for e in node.table.entries():
            j = index.get(e.key)
            if j is None:
                continue
            rows.append(index[v])
            cols.append(j)
            w.append(max(net.latency(node.id.position, e.peer.position), 1e-12))
    return keys, csr_matrix((w, (rows, cols)), shape=(len(keys), len(keys)))


def stretch_samples(net: Overlay, pairs: list[tuple[int, int]]) -> list[float]:
    """Greedy route latency over the Dijkstra optimum, zero-jitter links."""
    from ..route import route

    keys, graph = overlay_graph(net)
    index = {v: i for i, v in enumerate(keys)}
    sources = sorted({a for a, _ in pairs})
    dist = dijkstra(graph, directed=True, indices=[index[a] for a in sources])
    row = {a: i for i, a in enumerate(sources)}
    out = []
    for a, b in pairs:
        path = route(net, a, b, record=False)
        greedy = sum(net.latency(x.position, y.position) for x, y in zip(path.hops, path.hops[1:]))
        best = dist[row[a], index[b]]
        out.append(greedy / best if best > 0 else 1.0)
    return out


# --- experiments ------------------------------------------------------------------
# Each returns {point-tuple: {statistic: value}} for one seed.

Measure = Callable[[SimConfig, int, dict], dict]


def path_length(config: SimConfig, seed: int, opts: dict) -> dict:
    out = {}
    for n in opts.get("nodes", [config.nodes]):
        sim = Simulator(config.with_overrides(nodes=n, seed=seed))
        keys, chord, xor = _baselines(sim)
        rng = random.Random(f"{seed}:pairs")
        index = {v: i for i, v in enumerate(keys)}
        ours, fc, xo = [], [], []
        traces = opts.get("_traces")
        for a, b in _pairs(keys, opts.get("pairs", 1000), rng):
            p = sim.lookup(a, b, record=False) if traces is None else _traced(sim, a, b, traces)
            ours.append(p.hop_count)
            ia, ib = index[a], index[b]
            fc.append(chord.route(chord.id_of(ia), chord.id_of(ib)).hop_count)
            xo.append(xor.route(xor.id_of(ia), xor.id_of(ib)).hop_count)
        stats = {"log2_n": math.log2(n) if n > 0 else 0.0}
        for name, xs in (("ours", ours), ("chord", fc), ("xor", xo)):
            stats[f"{name}_mean_hops"] = float(np.mean(xs)) if xs else 0.0
            stats[f"{name}_p95_hops"] = _p95(xs)
        out[(("N", n),)] = stats
    return out


def _traced(sim: Simulator, a: int, b: int, sink: list[str]):
    from ..route import route

    p = route(sim.overlay, a, b, record=False, rng=sim.link_rng, trace=True)
    sink.append(trace_csv(p, header=not sink))
    return p


def peer_latency(config: SimConfig, seed: int, opts: dict) -> dict:
    """Mean latency between random pairs that share a level-l cluster."""
    n = config.nodes
    rng = random.Random(f"{seed}:place")
    pts = uniform_positions(n, config.side, rng)
    X = np.array([[p.x, p.y] for p in pts])
    tree = clust.build_hierarchy(X, config.k, config.height, seed=seed)
    paths = clust.assign_paths(tree, X)
    link = link_from_config(config)
    members: dict[str, list[int]] = {}
    for i, path in enumerate(paths):
        for level in range(len(path) + 1):
            members.setdefault(path[:level], []).append(i)
    draw = random.Random(f"{seed}:pairs")
    pairs = opts.get("pairs", 20000)
    out = {}
    prev = None
    for level in range(config.height + 1):
        eligible = [i for i, path in enumerate(paths) if len(path) >= level and len(members[path[:level]]) > 1]
        if not eligible:
            break
        lats = []
        for _ in range(pairs):
            a = draw.choice(eligible)
            group = members[paths[a][:level]]
            b = a
            while b == a:
                b = draw.choice(group)
            lats.append(link.base(pts[a], pts[b]))
        sizes = [len(v) for k, v in members.items() if len(k) == level]
        mean = float(np.mean(lats))
        stats = {
            "mean_latency": mean,
            "clusters": float(len(sizes)),
            "mean_population": float(np.mean(sizes)),
            "min_population": float(min(sizes)),
        }
        if level == 0:
            stats["oracle_latency"] = UNIFORM_SQUARE_MEAN * config.side / config.velocity
        if prev is not None:
            stats["ratio_to_parent"] = mean / prev
        stats["expected_ratio"] = config.k ** -0.5
        prev = mean
        out[(("N", n), ("k", config.k), ("level", level))] = stats
    out[(("N", n), ("k", config.k), ("level", "fit"))] = {
        "common_ratio": geometric_ratio(out, opts.get("min_population", 32)),
        "expected_ratio": config.k ** -0.5,
    }
    return out


def geometric_ratio(levels: dict, min_population: float = 32) -> float:
    """Common ratio of a log-linear fit of mean latency against level, over
    levels whose mean cluster population is at least ``min_population``."""
    xs, ys = [], []
    for point, stats in levels.items():
        lv = dict(point)["level"]
        if isinstance(lv, int) and stats["mean_population"] >= min_population:
            xs.append(lv)
            ys.append(math.log(stats["mean_latency"]))
    if len(xs) < 2:
        return float("nan")
    return float(math.exp(np.polyfit(xs, ys, 1)[0]))


def path_latency(config: SimConfig, seed: int, opts: dict) -> dict:
    out = {}
    for n in opts.get("nodes", [config.nodes]):
        sim = Simulator(config.with_overrides(nodes=n, seed=seed))
        keys, chord, xor = _baselines(sim)
        rng = random.Random(f"{seed}:pairs")
        pairs = _pairs(keys, opts.get("pairs", 1000), rng)
        index = {v: i for i, v in enumerate(keys)}
        lat = {"ours": [], "chord": [], "xor": []}
        for a, b in pairs:
            lat["ours"].append(sim.lookup(a, b, record=False).total_latency)
            ia, ib = index[a], index[b]
            lat["chord"].append(chord.route(chord.id_of(ia), chord.id_of(ib), rng=sim.link_rng).total_latency)
            lat["xor"].append(xor.route(xor.id_of(ia), xor.id_of(ib), rng=sim.link_rng).total_latency)
        stats = {}
        for name, xs in lat.items():
            stats[f"{name}_mean_latency"] = float(np.mean(xs)) if xs else 0.0
            stats[f"{name}_median_latency"] = float(np.median(xs)) if xs else 0.0
            stats[f"{name}_p95_latency"] = _p95(xs)
        sp = opts.get("stretch_pairs", 0)
        if sp and len(keys) > 1:
            s = stretch_samples(sim.overlay, pairs[:sp])
            stats["ours_median_stretch"] = float(np.median(s))
            stats["ours_max_stretch"] = float(max(s))
        out[(("N", n),)] = stats
    return out


def _optimized_sim(config: SimConfig, seed: int, opts: dict) -> tuple[Simulator, float]:
    sim = Simulator(config.with_overrides(seed=seed))
    generate_traffic(sim.overlay, opts.get("flows", 40), random.Random(f"{seed}:traffic"))
    return sim, network_latency(sim.overlay)


def overhead(config: SimConfig, seed: int, opts: dict) -> dict:
    """Per-category optimisation and lookup messages per epoch."""
    sim, _ = _optimized_sim(config, seed, opts)
    net = sim.overlay
    lookups = opts.get("lookups", 16)
    rng = random.Random(f"{seed}:lookups")
    routing: dict[int, int] = {}

    run = optimize_network(net, opts.get("epochs", 200), seed=seed, stop_when_saturated=False)
    for r in run.rates:
        hops = 0
        for a, b in _pairs(list(net.directory.keys), lookups, rng):
            hops += sim.lookup(a, b, record=False).hop_count
        routing[r.epoch] = hops
    out = {}
    for r in run.rates:
        c = run.counters.per_epoch.get(r.epoch, {})
        out[(("N", len(net)), ("epoch", r.epoch))] = {
            "clustering": float(c.get("clustering", 0)),
            "peer_table": float(c.get("peer_table", 0)),
            "other": float(c.get("other", 0)),
            "routing": float(routing[r.epoch]),
            "t_c": r.t_c,
            "t_p": r.t_p,
        }
    return out


def storage(config: SimConfig, seed: int, opts: dict) -> dict:
    sim = Simulator(config.with_overrides(seed=seed))
    net = sim.overlay
    fb = finger_bound(config.k, config.height)
    out = {}
    worst_f = worst_e = 0
    for node in net.live():
        f, e = node.table.finger_count(), node.table.entry_count()
        worst_f, worst_e = max(worst_f, f), max(worst_e, e)
        if opts.get("per_node", True):
            out[(("N", len(net)), ("node", node.id.key.hex))] = {
                "fingers": float(f),
                "entries": float(e),
                "finger_bound": float(fb),
                "entry_bound": float(fb + config.neighborhood + net.s),
            }
    out[(("N", len(net)), ("node", "all"))] = {
        "max_fingers": float(worst_f),
        "max_entries": float(worst_e),
        "finger_bound": float(fb),
        "entry_bound": float(fb + config.neighborhood + net.s),
        "successors": float(net.s),
    }
    return out


def convergence(config: SimConfig, seed: int, opts: dict) -> dict:
    sim, before = _optimized_sim(config, seed, opts)
    net = sim.overlay
    run = optimize_network(net, opts.get("epochs", 400), seed=seed)
    after = network_latency(net)
    sink = opts.get("_traces")
    if sink is not None:
        sink.append("epoch,node,phase,gbest_fitness,interval,messages\n")
        sink.extend(f"{r.epoch},{r.node},{r.phase},{r.gbest_fitness!r},{r.interval},{r.messages}\n" for r in run.logs)
    out = {}
    for r in run.rates:
        out[(("N", len(net)), ("epoch", r.epoch))] = {
            "mean_gbest_fitness": r.mean_gbest,
            "t_c": r.t_c,
            "t_p": r.t_p,
            "messages": float(r.messages),
        }
    out[(("N", len(net)), ("epoch", "summary"))] = {
        "initial_latency": before,
        "final_latency": after,
        "last_accept_epoch": float(-1 if run.last_accept_epoch is None else run.last_accept_epoch),
        "saturated_epoch": float(-1 if run.saturated_epoch is None else run.saturated_epoch),
        "accepted": float(sum(n.swarm.accepted for n in net.live())),
    }
    return out


def churn(config: SimConfig, seed: int, opts: dict) -> dict:
    out = {}
    for frac in opts.get("fractions", [0.0, 0.1, 0.2, 0.3]):
        sim = Simulator(config.with_overrides(seed=seed))
        n0 = len(sim.overlay)
        sim.fail_fraction(frac)
        keys = list(sim.overlay.directory.keys)
        pairs = _pairs(keys, opts.get("lookups", 500), random.Random(f"{seed}:pairs"))

        def success() -> float:
            ok = 0
            for a, b in pairs:
                try:
                    sim.lookup(a, b, record=False)
                    ok += 1
                except GeoChordError:
                    pass
            return ok / len(pairs) if pairs else 1.0

        before = success()
        rounds = opts.get("rounds", 3 * math.ceil(math.log2(max(n0, 2))))
        for _ in range(rounds):
            sim.epoch_step()
        out[(("N", n0), ("fail_fraction", frac))] = {
            "survivors": float(len(keys)),
            "success_before_repair": before,
            "success_after_repair": success(),
            "rounds": float(rounds),
        }
    return out


EXPERIMENTS: dict[str, Measure] = {
    "path-length": path_length,
    "peer-latency": peer_latency,
    "path-latency": path_latency,
    "overhead": overhead,
    "storage": storage,
    "convergence": convergence,
    "churn": churn,
}


def run_experiment(config: SimConfig, experiment: str | Experiment, traces: list[str] | None = None, **options) -> MetricsReport:
    """Run every repetition of ``experiment`` and average per point."""
    exp = experiment if isinstance(experiment, Experiment) else Experiment(experiment, options=options)
    opts = {**exp.options, **{k: list(v) for k, v in exp.sweep.items()}}
    reps = exp.repetitions
    seeds = exp.seeds or tuple(config.seed + i for i in range(reps))
    if traces is not None:
        opts["_traces"] = traces
    measure = EXPERIMENTS[exp.name]
    merged: dict[tuple, dict[str, list[float]]] = {}
    for s in seeds:
        for point, stats in measure(config, s, opts).items():
            slot = merged.setdefault(point, {})
            for name, value in stats.items():
                slot.setdefault(name, []).append(float(value))
    report = MetricsReport(exp.name, params={**config.to_dict(), "seeds": list(seeds), **{k: v for k, v in opts.items() if not k.startswith("_")}})
    for point, stats in merged.items():
        p = dict(point)
        for name, values in stats.items():
            se = statistics.stdev(values) / math.sqrt(len(values)) if len(values) > 1 else None
            report.add(p, name, float(np.mean(values)), se)
    return report
