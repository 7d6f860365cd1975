"""Per-node parameter search with particle swarm optimisation.

Each node owns one particle whose position encodes its routing-table
parameters: one clockwise finger offset per table slot, written as a ring
fraction, plus a weight that trades latency against ring proximity when
neighbours are chosen.  A cycle explores (PSO step, scored on sampled
traffic), validates the candidate on fresh traffic, and on acceptance
installs the table and diffuses the node's best position.  Every rejected
cycle doubles the node's update interval; at the ceiling the node stops
sending altogether.
"""
from __future__ import annotations

import enum
import math
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import cluster as clust
from .dht import (
    FingerEntry,
    Node,
    Overlay,
    RoutingTable,
    build_routing_table,
    finger_bound,
    level_capacity,
    sibling_prefixes,
)
from .errors import DimensionError
from .geokey import ring_distance
from .route import Terminal, default_ttl, handoff, next_hop

OMEGA = 0.729
C1 = C2 = 1.49445
EXPLORE_PEERS = 8
VALIDATION_SAMPLES = 30
ACCEPT_GAIN = 0.01
MAX_INTERVAL = 64
PENALTY = 1e6
CATEGORIES = ("clustering", "peer_table", "routing", "other")


# --- optimiser core -------------------------------------------------------------


@dataclass(frozen=True)
class PsoParams:
    omega: float = OMEGA
    c1: float = C1
    c2: float = C2


@dataclass
class Particle:
    position: np.ndarray
    velocity: np.ndarray
    pbest: np.ndarray | None = None
    pbest_fitness: float = math.inf
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        self.position = np.array(self.position, dtype=float).ravel()
        self.velocity = np.array(self.velocity, dtype=float).ravel()
        self.pbest = self.position.copy() if self.pbest is None else np.array(self.pbest, dtype=float).ravel()
        dims = {self.position.size, self.velocity.size, self.pbest.size}
        for b in ("lower", "upper"):
            v = getattr(self, b)
            if v is not None:
                v = np.broadcast_to(np.asarray(v, dtype=float), self.position.shape).copy()
                setattr(self, b, v)
        if len(dims) != 1:
            raise DimensionError(f"position, velocity and pbest sizes differ: {sorted(dims)}")

    @property
    def dim(self) -> int:
        return self.position.size

    def observe(self, fitness: float, position: np.ndarray | None = None) -> bool:
        """Record the fitness of ``position`` (default: current); True on a new pbest."""
        if fitness < self.pbest_fitness:
            self.pbest_fitness = float(fitness)
            self.pbest = (self.position if position is None else np.asarray(position, dtype=float)).copy()
            return True
        return False


def pso_step(particle: Particle, gbest, params: PsoParams = PsoParams(), rng=None) -> Particle:
    """Constriction-form velocity and position update; returns a new particle.

    ``rng`` needs a numpy-style ``random(size)`` method.
    """
    g = np.asarray(gbest, dtype=float).ravel()
    if g.size != particle.dim:
        raise DimensionError(f"gbest has {g.size} dimensions, particle {particle.dim}")
    rng = rng if rng is not None else np.random.default_rng()
    x = particle.position
    r1 = np.asarray(rng.random(particle.dim), dtype=float)
    r2 = np.asarray(rng.random(particle.dim), dtype=float)
    v = params.omega * particle.velocity + params.c1 * r1 * (particle.pbest - x) + params.c2 * r2 * (g - x)
    nx = x + v
    if particle.lower is not None:
        nx = np.maximum(nx, particle.lower)
    if particle.upper is not None:
        nx = np.minimum(nx, particle.upper)
    return Particle(nx, v, particle.pbest.copy(), particle.pbest_fitness, particle.lower, particle.upper)


def minimize(
    f: Callable[[np.ndarray], float],
    dim: int,
    bounds: tuple[float, float],
    particles: int = 20,
    iterations: int = 2000,
    seed: int = 0,
    params: PsoParams = PsoParams(),
    target: float | None = None,
) -> tuple[np.ndarray, float, list[float]]:
    """Plain global-best swarm over a box; returns (best, fitness, history)."""
    rng = np.random.default_rng(seed)
    lo, hi = bounds
    swarm = []
    for _ in range(particles):
        p = Particle(rng.uniform(lo, hi, dim), rng.uniform(-(hi - lo), hi - lo, dim) * 0.1, lower=lo, upper=hi)
        p.observe(f(p.position))
        swarm.append(p)
    best = min(swarm, key=lambda p: p.pbest_fitness)
    g, gf = best.pbest.copy(), best.pbest_fitness
    history = [gf]
    for _ in range(iterations):
        for i, p in enumerate(swarm):
            p = swarm[i] = pso_step(p, g, params, rng)
            fit = f(p.position)
            p.observe(fit)
            if fit < gf:
                g, gf = p.position.copy(), float(fit)
        history.append(gf)
        if target is not None and gf < target:
            break
    return g, gf, history


# --- estimates ------------------------------------------------------------------


@dataclass
class NetworkEstimate:
    population: clust.Gmm
    traffic: clust.Gmm


@dataclass
class EstimateSamples:
    positions: np.ndarray  # (n, 2) peer positions
    flow_midpoints: np.ndarray  # (m, 2)
    flow_counts: np.ndarray  # (m,) non-negative integers


def _refit(points: np.ndarray, k: int, previous: clust.Gmm | None, seed: int) -> clust.Gmm | None:
    if len(points) == 0:
        return previous
    k = min(k, len(np.unique(points, axis=0)))
    if previous is not None and previous.k == k:
        means = np.array([g.mean for _, g in previous.components])
        assign = np.argmax(previous.log_component_densities(points), axis=1)
        return clust.em_fit(points, k, init=(means, assign), seed=seed)
    return clust.em_fit(points, k, seed=seed)


def update_estimates(
    previous: NetworkEstimate | None, samples: EstimateSamples, k: int = 2, seed: int = 0
) -> NetworkEstimate | None:
    """Re-fit the population and traffic mixtures, seeded from ``previous``.

    Flow midpoints enter the traffic fit once per recorded flow.
    """
    pos = np.asarray(samples.positions, dtype=float).reshape(-1, 2)
    mids = np.asarray(samples.flow_midpoints, dtype=float).reshape(-1, 2)
    counts = np.asarray(samples.flow_counts, dtype=int).ravel()
    if np.any(counts < 0):
        raise ValueError("flow counts must be non-negative")
    flows = np.repeat(mids, counts, axis=0) if len(mids) else mids
    pop = _refit(pos, k, previous.population if previous else None, seed)
    traffic = _refit(flows, k, previous.traffic if previous else None, seed)
    if pop is None:
        return previous
    return NetworkEstimate(pop, traffic if traffic is not None else pop)


# --- overhead -------------------------------------------------------------------


@dataclass(frozen=True)
class OverheadEvent:
    category: str
    recipients: int
    units: int  # per recipient
    epoch: int = 0


@dataclass
class OverheadCounters:
    messages: Counter = field(default_factory=Counter)
    units: Counter = field(default_factory=Counter)
    per_epoch: dict[int, Counter] = field(default_factory=dict)

    def epoch_messages(self, epoch: int, category: str | None = None) -> int:
        c = self.per_epoch.get(epoch, Counter())
        return sum(c.values()) if category is None else c[category]


def overhead_account(counters: OverheadCounters, event: OverheadEvent) -> None:
    if event.category not in CATEGORIES:
        raise ValueError(f"unknown overhead category {event.category!r}")
    if event.recipients < 0 or event.units < 0:
        raise ValueError("overhead counts are non-negative")
    counters.messages[event.category] += event.recipients
    counters.units[event.category] += event.recipients * event.units
    counters.per_epoch.setdefault(event.epoch, Counter())[event.category] += event.recipients


def fanout(n: int) -> int:
    """Recipients of one estimate broadcast: ``ceil(log2 N)``."""
    return max(1, math.ceil(math.log2(n))) if n > 1 else 0


def clustering_event(n: int, k: int, epoch: int = 0) -> OverheadEvent:
    return OverheadEvent("clustering", fanout(n), k, epoch)


def peer_table_event(n: int, epoch: int = 0, recipients: int | None = None) -> OverheadEvent:
    r = fanout(n) if recipients is None else recipients
    return OverheadEvent("peer_table", r, fanout(n), epoch)


# --- encoding a routing table as a position -----------------------------------


def layout(node: Node, net: Overlay) -> list[tuple[int, int]]:
    """(level, slot) pairs that the finger part of a position covers."""
    c = net.config
    depth = min(c.h, len(node.id.cluster_path))
    return [(i, j) for i in range(1, depth + 1) for j in range(level_capacity(i, c.k))]


def bounds(node: Node, net: Overlay) -> tuple[np.ndarray, np.ndarray]:
    n = len(layout(node, net))
    eps = 2.0 ** -net.config.bits
    return np.r_[np.full(n, eps), 0.0], np.r_[np.full(n, 1.0 - eps), 1.0]


def encode(node: Node, net: Overlay, weight: float = 1.0) -> np.ndarray:
    scale = float(1 << net.config.bits)
    offs = node.table.offsets
    out = []
    for i, j in layout(node, net):
        out.append(offs[i][j] / scale if i < len(offs) and j < len(offs[i]) else 2.0 ** -(j + 1))
    return np.array(out + [weight], dtype=float)


def decode_offsets(position: np.ndarray, node: Node, net: Overlay) -> list[list[int]]:
    c = net.config
    full = (1 << c.bits) - 1
    offs: list[list[int]] = [[] for _ in range(c.h + 1)]
    for (i, _j), frac in zip(layout(node, net), position):
        offs[i].append(min(max(int(round(float(frac) * (1 << c.bits))), 1), full))
    return offs


def materialize(position: np.ndarray, node: Node, net: Overlay) -> RoutingTable:
    """The routing table a position induces for ``node``.

    Offsets are rounded to ring integers and resolved to live peers, so
    every real vector yields a usable table.  Peers already in the node's
    table keep their measured indicators.
    """
    c = net.config
    w = float(np.clip(position[-1], 0.0, 1.0))
    lat_scale = c.side / max(net.link.mean_velocity(), 1e-12)
    ring_scale = float(1 << (c.bits - 1))
    me = node.id

    def score(nid) -> float:
        lat = net.latency(me.position, nid.position) / lat_scale
        ring = ring_distance(me.key, nid.key) / ring_scale
        return w * lat + (1.0 - w) * ring

    table = build_routing_table(
        me, net.directory, c.M, net.s, random.Random(me.key.value), net.latency, c.k, c.h,
        offsets=decode_offsets(position, node, net), neighbor_score=score,
    )
    old = {e.key: e for e in node.table.entries()}
    for group in [*table.levels, table.neighbors, table.successors]:
        for idx, e in enumerate(group):
            prev = old.get(e.key)
            if prev is not None:
                group[idx] = FingerEntry(e.peer, prev.indicators)
    return table


# --- fitness ----------------------------------------------------------------------


@dataclass
class Objective:
    """Penalty weights for the three table constraints.

    ``route_failure`` is charged per sampled flow the table cannot deliver.
    """

    level_coverage: float = PENALTY
    neighbors: float = PENALTY
    size: float = PENALTY
    route_failure: float = PENALTY
    min_neighbors: int | None = None

    def __post_init__(self):
        if min(self.level_coverage, self.neighbors, self.size, self.route_failure) < 0:
            raise ValueError("penalty weights must be non-negative")


def estimate_latency(net: Overlay, node: Node, table: RoutingTable, target: int) -> float | None:
    """Jitter-free latency of the greedy route from ``node`` using ``table``
    for the first hop and the live tables of everyone else; None if stuck."""
    shadow = Node(node.id, table, matrices=node.matrices, velocity_prior=node.velocity_prior)
    tpath = net.target_path(target)
    ttl = default_ttl(len(net))
    cur, total, hops, seen = shadow, 0.0, 0, {node.key}
    while True:
        excluded: set[int] = set()
        while True:
            try:
                step = next_hop(cur, target, net, target_path=tpath, excluded=excluded)
            except Exception:
                return None
            if step is Terminal:
                return total
            peer = net.nodes.get(step.key)
            if peer is not None and peer.alive:
                break
            excluded.add(step.key)
        total += net.latency(cur.id.position, peer.id.position)
        hops += 1
        if hops > ttl or peer.key in seen:
            return None
        if handoff(cur, peer, target, net):
            return total
        seen.add(peer.key)
        cur = peer


def violations(table: RoutingTable, node: Node, net: Overlay, objective: Objective) -> tuple[int, int, int]:
    c = net.config
    path = node.id.cluster_path
    missing = 0
    for i in range(1, min(c.h, len(path)) + 1):
        if not table.levels[i] and any(net.directory.members(q) for q in sibling_prefixes(path, i, c.k)):
            missing += 1
    m_min = objective.min_neighbors if objective.min_neighbors is not None else min(c.M, len(net) - 1)
    short = max(0, m_min - len(table.neighbors))
    over = max(0, table.finger_count() - finger_bound(c.k, c.h))
    over += max(0, table.entry_count() - (finger_bound(c.k, c.h) + c.M + net.s))
    return missing, short, over


def table_fitness(table: RoutingTable, node: Node, traffic: Sequence[tuple[int, float]], objective: Objective, net: Overlay) -> float:
    total = 0.0
    for target, w in traffic:
        if w < 0:
            raise ValueError("traffic weights must be non-negative")
        lat = estimate_latency(net, node, table, target)
        total += w * (objective.route_failure if lat is None else lat)
    a, b, c = violations(table, node, net, objective)
    return total + objective.level_coverage * a + objective.neighbors * b + objective.size * c


def fitness(position, node: Node, traffic_sample: Sequence[tuple[int, float]], objective: Objective, net: Overlay) -> float:
    """Traffic-weighted estimated path latency plus constraint penalties."""
    return table_fitness(materialize(np.asarray(position, dtype=float), node, net), node, traffic_sample, objective, net)


def traffic_sample(node: Node, n: int, rng: random.Random) -> list[tuple[int, float]]:
    """``n`` flows drawn with replacement from the node's recorded sends,
    each weighted ``1/n``."""
    if not node.sent or n <= 0:
        return []
    return [(t, 1.0 / n) for t in rng.choices(node.sent, k=n)]


# --- phase machine ----------------------------------------------------------------


class Phase(enum.Enum):
    EXPLORATION = "exploration"
    VALIDATION = "validation"
    DIFFUSION = "diffusion"


@dataclass
class SwarmState:
    particle: Particle
    current: np.ndarray  # position of the installed table
    gbest: np.ndarray
    gbest_fitness: float = math.inf
    phase: Phase = Phase.EXPLORATION
    stall_count: int = 0
    interval: int = 1
    next_epoch: int = 0
    accepted: int = 0
    last_sent: int = 0
    gbest_history: list[float] = field(default_factory=list)
    estimate: NetworkEstimate | None = None

    @property
    def saturated(self) -> bool:
        return self.interval >= MAX_INTERVAL

    def offer(self, position: np.ndarray, value: float) -> bool:
        """Min-update of the best known position; True when it improved.

        A position from a node with a different number of finger slots is
        projected: shared leading slots are taken over, the rest kept.
        """
        if value < self.gbest_fitness:
            self.gbest = project(position, self.gbest)
            self.gbest_fitness = float(value)
            return True
        return False

    def stall(self) -> None:
        self.stall_count += 1
        self.interval = min(self.interval * 2, MAX_INTERVAL)


def project(position, like: np.ndarray) -> np.ndarray:
    src = np.asarray(position, dtype=float)
    out = np.array(like, dtype=float)
    n = min(src.size, out.size) - 1
    out[:n] = src[:n]
    out[-1] = src[-1]
    return out


def init_swarm(node: Node, net: Overlay, rng: np.random.Generator, spread: float = 0.05) -> SwarmState:
    lo, hi = bounds(node, net)
    x = np.clip(encode(node, net), lo, hi)
    v = rng.uniform(-1.0, 1.0, x.size) * spread * (hi - lo)
    state = SwarmState(Particle(x, v, lower=lo, upper=hi), x.copy(), x.copy())
    node.swarm = state
    return state


@dataclass
class CycleLog:
    epoch: int
    node: str
    phase: str
    gbest_fitness: float
    interval: int
    messages: int


def _diffusion_targets(node: Node, net: Overlay) -> list[Node]:
    """Same-cluster table entries plus one contact per sibling cluster."""
    path = node.id.cluster_path
    out: dict[int, Node] = {}
    entries = sorted(node.table.entries(), key=lambda e: (e.indicators.latency_ewma, e.key))
    for e in entries:
        if e.peer.cluster_path == path and net.is_live(e.key):
            out.setdefault(e.key, net.nodes[e.key])
    for i in range(1, min(net.config.h, len(path)) + 1):
        for q in sibling_prefixes(path, i, net.config.k):
            e = next((e for e in entries if e.peer.cluster_path.startswith(q) and net.is_live(e.key)), None)
            if e is not None:
                out.setdefault(e.key, net.nodes[e.key])
    return [out[v] for v in sorted(out)]


def phase_step(
    node: Node,
    swarm: SwarmState,
    net: Overlay,
    rng: random.Random,
    objective: Objective | None = None,
    counters: OverheadCounters | None = None,
    np_rng: np.random.Generator | None = None,
    evaluate: Callable[[np.ndarray, list], float] | None = None,
) -> SwarmState:
    """Run one exploration / validation / diffusion cycle for ``node``.

    Saturated nodes do nothing.  Overhead is charged to ``counters`` with
    the accounting model of :func:`clustering_event` and
    :func:`peer_table_event`.  ``evaluate(position, traffic)`` replaces the
    network fitness (and table installation) for closed-world experiments.
    """
    if swarm.saturated:
        swarm.last_sent = 0
        return swarm
    objective = objective or Objective()
    np_rng = np_rng or np.random.default_rng(rng.getrandbits(32))
    n, epoch = len(net), net.epoch
    sent = 0

    def charge(ev: OverheadEvent) -> None:
        nonlocal sent
        sent += ev.recipients
        if counters is not None:
            overhead_account(counters, ev)

    # Exploration: pull tables and adjacency rows from random peers.
    swarm.phase = Phase.EXPLORATION
    others = [v for v in net.directory.keys if v != node.key]
    peers = [net.nodes[v] for v in rng.sample(others, min(EXPLORE_PEERS, len(others)))]
    charge(OverheadEvent("other", len(peers), 1, epoch))
    _merge_adjacency(node, peers)
    swarm.estimate = update_estimates(swarm.estimate, _samples(node, peers, net), net.config.k, seed=node.key & 0xFFFF)
    charge(clustering_event(n, net.config.k, epoch))
    charge(peer_table_event(n, epoch))

    candidate = pso_step(swarm.particle, swarm.gbest, PsoParams(), np_rng)
    explore = traffic_sample(node, VALIDATION_SAMPLES, rng)
    if evaluate is None:
        cand_table = materialize(candidate.position, node, net)
        score_new = lambda t: table_fitness(cand_table, node, t, objective, net)  # noqa: E731
        score_old = lambda t: table_fitness(node.table, node, t, objective, net)  # noqa: E731
    else:
        cand_table = None
        score_new = lambda t: evaluate(candidate.position, t)  # noqa: E731
        score_old = lambda t: evaluate(swarm.current, t)  # noqa: E731
    f_explore = score_new(explore)
    candidate.observe(f_explore)
    swarm.particle = candidate
    swarm.offer(candidate.position, f_explore)

    # Validation on fresh traffic.
    swarm.phase = Phase.VALIDATION
    fresh = traffic_sample(node, VALIDATION_SAMPLES, rng)
    f_new, f_old = score_new(fresh), score_old(fresh)
    accept = (bool(fresh) or evaluate is not None) and f_old > 0 and (f_old - f_new) > ACCEPT_GAIN * f_old

    if accept:
        swarm.phase = Phase.DIFFUSION
        if cand_table is not None:
            node.table = cand_table
        swarm.current = candidate.position.copy()
        swarm.accepted += 1
        swarm.stall_count = 0
        swarm.interval = 1
        targets = _diffusion_targets(node, net)
        for peer in targets:
            if isinstance(peer.swarm, SwarmState):
                peer.swarm.offer(swarm.gbest, swarm.gbest_fitness)
                peer.swarm.gbest_history.append(peer.swarm.gbest_fitness)
        charge(peer_table_event(n, epoch, recipients=len(targets)))
    else:
        swarm.stall()
    swarm.gbest_history.append(swarm.gbest_fitness)
    swarm.next_epoch = epoch + swarm.interval
    swarm.last_sent = sent
    return swarm


def _merge_adjacency(node: Node, peers: Sequence[Node]) -> None:
    for peer in peers:
        for level, m in peer.matrices.items():
            mine = node.matrix(level)
            for pair, value in m.entries.items():
                if mine.staleness.get(pair, -1) < m.staleness.get(pair, -1):
                    mine.entries[pair] = value
                    mine.staleness[pair] = m.staleness[pair]


def _samples(node: Node, peers: Sequence[Node], net: Overlay) -> EstimateSamples:
    pos = np.array([[p.id.position.x, p.id.position.y] for p in [node, *peers]])
    mids, counts = [], []
    for src in [node, *peers]:
        tally = Counter(src.sent)
        for t in sorted(tally):
            dst = net.nodes.get(t)
            if dst is None:
                continue
            a, b = src.id.position, dst.id.position
            mids.append([(a.x + b.x) / 2, (a.y + b.y) / 2])
            counts.append(tally[t])
    return EstimateSamples(pos, np.array(mids).reshape(-1, 2), np.array(counts, dtype=int))


# --- network-wide driver ------------------------------------------------------------


def overhead_rates(net: Overlay) -> tuple[float, float]:
    """Expected clustering and peer-table units per epoch, ``(t_c, t_p)``.

    Each unsaturated node broadcasts both estimates once per interval.
    """
    f = fanout(len(net))
    tc = tp = 0.0
    for node in net.live():
        s = node.swarm
        if isinstance(s, SwarmState) and not s.saturated:
            tc += f * net.config.k / s.interval
            tp += f * f / s.interval
    return tc, tp


def network_latency(net: Overlay, flows: dict[int, list[int]] | None = None) -> float:
    """Mean jitter-free latency over every recorded send of every live node."""
    total, count = 0.0, 0
    for node in net.live():
        for t in (flows or {}).get(node.key, node.sent):
            lat = estimate_latency(net, node, node.table, t)
            total += PENALTY if lat is None else lat
            count += 1
    return total / count if count else 0.0


@dataclass(frozen=True)
class EpochRate:
    epoch: int
    t_c: float
    t_p: float
    messages: int
    mean_gbest: float


@dataclass
class ConvergenceRun:
    logs: list[CycleLog]
    rates: list[EpochRate]
    counters: OverheadCounters
    last_accept_epoch: int | None
    saturated_epoch: int | None


def generate_traffic(net: Overlay, flows_per_node: int, rng: random.Random, hotspots: int = 4, locality: float = 0.7) -> None:
    """Fill ``node.sent`` with destination keys.

    A share ``locality`` of each node's flows goes to a few per-node
    favourite destinations, the rest to uniformly random peers.
    """
    keys = list(net.directory.keys)
    for node in net.live():
        others = [v for v in keys if v != node.key]
        if not others:
            continue
        fav = rng.sample(others, min(hotspots, len(others)))
        node.sent = [rng.choice(fav) if rng.random() < locality else rng.choice(others) for _ in range(flows_per_node)]


def optimize_network(
    net: Overlay,
    epochs: int,
    seed: int = 0,
    objective: Objective | None = None,
    evaluate: Callable[[np.ndarray, list], float] | None = None,
    stop_when_saturated: bool = True,
    on_epoch: Callable[[int, Overlay], None] | None = None,
) -> ConvergenceRun:
    """Drive every node's cycle until all are saturated or ``epochs`` pass.

    ``on_epoch(epoch, net)`` runs after each epoch's cycles.
    """
    rng = random.Random(f"{seed}:swarm")
    np_rng = np.random.default_rng(seed)
    for node in net.live():
        if not isinstance(node.swarm, SwarmState):
            init_swarm(node, net, np_rng)
    counters = OverheadCounters()
    logs: list[CycleLog] = []
    rates = []
    last_accept = saturated_at = None
    for _ in range(epochs):
        epoch = net.epoch
        sent = 0
        for node in net.live():
            s = node.swarm
            if s.saturated or s.next_epoch > epoch:
                continue
            before = s.accepted
            phase_step(node, s, net, rng, objective, counters, np_rng, evaluate)
            sent += s.last_sent
            if s.accepted > before:
                last_accept = epoch
            logs.append(CycleLog(epoch, node.id.key.hex, s.phase.value, s.gbest_fitness, s.interval, s.last_sent))
        tc, tp = overhead_rates(net)
        fits = [n.swarm.gbest_fitness for n in net.live()]
        rates.append(EpochRate(epoch, tc, tp, sent, float(np.mean(fits)) if fits else math.nan))
        if on_epoch is not None:
            on_epoch(epoch, net)
        net.epoch += 1
        if saturated_at is None and all(n.swarm.saturated for n in net.live()):
            saturated_at = epoch
            if stop_when_saturated:
                break
    return ConvergenceRun(logs, rates, counters, last_accept, saturated_at)
