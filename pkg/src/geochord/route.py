"""Greedy best-first routing with ``f = g + h``, pheromone tie-breaking and a
route-estimate cache."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from .dht import FingerEntry, Node, Overlay, candidates, shared_levels, update_adjacency, update_indicator
from .errors import RoutingStuck, TtlExceeded
from .geokey import GeoPoint, RingKey, clockwise, key_to_point

CACHE_WINDOW = 10


class _Terminal:
    def __repr__(self):
        return "Terminal"


Terminal = _Terminal()


@dataclass
class PathEstimate:
    g: float
    h: float

    def __post_init__(self):
        if self.g < 0 or self.h < 0:
            raise ValueError("path estimates are non-negative")

    @property
    def f(self) -> float:
        return self.g + self.h


@dataclass
class HopRecord:
    index: int
    key: str
    g: float
    h: float
    f: float
    link_latency: float


@dataclass
class Path:
    hops: list  # NodeId, source first
    total_latency: float = 0.0
    link_latencies: list[float] = field(default_factory=list)
    trace: list[HopRecord] = field(default_factory=list)

    @property
    def hop_count(self) -> int:
        return len(self.hops) - 1


@dataclass
class PheromoneTable:
    rho: float = 0.1
    Q: float = 100.0
    tau: dict[tuple[int, int], float] = field(default_factory=dict)

    def get(self, a: int, b: int) -> float:
        return self.tau.get((a, b), 0.0)

    def evaporate(self) -> None:
        keep = 1.0 - self.rho
        self.tau = {e: v * keep for e, v in self.tau.items() if v * keep > 1e-300}


def reinforce(pheromone: PheromoneTable, path: Path, observed_latency: float) -> None:
    if observed_latency <= 0:
        raise ValueError("observed latency must be positive")
    deposit = pheromone.Q / observed_latency
    for a, b in zip(path.hops, path.hops[1:]):
        edge = (a.key.value, b.key.value)
        pheromone.tau[edge] = (1 - pheromone.rho) * pheromone.tau.get(edge, 0.0) + deposit


@dataclass
class RouteCache:
    window: int = CACHE_WINDOW
    entries: dict[tuple[str, str, int], tuple[float, int]] = field(default_factory=dict)


def cache_put(cache: RouteCache, src_cluster: str, dst_cluster: str, level: int, value: float, epoch: int) -> None:
    cache.entries[(src_cluster, dst_cluster, level)] = (value, epoch)


def cache_get(cache: RouteCache, src_cluster: str, dst_cluster: str, level: int, epoch: int) -> float | None:
    hit = cache.entries.get((src_cluster, dst_cluster, level))
    if hit is None or epoch - hit[1] > cache.window:
        return None
    return hit[0]


# --- heuristic and hop choice ---------------------------------------------------


def implied_velocity(node: Node, cand_path: str, target_path: str, centroids: dict, epoch: int, window: int) -> float:
    """Velocity implied by the adjacency entry between the two clusters.

    Uses the deepest level at which both paths are resolved and differ;
    falls back to the node's prior when that entry is absent or stale.
    """
    depth = min(len(cand_path), len(target_path))
    if depth == 0 or cand_path[:depth] == target_path[:depth]:
        return node.velocity_prior
    p, q = cand_path[:depth], target_path[:depth]
    matrix = node.matrices.get(depth)
    c = None if matrix is None else matrix.get(p, q, epoch, window)
    if not c:
        return node.velocity_prior
    cp, cq = centroids.get(p), centroids.get(q)
    if cp is None or cq is None:
        return node.velocity_prior
    d = math.hypot(cp[0] - cq[0], cp[1] - cq[1])
    return d / c if d > 0 else node.velocity_prior


def heuristic(
    node: Node,
    candidate: FingerEntry,
    target: RingKey | int,
    target_path: str,
    net: Overlay,
    target_point: GeoPoint | None = None,
) -> float:
    """Estimated remaining latency from ``candidate`` to the target's cell."""
    t = target.value if isinstance(target, RingKey) else target
    if candidate.key == t:
        return 0.0
    if target_point is None:
        target_point = key_to_point(RingKey(t, net.config.bits), net.config.side)
    pos = candidate.peer.position
    dist = math.hypot(pos.x - target_point.x, pos.y - target_point.y)
    v = implied_velocity(node, candidate.peer.cluster_path, target_path, net.centroids, net.epoch, net.config.cache_window)
    return dist / v


def _usable(net: Overlay, node: Node, e: FingerEntry, excluded: set[int]) -> bool:
    return e.key not in excluded and e.key != node.key


def _progress_pool(node, t, target_path, cands, excluded, own, bits):
    """Candidates allowed to compete on ``f``.

    Only entries that keep at least the node's shared cluster depth with the
    target qualify.  Among those, the ones that at least halve the remaining
    clockwise distance form the pool; when none does, the single entry
    closest to the target does, so each hop still makes Chord-like progress.
    """
    rem = clockwise(node.key, t, bits)
    ok = [e for e in cands if e.key not in excluded and e.key != node.key
          and shared_levels(e.peer.cluster_path, target_path) >= own]
    fast = [e for e in ok if 2 * clockwise(e.key, t, bits) <= rem]
    if fast or not ok:
        return fast
    return [min(ok, key=lambda e: (clockwise(e.key, t, bits), e.key))]


def next_hop(
    node: Node,
    target: RingKey | int,
    net: Overlay,
    pheromone: PheromoneTable | None = None,
    excluded: set[int] | None = None,
    hop_weight: float = 0.0,
    target_path: str | None = None,
    estimate: list | None = None,
):
    """Choose the next hop toward ``target`` or return ``Terminal``.

    Candidates come from :func:`_progress_pool`; the one minimising
    ``f = latency_ewma + heuristic`` wins, ties going to the stronger
    pheromone trail and then the lower key.  With an empty pool the first
    usable successor is taken.
    """
    t = target.value if isinstance(target, RingKey) else target
    if node.owns(t):
        return Terminal
    excluded = excluded or set()
    bits = net.config.bits
    if target_path is None:
        target_path = net.target_path(t)

    succ = next((e for e in node.table.successors if _usable(net, node, e, excluded)), None)
    if succ is not None and 0 < clockwise(node.key, t, bits) <= clockwise(node.key, succ.key, bits):
        if estimate is not None:
            estimate.append(PathEstimate(succ.indicators.latency_ewma, 0.0))
        return succ

    own = shared_levels(node.id.cluster_path, target_path)
    pool = _progress_pool(node, t, target_path, candidates(node.table, t, target_path), excluded, own, bits)
    best = None
    tpoint = key_to_point(RingKey(t, bits), net.config.side)
    for e in pool:
        lv = shared_levels(e.peer.cluster_path, target_path)
        g = e.indicators.latency_ewma
        hh = heuristic(node, e, t, target_path, net, tpoint)
        f = g + hh + hop_weight * (len(target_path) - lv)
        tau = pheromone.get(node.key, e.key) if pheromone is not None else 0.0
        rank = (f, -tau, e.key)
        if best is None or rank < best[0]:
            best = (rank, e, g, hh)
    if best is not None:
        if estimate is not None:
            estimate.append(PathEstimate(best[2], best[3]))
        return best[1]
    if succ is None:
        raise RoutingStuck(f"no usable entry at {node.id.key.hex}")
    if estimate is not None:
        estimate.append(PathEstimate(succ.indicators.latency_ewma, 0.0))
    return succ


def default_ttl(n: int) -> int:
    return 4 * max(1, math.ceil(math.log2(max(n, 2))))


def route(
    net,
    src: int,
    target: RingKey | int,
    ttl: int | None = None,
    record: bool = True,
    pheromone: PheromoneTable | None = None,
    rng=None,
    trace: bool = False,
    hop_weight: float = 0.0,
) -> Path:
    """Route from node ``src`` to the owner of ``target`` by repeated next_hop.

    The lookup ends at the first node that owns the target, or at a
    successor hand-off (see :func:`handoff`).  With ``record`` set, each
    hop's latency sample updates the sender's indicators and adjacency
    matrices.  Dead next hops cost a timeout-free
    retry: they are marked unavailable and skipped.
    """
    overlay: Overlay = getattr(net, "overlay", net)
    rng = rng if rng is not None else overlay.rng
    t = target.value if isinstance(target, RingKey) else target
    node = overlay.node(src)
    ttl = default_ttl(len(overlay)) if ttl is None else ttl
    tpath = overlay.target_path(t)
    path = Path([node.id])
    visited = {node.key}
    g_total = 0.0
    while True:
        excluded: set[int] = set()
        while True:
            est: list[PathEstimate] = []
            step = next_hop(node, t, overlay, pheromone, excluded, hop_weight, tpath, est)
            if step is Terminal:
                if record:
                    _cache_result(overlay, path, tpath)
                return path
            peer = overlay.nodes.get(step.key)
            if peer is not None and peer.alive:
                break
            if record:
                update_indicator(step, None, False)
            excluded.add(step.key)
        if path.hop_count >= ttl:
            raise TtlExceeded(f"{ttl} hops without reaching {RingKey(t, overlay.config.bits).hex}")
        lat = overlay.link.sample(node.id.position, peer.id.position, rng)
        if record:
            _record_hop(overlay, node, step, peer, lat)
        if trace:
            e = est[0]
            path.trace.append(HopRecord(path.hop_count + 1, peer.id.key.hex, g_total + e.g, e.h, g_total + e.g + e.h, lat))
        g_total += lat
        path.hops.append(peer.id)
        path.link_latencies.append(lat)
        path.total_latency += lat
        if peer.key in visited:
            raise RoutingStuck(f"loop through {peer.id.key.hex}")
        visited.add(peer.key)
        if handoff(node, peer, t, overlay):
            if record:
                _cache_result(overlay, path, tpath)
            return path
        node = peer


def handoff(node: Node, peer: Node, target: int, net: Overlay) -> bool:
    """True when ``peer`` is ``node``'s first live successor and the target
    lies on (node, peer]: the lookup ends at ``peer`` even if its own
    predecessor pointer is still stale."""
    bits = net.config.bits
    succ = next((e for e in node.table.successors if net.is_live(e.key)), None)
    return succ is not None and succ.key == peer.key and 0 < clockwise(node.key, target, bits) <= clockwise(node.key, peer.key, bits)


def _record_hop(net: Overlay, node: Node, entry: FingerEntry, peer: Node, lat: float) -> None:
    update_indicator(entry, lat, True)
    node.forwards += 1
    entry.indicators.load = min(1.0, entry.indicators.usage_count / max(node.forwards, 1))
    pa, pb = node.id.cluster_path, peer.id.cluster_path
    depth = min(len(pa), len(pb))
    first = next((i for i in range(depth) if pa[i] != pb[i]), None)
    if first is None:
        return
    a, b = node.id.position, peer.id.position
    dist = math.hypot(a.x - b.x, a.y - b.y)
    for level in range(first + 1, depth + 1):
        p, q = pa[:level], pb[:level]
        cp, cq = net.centroids[p], net.centroids[q]
        cdist = math.hypot(cp[0] - cq[0], cp[1] - cq[1])
        # Project the node-to-node sample onto the centroid-to-centroid distance.
        sample = lat * cdist / dist if dist > 0 else lat
        update_adjacency(node.matrix(level), p, q, sample, net.epoch)


def _cache_result(net: Overlay, path: Path, target_path: str) -> None:
    if path.hop_count == 0:
        return
    src = net.nodes.get(path.hops[0].key.value)
    if src is None:
        return
    if src.cache is None:
        src.cache = RouteCache()
    sp = src.id.cluster_path
    level = min(len(sp), len(target_path))
    cache_put(src.cache, sp[:level], target_path[:level], level, path.total_latency, net.epoch)


TRACE_HEADER = "hop,key,g,h,f,link_latency"


def trace_csv(path: Path, header: bool = True) -> str:
    lines = [TRACE_HEADER] if header else []
    for r in path.trace:
        lines.append(f"{r.index},{r.key},{r.g!r},{r.h!r},{r.f!r},{r.link_latency!r}")
    return "\n".join(lines) + ("\n" if lines else "")
