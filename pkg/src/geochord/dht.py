"""Node state and hierarchical ring routing tables.

Every node keeps one finger bucket per cluster level.  Level ``i`` of a
node holds at most ``ceil(i * log2 k)`` fingers; each one is an
exponentially spaced clockwise key offset resolved to the first live peer,
at or after the offset key, among the node's level-``i`` sibling clusters
(the other children of its level ``i-1`` cluster).  On top of the buckets
a node keeps ``M`` latency-nearest neighbours and an ``s``-entry successor
list on the global key ring.
"""
from __future__ import annotations

import bisect
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

from . import cluster as clust
from .errors import DuplicateKey, RoutingStuck, TtlExceeded, UnknownNode
from .geokey import GeoPoint, RingKey, clockwise, point_to_key, ring_distance

ALPHA = 0.2
MIN_SUCCESSORS = 3
JOIN_ATTEMPTS = 3

Latency = Callable[[GeoPoint, GeoPoint], float]


@dataclass(frozen=True)
class NodeId:
    key: RingKey
    addr: int
    position: GeoPoint
    cluster_path: str


@dataclass
class HeuristicIndicators:
    latency_ewma: float = 0.0
    availability: float = 1.0
    load: float = 0.0
    usage_count: int = 0
    samples: int = 0


@dataclass(eq=False)
class FingerEntry:
    peer: NodeId
    indicators: HeuristicIndicators = field(default_factory=HeuristicIndicators)

    @property
    def key(self) -> int:
        return self.peer.key.value


def level_capacity(level: int, k: int) -> int:
    """``ceil(log2(k**level))`` computed without float rounding surprises."""
    if level <= 0:
        return 0
    exact = level * math.log2(k)
    return int(math.ceil(exact - 1e-9))


def finger_bound(k: int, h: int) -> int:
    return sum(level_capacity(i, k) for i in range(h + 1))


def default_offsets(level: int, k: int, bits: int) -> list[int]:
    return [1 << (bits - j) for j in range(1, level_capacity(level, k) + 1)]


def shared_levels(a: str, b: str) -> int:
    n = 0
    for x, y in zip(a, b):
        if x != y:
            break
        n += 1
    return n


@dataclass
class RoutingTable:
    owner: NodeId
    levels: list[list[FingerEntry]]
    neighbors: list[FingerEntry] = field(default_factory=list)
    successors: list[FingerEntry] = field(default_factory=list)
    offsets: list[list[int]] = field(default_factory=list)
    slots: list[list[NodeId | None]] = field(default_factory=list)
    predecessor: NodeId | None = None
    refresh_cursor: int = 0

    def fingers(self) -> Iterator[FingerEntry]:
        for bucket in self.levels:
            yield from bucket

    def finger_count(self) -> int:
        return sum(len(b) for b in self.levels)

    def entry_count(self) -> int:
        return self.finger_count() + len(self.neighbors) + len(self.successors)

    def entries(self) -> list[FingerEntry]:
        """Distinct entries (one per peer) in fingers, neighbours, successors order."""
        seen: set[int] = set()
        out = []
        for e in [*self.fingers(), *self.neighbors, *self.successors]:
            if e.key not in seen:
                seen.add(e.key)
                out.append(e)
        return out

    def find(self, key: int) -> FingerEntry | None:
        for e in [*self.fingers(), *self.neighbors, *self.successors]:
            if e.key == key:
                return e
        return None

    @property
    def successor(self) -> FingerEntry | None:
        return self.successors[0] if self.successors else None

    def dump(self) -> str:
        """One line per entry: level, peer key hex, latency, availability, load, usage."""
        lines = []

        def row(tag, e: FingerEntry):
            ind = e.indicators
            lines.append(
                f"{tag},{e.peer.key.hex},{ind.latency_ewma:.6f},{ind.availability:.6f},"
                f"{ind.load:.6f},{ind.usage_count}"
            )

        for i, bucket in enumerate(self.levels):
            for e in bucket:
                row(str(i), e)
        for e in self.neighbors:
            row("n", e)
        for e in self.successors:
            row("s", e)
        return "\n".join(lines)


@dataclass
class AdjacencyMatrix:
    """EWMA latencies between the clusters of one level, filled lazily."""

    level: int
    entries: dict[tuple[str, str], float] = field(default_factory=dict)
    staleness: dict[tuple[str, str], int] = field(default_factory=dict)

    def get(self, p: str, q: str, epoch: int | None = None, window: int | None = None) -> float | None:
        if p == q:
            return 0.0
        value = self.entries.get((p, q))
        if value is None:
            return None
        if epoch is not None and window is not None and epoch - self.staleness[(p, q)] > window:
            return None
        return value

    def row(self, p: str) -> dict[str, float]:
        return {q: v for (a, q), v in self.entries.items() if a == p}


def update_indicator(entry: FingerEntry, rtt_sample: float | None, success: bool, alpha: float = ALPHA) -> None:
    ind = entry.indicators
    if success:
        if rtt_sample is None or rtt_sample < 0:
            raise ValueError("successful contact needs a non-negative rtt sample")
        if ind.samples == 0:
            ind.latency_ewma = float(rtt_sample)
        else:
            ind.latency_ewma = alpha * rtt_sample + (1 - alpha) * ind.latency_ewma
        ind.samples += 1
    ind.availability = alpha * (1.0 if success else 0.0) + (1 - alpha) * ind.availability
    ind.usage_count += 1


def update_adjacency(matrix: AdjacencyMatrix, p: str, q: str, latency_sample: float, epoch: int = 0, alpha: float = ALPHA) -> None:
    if p == q:
        return
    if latency_sample < 0:
        raise ValueError("latency sample must be non-negative")
    for key in ((p, q), (q, p)):
        prev = matrix.entries.get(key)
        matrix.entries[key] = latency_sample if prev is None else alpha * latency_sample + (1 - alpha) * prev
        matrix.staleness[key] = epoch


# --- directory of live peers --------------------------------------------------


class Directory:
    """Sorted view of live peers, globally and per cluster prefix."""

    def __init__(self, bits: int):
        self.bits = bits
        self.keys: list[int] = []
        self.ids: dict[int, NodeId] = {}
        self.by_prefix: dict[str, list[int]] = {}

    def __len__(self) -> int:
        return len(self.keys)

    def __contains__(self, key: int) -> bool:
        return key in self.ids

    def add(self, nid: NodeId) -> None:
        v = nid.key.value
        if v in self.ids:
            raise DuplicateKey(nid.key.hex)
        self.ids[v] = nid
        bisect.insort(self.keys, v)
        path = nid.cluster_path
        for i in range(len(path) + 1):
            bisect.insort(self.by_prefix.setdefault(path[:i], []), v)

    def remove(self, nid: NodeId) -> None:
        v = nid.key.value
        if v not in self.ids:
            raise UnknownNode(nid.key.hex)
        del self.ids[v]
        self.keys.pop(bisect.bisect_left(self.keys, v))
        path = nid.cluster_path
        for i in range(len(path) + 1):
            lst = self.by_prefix[path[:i]]
            lst.pop(bisect.bisect_left(lst, v))

    def members(self, prefix: str) -> list[int]:
        return self.by_prefix.get(prefix, [])

    @staticmethod
    def _first_at_or_after(keys: list[int], value: int) -> int | None:
        if not keys:
            return None
        i = bisect.bisect_left(keys, value)
        return keys[i] if i < len(keys) else keys[0]

    def owner(self, value: int) -> NodeId | None:
        """First live peer clockwise at or after ``value``."""
        v = self._first_at_or_after(self.keys, value)
        return None if v is None else self.ids[v]

    def owner_in(self, prefix: str, value: int) -> NodeId | None:
        v = self._first_at_or_after(self.members(prefix), value)
        return None if v is None else self.ids[v]

    def successors(self, value: int, s: int) -> list[NodeId]:
        """Up to ``s`` live peers strictly clockwise after ``value``."""
        if not self.keys:
            return []
        i = bisect.bisect_right(self.keys, value)
        out = []
        for j in range(min(s, len(self.keys))):
            v = self.keys[(i + j) % len(self.keys)]
            if v == value:
                break
            out.append(self.ids[v])
        return out

    def predecessor(self, value: int) -> NodeId | None:
        if not self.keys:
            return None
        i = bisect.bisect_left(self.keys, value) - 1
        return self.ids[self.keys[i]]

    def neighbourhood(self, value: int, span: int) -> list[NodeId]:
        """``span`` peers on each side of ``value`` on the key ring."""
        n = len(self.keys)
        if n == 0:
            return []
        i = bisect.bisect_left(self.keys, value)
        picks = {self.keys[(i + d) % n] for d in range(-span, span + 1)}
        picks.discard(value)
        return [self.ids[v] for v in sorted(picks)]


# --- table construction -------------------------------------------------------


def sibling_prefixes(path: str, level: int, k: int) -> list[str]:
    parent = path[: level - 1]
    own = path[level - 1]
    return [parent + clust.DIGITS[d] for d in range(k) if clust.DIGITS[d] != own]


def resolve_in_siblings(directory: Directory, path: str, level: int, k: int, target: int) -> NodeId | None:
    """First live peer clockwise from ``target`` among the level's sibling clusters."""
    best, best_d = None, None
    for prefix in sibling_prefixes(path, level, k):
        nid = directory.owner_in(prefix, target)
        if nid is None:
            continue
        d = clockwise(target, nid.key.value, directory.bits)
        if best_d is None or d < best_d or (d == best_d and nid.key.value < best.key.value):
            best, best_d = nid, d
    return best


def successor_count(n: int) -> int:
    return max(MIN_SUCCESSORS, math.ceil(math.log2(n))) if n > 1 else MIN_SUCCESSORS


def build_routing_table(
    self_id: NodeId,
    directory: Directory,
    M: int,
    s: int,
    rng: random.Random,
    latency: Latency,
    k: int,
    h: int,
    offsets: list[list[int]] | None = None,
    neighbor_score: Callable[[NodeId], float] | None = None,
    sample_size: int = 8,
) -> RoutingTable:
    """Build the table of ``self_id`` against the peers in ``directory``.

    ``offsets`` overrides the per-level clockwise finger offsets; entries
    beyond a level's capacity are ignored.  ``neighbor_score`` ranks
    neighbour candidates (default: measured latency), ties going to the
    lower peer key.
    """
    bits = self_id.key.bits
    me = self_id.key.value
    path = self_id.cluster_path
    cache: dict[int, FingerEntry] = {}

    def entry(nid: NodeId) -> FingerEntry:
        e = cache.get(nid.key.value)
        if e is None:
            e = FingerEntry(nid)
            update_indicator(e, latency(self_id.position, nid.position), True)
            e.indicators.usage_count = 0
            cache[nid.key.value] = e
        return e

    levels: list[list[FingerEntry]] = [[] for _ in range(h + 1)]
    used: list[list[int]] = [[] for _ in range(h + 1)]
    slots: list[list[NodeId | None]] = [[] for _ in range(h + 1)]
    for i in range(1, min(h, len(path)) + 1):
        cap = level_capacity(i, k)
        offs = default_offsets(i, k, bits) if offsets is None else list(offsets[i])[:cap]
        used[i] = offs
        seen: set[int] = set()
        for off in offs:
            nid = resolve_in_siblings(directory, path, i, k, (me + off) % (1 << bits))
            slots[i].append(nid)
            if nid is None or nid.key.value == me or nid.key.value in seen:
                continue
            seen.add(nid.key.value)
            levels[i].append(entry(nid))

    succ = [entry(nid) for nid in directory.successors(me, s)]

    pool: dict[int, NodeId] = {}
    for v in directory.members(path):
        pool[v] = directory.ids[v]
    for nid in directory.neighbourhood(me, s):
        pool[nid.key.value] = nid
    others = [v for v in directory.keys if v != me]
    for v in rng.sample(others, min(sample_size, len(others))):
        pool[v] = directory.ids[v]
    pool.pop(me, None)
    score = neighbor_score or (lambda nid: latency(self_id.position, nid.position))
    ranked = sorted(pool.values(), key=lambda nid: (score(nid), nid.key.value))
    neighbors = [entry(nid) for nid in ranked[:M]]

    pred = directory.predecessor(me) if len(directory) > 1 else None
    if pred is not None and pred.key.value == me:
        pred = None
    return RoutingTable(self_id, levels, neighbors, succ, used, slots, predecessor=pred)


# --- node and overlay ---------------------------------------------------------


@dataclass
class OverlayConfig:
    side: float = 1000.0
    bits: int = 32
    k: int = 2
    h: int = 5
    M: int = 4
    s: int | None = None
    n_min: int = 4
    cache_window: int = 10


@dataclass(eq=False)
class Node:
    id: NodeId
    table: RoutingTable
    alive: bool = True
    matrices: dict[int, AdjacencyMatrix] = field(default_factory=dict)
    velocity_prior: float = 1.0
    sent: list[int] = field(default_factory=list)
    forwards: int = 0
    cache: object = None
    swarm: object = None

    @property
    def key(self) -> int:
        return self.id.key.value

    def matrix(self, level: int) -> AdjacencyMatrix:
        m = self.matrices.get(level)
        if m is None:
            m = self.matrices[level] = AdjacencyMatrix(level)
        return m

    def owns(self, target: int) -> bool:
        """True when ``target`` lies on the arc (predecessor, self]."""
        pred = self.table.predecessor
        if pred is None:
            return True
        bits = self.id.key.bits
        return 0 < clockwise(pred.key.value, target, bits) <= clockwise(pred.key.value, self.key, bits) or target == self.key


class Overlay:
    """The set of overlay nodes, their tables and the shared cluster tree.

    ``link`` supplies ``base(a, b)`` (jitter-free latency) and
    ``sample(a, b, rng)``.
    """

    def __init__(self, config: OverlayConfig, tree: clust.ClusterTree, link, rng: random.Random):
        self.config = config
        self.tree = tree
        self.link = link
        self.rng = rng
        self.nodes: dict[int, Node] = {}
        self.departed: dict[int, Node] = {}
        self.directory = Directory(config.bits)
        self.centroids = {n.prefix: n.centroid for n in tree.nodes()}
        self.epoch = 0
        self._next_addr = 0
        self._target_paths: dict[int, str] = {}
        self.s = config.s or MIN_SUCCESSORS

    # construction ---------------------------------------------------------
    @classmethod
    def build(cls, positions: Iterable[GeoPoint], config: OverlayConfig, link, seed: int = 0) -> "Overlay":
        import numpy as np

        pts = list(positions)
        if not pts:
            raise ValueError("an overlay needs at least one node")
        tree = clust.build_hierarchy(np.array([[p.x, p.y] for p in pts]), config.k, config.h, seed=seed, n_min=config.n_min)
        net = cls(config, tree, link, random.Random(seed))
        net.s = config.s or successor_count(len(pts))
        paths = clust.assign_paths(tree, np.array([[p.x, p.y] for p in pts]))
        for p, path in zip(pts, paths):
            nid = net._make_id(p, path)
            if nid.key.value in net.directory:
                continue
            net.directory.add(nid)
        for v in list(net.directory.keys):
            nid = net.directory.ids[v]
            net.nodes[v] = net._make_node(nid)
        return net

    def _make_id(self, p: GeoPoint, path: str | None = None) -> NodeId:
        key = point_to_key(p, self.config.side, self.config.bits)
        if path is None:
            path = clust.cluster_path(self.tree, p)
        nid = NodeId(key, self._next_addr, p, path)
        self._next_addr += 1
        return nid

    def latency(self, a: GeoPoint, b: GeoPoint) -> float:
        return self.link.base(a, b)

    def make_table(self, nid: NodeId, **kw) -> RoutingTable:
        c = self.config
        return build_routing_table(nid, self.directory, c.M, self.s, self.rng, self.latency, c.k, c.h, **kw)

    def _make_node(self, nid: NodeId) -> Node:
        table = self.make_table(nid)
        node = Node(nid, table)
        node.velocity_prior = self.link.mean_velocity()
        return node

    # queries ----------------------------------------------------------------
    def live(self) -> list[Node]:
        return [self.nodes[v] for v in self.directory.keys]

    def __len__(self) -> int:
        return len(self.directory)

    def node(self, key: int) -> Node:
        try:
            return self.nodes[key]
        except KeyError:
            raise UnknownNode(format(key, "x")) from None

    def is_live(self, key: int) -> bool:
        n = self.nodes.get(key)
        return n is not None and n.alive

    def owner(self, target: int) -> Node:
        nid = self.directory.owner(target)
        if nid is None:
            raise UnknownNode("empty overlay")
        return self.nodes[nid.key.value]

    def target_path(self, target: int) -> str:
        path = self._target_paths.get(target)
        if path is None:
            from .geokey import key_to_point

            path = clust.cluster_path(self.tree, key_to_point(RingKey(target, self.config.bits), self.config.side))
            if len(self._target_paths) > 200_000:
                self._target_paths.clear()
            self._target_paths[target] = path
        return path

    def successor_ring(self) -> list[int]:
        """Keys visited by following successor pointers from the lowest key."""
        if not self.directory.keys:
            return []
        start = self.directory.keys[0]
        out, cur = [start], start
        for _ in range(len(self.nodes) + 1):
            succ = self.nodes[cur].table.successor
            nxt = cur if succ is None else succ.key
            if nxt == start:
                break
            out.append(nxt)
            cur = nxt
        return out


# --- membership changes -------------------------------------------------------


def _set_successors(net: Overlay, node: Node, nids: list[NodeId]) -> None:
    old = {e.key: e for e in node.table.successors}
    out = []
    for nid in nids:
        if nid.key.value == node.key or nid.key.value in {e.key for e in out}:
            continue
        e = old.get(nid.key.value) or node.table.find(nid.key.value)
        if e is None:
            e = FingerEntry(nid)
            update_indicator(e, net.latency(node.id.position, nid.position), True)
            e.indicators.usage_count = 0
        out.append(e)
        if len(out) == net.s:
            break
    node.table.successors = out


def join(net: Overlay, position: GeoPoint, bootstrap: int | None = None) -> Node:
    """Add a node at ``position``; returns it.

    The newcomer asks a live peer to route to its own key, which yields its
    successor, then builds its table and notifies successor and predecessor.
    A lookup that fails on stale pointers is retried from other peers, up
    to ``JOIN_ATTEMPTS`` in all; the last failure propagates.
    """
    from .route import route

    nid = net._make_id(position)
    if nid.key.value in net.directory:
        raise DuplicateKey(nid.key.hex)
    succ_node = None
    if len(net.directory):
        start = bootstrap if bootstrap is not None else net.rng.choice(net.directory.keys)
        for attempt in range(JOIN_ATTEMPTS):
            try:
                path = route(net, start, nid.key, record=False)
                break
            except (RoutingStuck, TtlExceeded):
                if attempt == JOIN_ATTEMPTS - 1:
                    raise
                start = net.rng.choice(net.directory.keys)
        succ_node = net.nodes[path.hops[-1].key.value]
    net.directory.add(nid)
    node = Node(nid, net.make_table(nid), velocity_prior=net.link.mean_velocity())
    net.nodes[nid.key.value] = node
    net.departed.pop(nid.key.value, None)
    if succ_node is not None:
        succ_node.table.predecessor = nid
        pred = net.nodes[node.table.predecessor.key.value] if node.table.predecessor else None
        if pred is not None and pred is not node:
            _set_successors(net, pred, [nid] + [e.peer for e in pred.table.successors])
    return node


def leave(net: Overlay, key: int) -> None:
    """Graceful departure: successor and predecessor are told before removal."""
    node = net.nodes.get(key)
    if node is None or not node.alive:
        raise UnknownNode(format(key, "x"))
    succ = node.table.successor
    pred = node.table.predecessor
    _remove(net, node)
    if succ is not None and net.is_live(succ.key):
        net.nodes[succ.key].table.predecessor = pred if pred is not None and pred.key.value != succ.key else None
    if pred is not None and net.is_live(pred.key.value):
        p = net.nodes[pred.key.value]
        rest = [e.peer for e in p.table.successors if e.key != key]
        _set_successors(net, p, rest + [e.peer for e in node.table.successors if e.key != pred.key.value])


def fail(net: Overlay, key: int) -> None:
    """Silent failure; peers find out through stabilisation or timeouts."""
    node = net.nodes.get(key)
    if node is None or not node.alive:
        raise UnknownNode(format(key, "x"))
    _remove(net, node)


def _remove(net: Overlay, node: Node) -> None:
    node.alive = False
    net.directory.remove(node.id)
    del net.nodes[node.key]
    net.departed[node.key] = node


def stabilize(net: Overlay, node: Node) -> None:
    """One periodic repair round for ``node``.

    Drops dead successors, refreshes the successor list from the first live
    successor, notifies that successor, and re-resolves one finger slot.
    """
    live = [e for e in node.table.successors if net.is_live(e.key)]
    if not live:
        nid = net.directory.successors(node.key, 1)
        live_ids = nid
    else:
        live_ids = [e.peer for e in live]
    if live_ids:
        first = net.nodes[live_ids[0].key.value]
        _set_successors(net, node, [first.id] + [e.peer for e in first.table.successors])
        # Chord notify: first adopts node as predecessor when it is closer.
        pred = first.table.predecessor
        bits = net.config.bits
        if pred is None or not net.is_live(pred.key.value) or (
            0 < clockwise(pred.key.value, node.key, bits) < clockwise(pred.key.value, first.key, bits)
        ):
            first.table.predecessor = node.id if first is not node else None
    else:
        node.table.successors = []
    if node.table.predecessor is not None and not net.is_live(node.table.predecessor.key.value):
        node.table.predecessor = None if len(net) == 1 else node.table.predecessor
    _refresh_one_finger(net, node)
    node.table.neighbors = [e for e in node.table.neighbors if net.is_live(e.key)] or node.table.neighbors


def _refresh_one_finger(net: Overlay, node: Node) -> None:
    table = node.table
    slots = [(i, j) for i, peers in enumerate(table.slots) for j in range(len(peers))]
    if not slots:
        return
    i, j = slots[table.refresh_cursor % len(slots)]
    table.refresh_cursor += 1
    target = (node.key + table.offsets[i][j]) % (1 << net.config.bits)
    table.slots[i][j] = resolve_in_siblings(net.directory, node.id.cluster_path, i, net.config.k, target)
    _rebuild_bucket(net, node, i)


def _rebuild_bucket(net: Overlay, node: Node, level: int) -> None:
    out: list[FingerEntry] = []
    seen: set[int] = set()
    for nid in node.table.slots[level]:
        if nid is None or nid.key.value == node.key or nid.key.value in seen:
            continue
        seen.add(nid.key.value)
        e = node.table.find(nid.key.value)
        if e is None:
            e = FingerEntry(nid)
            update_indicator(e, net.latency(node.id.position, nid.position), True)
            e.indicators.usage_count = 0
        out.append(e)
    node.table.levels[level] = out


# --- candidate ordering -------------------------------------------------------


def candidates(table: RoutingTable, target: RingKey | int, target_path: str = "") -> list[FingerEntry]:
    """Entries on the clockwise arc (self, target], best first.

    Order: deepest shared cluster prefix with the target, then ring distance
    to the target, then peer key.
    """
    bits = table.owner.key.bits
    t = target.value if isinstance(target, RingKey) else target
    me = table.owner.key.value
    span = clockwise(me, t, bits)
    if span == 0:
        return []
    tkey = RingKey(t, bits)
    out = [e for e in table.entries() if 0 < clockwise(me, e.key, bits) <= span]
    out.sort(key=lambda e: (-shared_levels(e.peer.cluster_path, target_path), ring_distance(e.peer.key, tkey), e.key))
    return out
