"""Deterministic discrete-event simulator around an overlay.

Events run in ``(time, sequence)`` order.  Messages are FEC frames whose
shards are lost independently; a frame is handed to its handler the moment
``k`` shards have arrived.  Separate seeded generators drive node
placement, link jitter, loss and churn so that one knob does not shift the
random stream of another.
"""
from __future__ import annotations

import heapq
import math
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable

from ..dht import Overlay, OverlayConfig, fail, join, leave, sibling_prefixes, stabilize
from ..errors import DuplicateKey, QueueOverflow, RoutingStuck, TtlExceeded
from ..geokey import GeoPoint
from ..route import Path, PheromoneTable, route
from .config import ChurnSchedule, SimConfig
from .fec import Shard, fec_decode, fec_encode
from .link import LinkModel


@dataclass(order=True)
class SimEvent:
    time: float
    sequence: int
    action: str = field(compare=False)  # deliver | timer | churn
    data: dict = field(compare=False, default_factory=dict)


@dataclass
class BroadcastResult:
    reached: int
    messages: int
    duplicates: int
    receipts: Counter


def uniform_positions(n: int, side: float, rng: random.Random) -> list[GeoPoint]:
    top = math.nextafter(side, 0.0)
    return [GeoPoint(min(rng.uniform(0, side), top), min(rng.uniform(0, side), top)) for _ in range(n)]


def link_from_config(config: SimConfig) -> LinkModel:
    return LinkModel(config.side, config.velocity, config.velocity_grid, config.jitter)


def overlay_config(config: SimConfig) -> OverlayConfig:
    return OverlayConfig(side=config.side, k=config.k, h=config.height, M=config.neighborhood, s=config.successors)


def poisson(rng: random.Random, lam: float) -> int:
    """Poisson draw by inversion, chunked so ``exp(-lam)`` never underflows."""
    n = 0
    while lam > 0:
        step = min(lam, 30.0)
        lam -= step
        u, p = rng.random(), math.exp(-step)
        cdf, j = p, 0
        while u > cdf:
            j += 1
            p *= step / j
            cdf += p
            if p == 0.0:
                break
        n += j
    return n


class Simulator:
    def __init__(self, config: SimConfig, positions: list[GeoPoint] | None = None, trace: bool = False):
        self.config = config
        s = config.seed
        self.rng = random.Random(f"{s}:control")
        self.link_rng = random.Random(f"{s}:link")
        self.loss_rng = random.Random(f"{s}:loss")
        self.churn_rng = random.Random(f"{s}:churn")
        self.link = link_from_config(config)
        if positions is None:
            positions = uniform_positions(config.nodes, config.side, random.Random(f"{s}:place"))
        self.overlay = Overlay.build(positions, overlay_config(config), self.link, seed=s)
        self.pheromone = PheromoneTable()
        self.now = 0.0
        self.metrics: Counter = Counter()
        self.trace_enabled = trace
        self.trace: list[tuple] = []
        self.handlers: dict[str, Callable] = {"bcast": self._on_broadcast}
        self._queue: list[SimEvent] = []
        self._seq = 0
        self._next_frame = 0
        self._partial: dict[tuple[int, int], list[Shard]] = {}
        self._done: set[tuple[int, int]] = set()
        self._bcast: dict[int, Counter] = {}
        self._bcast_sent: Counter = Counter()

    # event queue ------------------------------------------------------------
    def schedule(self, delay: float, action: str, **data) -> SimEvent:
        if delay < 0:
            raise ValueError("events cannot be scheduled in the past")
        if len(self._queue) >= self.config.queue_cap:
            raise QueueOverflow(f"event queue reached its cap of {self.config.queue_cap}")
        ev = SimEvent(self.now + delay, self._seq, action, data)
        self._seq += 1
        heapq.heappush(self._queue, ev)
        return ev

    def pending(self) -> int:
        return len(self._queue)

    def run(self, until: float | None = None) -> dict[str, int]:
        while self._queue and (until is None or self._queue[0].time <= until):
            ev = heapq.heappop(self._queue)
            self.now = ev.time
            if self.trace_enabled:
                self.trace.append((repr(ev.time), ev.sequence, ev.action, ev.data.get("src", ""), ev.data.get("dst", ""), ev.data.get("frame", "")))
            if ev.action == "deliver":
                self._deliver(ev.data)
            elif ev.action == "timer":
                ev.data["fn"](self)
            elif ev.action == "churn":
                self.churn_step(ev.data.get("schedule"))
            else:
                raise ValueError(f"unknown event action {ev.action!r}")
            self.metrics["events"] += 1
        if until is not None:
            self.now = max(self.now, until)
        return dict(sorted(self.metrics.items()))

    def trace_csv(self) -> str:
        rows = ["time,sequence,action,src,dst,frame"]
        rows += [",".join(str(c) for c in t) for t in self.trace]
        return "\n".join(rows) + "\n"

    # messaging --------------------------------------------------------------
    def send(self, src: int, dst: int, payload: bytes, k_shards: int | None = None, kind: str = "data", meta=None) -> int:
        """Fire-and-forget frame from ``src`` to ``dst``; returns its frame id."""
        k = k_shards or self.config.fec_shards
        fid = self._next_frame
        self._next_frame += 1
        frame = fec_encode(payload, k, fid)
        a = self.overlay.node(src).id.position
        b = self._position(dst)
        lat = self.link.sample(a, b, self.link_rng)
        self.metrics["messages"] += 1
        self.metrics["shards_sent"] += len(frame.shards)
        for shard in frame.all_shards():
            if self.loss_rng.random() < self.config.loss:
                self.metrics["shards_lost"] += 1
                continue
            self.schedule(lat, "deliver", src=src, dst=dst, frame=fid, shard=shard, kind=kind, meta=meta)
        return fid

    def _position(self, key: int) -> GeoPoint:
        n = self.overlay.nodes.get(key) or self.overlay.departed.get(key)
        if n is None:
            self.overlay.node(key)  # raises UnknownNode
        return n.id.position

    def _deliver(self, data: dict) -> None:
        dst, fid = data["dst"], data["frame"]
        tag = (dst, fid)
        if tag in self._done:
            return
        if not self.overlay.is_live(dst):
            self.metrics["shards_dropped"] += 1
            return
        buf = self._partial.setdefault(tag, [])
        buf.append(data["shard"])
        if len(buf) < buf[0].k:
            return
        del self._partial[tag]
        self._done.add(tag)
        payload = fec_decode(buf)
        self.metrics["frames_delivered"] += 1
        handler = self.handlers.get(data["kind"])
        if handler is not None:
            handler(dst, data["src"], payload, data["meta"])

    def frame_delivered(self, dst: int, frame_id: int) -> bool:
        return (dst, frame_id) in self._done

    # broadcast --------------------------------------------------------------
    def broadcast(self, src: int, payload: bytes = b"") -> BroadcastResult:
        """Hierarchical flood from ``src``; runs the queue until it drains.

        A node responsible for cluster ``C`` sends one frame to a contact in
        every sibling cluster below ``C`` on its own path, handing each
        contact responsibility for that sibling.  Inside its leaf cluster it
        splits the remaining members Chord-style: the member in the middle
        of its list takes the upper half, and so on.
        """
        bid = self._next_frame
        self._bcast[bid] = Counter({src: 1})
        self._bcast_sent[bid] = 0
        self._forward(src, bid, 0, None, payload)
        self.run()
        receipts = self._bcast.pop(bid)
        live = set(self.overlay.directory.keys)
        return BroadcastResult(
            reached=sum(1 for v in receipts if v in live),
            messages=self._bcast_sent.pop(bid),
            duplicates=sum(c - 1 for c in receipts.values()),
            receipts=receipts,
        )

    def _bsend(self, src: int, dst: int, bid: int, scope: int, leaf, payload: bytes) -> None:
        self._bcast_sent[bid] += 1
        self.send(src, dst, payload, kind="bcast", meta=(bid, scope, leaf))

    def _forward(self, key: int, bid: int, scope: int, leaf: tuple | None, payload: bytes) -> None:
        net = self.overlay
        node = net.nodes[key]
        if leaf is None:
            path = node.id.cluster_path
            for level in range(scope + 1, len(path) + 1):
                for q in sibling_prefixes(path, level, net.config.k):
                    contact = self._contact(node, q)
                    if contact is not None:
                        self._bsend(key, contact, bid, level, None, payload)
            members = net.directory.members(path)
            i = members.index(key)
            leaf = tuple(members[i + 1:] + members[:i])
        rest = list(leaf)
        while rest:
            mid = len(rest) // 2
            self._bsend(key, rest[mid], bid, scope, tuple(rest[mid + 1:]), payload)
            rest = rest[:mid]

    def _contact(self, node, prefix: str) -> int | None:
        known = [e for e in node.table.entries() if e.peer.cluster_path.startswith(prefix) and self.overlay.is_live(e.key)]
        if known:
            return min(known, key=lambda e: (e.indicators.latency_ewma, e.key)).key
        nid = self.overlay.directory.owner_in(prefix, node.key)
        return None if nid is None else nid.key.value

    def _on_broadcast(self, dst: int, src: int, payload: bytes, meta) -> None:
        bid, scope, leaf = meta
        receipts = self._bcast.get(bid)
        if receipts is None:
            return
        receipts[dst] += 1
        if receipts[dst] == 1:
            self._forward(dst, bid, scope, leaf, payload)

    # lookups ----------------------------------------------------------------
    def lookup(self, src: int, target: int, record: bool = True) -> Path:
        return route(self.overlay, src, target, record=record, pheromone=self.pheromone, rng=self.link_rng)

    # churn ------------------------------------------------------------------
    def churn_step(self, schedule: ChurnSchedule | None = None) -> dict[str, int]:
        """One epoch of Poisson joins, graceful leaves and silent failures."""
        sched = schedule or self.config.churn
        rng, net = self.churn_rng, self.overlay
        counts = {"joined": 0, "join_failed": 0, "left": 0, "failed": 0}
        for _ in range(poisson(rng, sched.join)):
            for _attempt in range(16):
                p = uniform_positions(1, self.config.side, rng)[0]
                try:
                    join(net, p, bootstrap=rng.choice(net.directory.keys) if len(net) else None)
                except DuplicateKey:
                    continue
                except (RoutingStuck, TtlExceeded):
                    counts["join_failed"] += 1
                    break
                counts["joined"] += 1
                break
        for action, name, rate in ((leave, "left", sched.leave), (fail, "failed", sched.fail)):
            for _ in range(poisson(rng, rate)):
                if len(net) <= 1:
                    break
                action(net, rng.choice(net.directory.keys))
                counts[name] += 1
        for name, v in counts.items():
            self.metrics[name] += v
        return counts

    def fail_fraction(self, fraction: float) -> list[int]:
        keys = list(self.overlay.directory.keys)
        victims = sorted(self.churn_rng.sample(keys, round(fraction * len(keys))))
        for v in victims:
            fail(self.overlay, v)
        self.metrics["failed"] += len(victims)
        return victims

    def stabilize_round(self) -> None:
        for node in self.overlay.live():
            stabilize(self.overlay, node)

    def epoch_step(self, schedule: ChurnSchedule | None = None) -> dict[str, int]:
        counts = self.churn_step(schedule)
        self.stabilize_round()
        self.pheromone.evaporate()
        self.overlay.epoch += 1
        return counts
