"""Location-agnostic reference overlays built on the same nodes and links.

``FlatChord`` hashes node addresses onto an ``m``-bit ring and keeps the
distinct owners of ``id + 2**i``; ``XorOverlay`` gives each node a 160-bit
SHA-1 id and one contact per XOR-distance bucket.  Both route greedily and
know nothing about geography.
"""
from __future__ import annotations

import bisect
import hashlib
import random
from dataclasses import dataclass

from ..dht import NodeId
from ..errors import TtlExceeded, UnknownNode
from ..geokey import GeoPoint, RingKey, clockwise
from ..route import Path, default_ttl


def hashed_id(label: str, bits: int) -> int:
    digest = int.from_bytes(hashlib.sha1(label.encode()).digest(), "big")
    return digest >> (160 - bits) if bits <= 160 else digest


@dataclass
class _Peer:
    id: NodeId
    fingers: list[int]


class _Base:
    bits: int

    def __init__(self, positions: list[GeoPoint], link, ids: list[int], bits: int):
        if len(set(ids)) != len(ids):
            raise ValueError("baseline ids must be distinct")
        self.link = link
        self.bits = bits
        self.keys = sorted(ids)
        self.peers: dict[int, _Peer] = {}
        self.by_addr: dict[int, int] = {}
        for addr, (p, v) in enumerate(zip(positions, ids)):
            self.peers[v] = _Peer(NodeId(RingKey(v, bits), addr, p, ""), [])
            self.by_addr[addr] = v

    def __len__(self) -> int:
        return len(self.keys)

    def id_of(self, addr: int) -> int:
        try:
            return self.by_addr[addr]
        except KeyError:
            raise UnknownNode(str(addr)) from None

    def _path(self, hops: list[int], rng: random.Random | None) -> Path:
        path = Path([self.peers[hops[0]].id])
        for a, b in zip(hops, hops[1:]):
            pa, pb = self.peers[a].id.position, self.peers[b].id.position
            lat = self.link.sample(pa, pb, rng) if rng is not None else self.link.base(pa, pb)
            path.hops.append(self.peers[b].id)
            path.link_latencies.append(lat)
            path.total_latency += lat
        return path


class FlatChord(_Base):
    """Classic Chord: successor pointer plus fingers ``successor(id + 2**i)``."""

    def __init__(self, positions, link, bits: int = 32, ids: list[int] | None = None):
        if ids is None:
            ids = [hashed_id(f"node-{i}", bits) for i in range(len(positions))]
        super().__init__(list(positions), link, ids, bits)
        for v, peer in self.peers.items():
            fingers = []
            for i in range(bits):
                f = self.owner((v + (1 << i)) % (1 << bits))
                if f != v and f not in fingers:
                    fingers.append(f)
            peer.fingers = fingers

    def owner(self, target: int) -> int:
        i = bisect.bisect_left(self.keys, target)
        return self.keys[i % len(self.keys)]

    def successor(self, v: int) -> int:
        i = bisect.bisect_right(self.keys, v)
        return self.keys[i % len(self.keys)]

    def route(self, src: int, target: int, ttl: int | None = None, rng: random.Random | None = None) -> Path:
        ttl = default_ttl(len(self)) if ttl is None else ttl
        bits = self.bits
        cur, hops = src, [src]
        while self.owner(target) != cur:
            succ = self.successor(cur)
            if 0 < clockwise(cur, target, bits) <= clockwise(cur, succ, bits):
                nxt = succ
            else:
                span = clockwise(cur, target, bits)
                ahead = [f for f in self.peers[cur].fingers if 0 < clockwise(cur, f, bits) <= span]
                nxt = max(ahead, key=lambda f: clockwise(cur, f, bits)) if ahead else succ
            if len(hops) > ttl:
                raise TtlExceeded(f"flat Chord lookup exceeded {ttl} hops")
            hops.append(nxt)
            cur = nxt
        return self._path(hops, rng)


class XorOverlay(_Base):
    """Kademlia-style routing with one contact per XOR-distance bucket."""

    def __init__(self, positions, link, seed: int = 0, ids: list[int] | None = None, bits: int = 160):
        if ids is None:
            ids = [hashed_id(f"node-{i}", bits) for i in range(len(positions))]
        super().__init__(list(positions), link, ids, bits)
        rng = random.Random(seed)
        for v, peer in self.peers.items():
            buckets: dict[int, list[int]] = {}
            for u in self.keys:
                if u != v:
                    buckets.setdefault((u ^ v).bit_length() - 1, []).append(u)
            peer.fingers = [rng.choice(buckets[b]) for b in sorted(buckets)]

    def owner(self, target: int) -> int:
        return min(self.keys, key=lambda u: u ^ target)

    def route(self, src: int, target: int, ttl: int | None = None, rng: random.Random | None = None) -> Path:
        ttl = default_ttl(len(self)) if ttl is None else ttl
        cur, hops = src, [src]
        while True:
            best = min(self.peers[cur].fingers, key=lambda u: u ^ target, default=cur)
            if best ^ target >= cur ^ target:
                break
            if len(hops) > ttl:
                raise TtlExceeded(f"XOR lookup exceeded {ttl} hops")
            hops.append(best)
            cur = best
        return self._path(hops, rng)


def baseline_flat_chord_route(net: FlatChord, src: int, target: int, rng=None) -> Path:
    return net.route(src, target, rng=rng)


def baseline_xor_route(net: XorOverlay, src: int, target: int, rng=None) -> Path:
    return net.route(src, target, rng=rng)


def evenly_spaced_ids(n: int, bits: int) -> list[int]:
    step = (1 << bits) // n
    return [i * step for i in range(n)]
