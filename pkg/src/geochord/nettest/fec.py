"""Systematic single-parity erasure code over equal-length shards.

A payload is zero-padded to a multiple of ``k`` bytes, cut into ``k``
data shards, and one parity shard (the XOR of all data shards) is
appended.  Any ``k`` of the ``k + 1`` shards recover the payload.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from ..errors import UnrecoverableFrame


@dataclass(frozen=True)
class Shard:
    frame_id: int
    index: int  # 0..k-1 data, k parity
    k: int
    length: int  # payload length before padding
    data: bytes

    @property
    def is_parity(self) -> bool:
        return self.index == self.k


@dataclass(frozen=True)
class FecFrame:
    frame_id: int
    k: int
    length: int
    shards: tuple[bytes, ...]

    @property
    def r(self) -> int:
        return len(self.shards) - self.k

    def shard(self, index: int) -> Shard:
        return Shard(self.frame_id, index, self.k, self.length, self.shards[index])

    def all_shards(self) -> list[Shard]:
        return [self.shard(i) for i in range(len(self.shards))]


def _xor(blocks: Iterable[bytes], size: int) -> bytes:
    acc = 0
    for b in blocks:
        acc ^= int.from_bytes(b, "little")
    return acc.to_bytes(size, "little")


def fec_encode(payload: bytes, k: int, frame_id: int = 0) -> FecFrame:
    if k < 1:
        raise ValueError("k must be at least 1")
    size = max(1, -(-len(payload) // k))
    padded = bytes(payload).ljust(size * k, b"\0")
    data = [padded[i * size:(i + 1) * size] for i in range(k)]
    return FecFrame(frame_id, k, len(payload), tuple(data) + (_xor(data, size),))


def fec_decode(shards: Iterable[Shard]) -> bytes:
    """Reassemble a payload from any ``k`` distinct shards of one frame."""
    got: dict[int, Shard] = {}
    for s in shards:
        got.setdefault(s.index, s)
    if not got:
        raise UnrecoverableFrame("no shards")
    first = next(iter(got.values()))
    k, length = first.k, first.length
    if any(s.frame_id != first.frame_id or s.k != k for s in got.values()):
        raise ValueError("shards belong to different frames")
    missing = [i for i in range(k) if i not in got]
    if len(missing) > 1 or (missing and k not in got):
        raise UnrecoverableFrame(f"{k + 1 - len(got)} of {k + 1} shards missing")
    size = len(first.data)
    data = {i: got[i].data for i in range(k) if i in got}
    if missing:
        # The lost data shard is the XOR of every surviving shard, parity included.
        data[missing[0]] = _xor((s.data for s in got.values()), size)
    return b"".join(data[i] for i in range(k))[:length]


def frame_delivery_probability(k: int, loss: float, r: int = 1) -> float:
    """Probability that at most ``r`` of ``k + r`` independent shards are lost."""
    from math import comb

    n = k + r
    return sum(comb(n, j) * loss**j * (1 - loss) ** (n - j) for j in range(r + 1))
