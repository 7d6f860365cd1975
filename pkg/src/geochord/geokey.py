"""Locality-preserving keys: grid quantization, Z-order ring projection,
ring metric, and RTT-based location approximation.

Points live in a half-open square ``[0, side) x [0, side)``.  A point is
quantized into a ``2**level x 2**level`` grid and the two cell coordinates
are bit-interleaved (x in even bit positions, y in odd) into a key that is
left-aligned on an ``m``-bit ring, so coarser cells are key prefixes of
finer ones.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateGeometry,
    InsufficientAnchors,
    InvalidObservation,
    KeyWidthMismatch,
    OutOfRegion,
)

DEFAULT_BITS = 32


@dataclass(frozen=True)
class GeoPoint:
    x: float
    y: float

    def distance(self, other: "GeoPoint") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass(frozen=True)
class GridCode:
    level: int
    cell_x: int
    cell_y: int

    def __post_init__(self):
        n = 1 << self.level
        if self.level < 0 or not (0 <= self.cell_x < n and 0 <= self.cell_y < n):
            raise ValueError(f"cell ({self.cell_x},{self.cell_y}) outside level {self.level}")

    @property
    def text(self) -> str:
        return f"L{self.level}:{self.cell_x}-{self.cell_y}"

    @classmethod
    def parse(cls, text: str) -> "GridCode":
        m = re.fullmatch(r"L(\d+):(\d+)-(\d+)", text.strip())
        if m is None:
            raise ValueError(f"not a grid code: {text!r}")
        return cls(int(m.group(1)), int(m.group(2)), int(m.group(3)))

    def __str__(self) -> str:
        return self.text


@dataclass(frozen=True, order=True)
class RingKey:
    value: int
    bits: int = DEFAULT_BITS

    def __post_init__(self):
        if self.bits <= 0 or self.bits % 2:
            raise ValueError("key width must be a positive even number of bits")
        if not 0 <= self.value < (1 << self.bits):
            raise ValueError(f"key {self.value} does not fit in {self.bits} bits")

    @property
    def hex(self) -> str:
        return format(self.value, f"0{self.bits // 4}x")

    @classmethod
    def from_hex(cls, text: str, bits: int = DEFAULT_BITS) -> "RingKey":
        return cls(int(text, 16), bits)

    def __str__(self) -> str:
        return self.hex


@dataclass(frozen=True)
class AnchorObservation:
    anchor: GeoPoint
    rtt: float


@dataclass(frozen=True)
class PropagationModel:
    velocity: float = 1.0

    def __post_init__(self):
        if not self.velocity > 0:
            raise ValueError("velocity must be positive")


def encode_grid(p: GeoPoint, level: int, side: float) -> GridCode:
    if not (0 <= p.x < side and 0 <= p.y < side):
        raise OutOfRegion(f"{p} outside [0, {side})^2")
    n = 1 << level
    cx = min(int(math.floor(p.x * n / side)), n - 1)
    cy = min(int(math.floor(p.y * n / side)), n - 1)
    return GridCode(level, cx, cy)


def _spread(v: int) -> int:
    # Spread the low 32 bits of v into the even bit positions of a 64-bit word.
    v &= 0xFFFFFFFF
    v = (v | (v << 16)) & 0x0000FFFF0000FFFF
    v = (v | (v << 8)) & 0x00FF00FF00FF00FF
    v = (v | (v << 4)) & 0x0F0F0F0F0F0F0F0F
    v = (v | (v << 2)) & 0x3333333333333333
    v = (v | (v << 1)) & 0x5555555555555555
    return v


def _compact(v: int) -> int:
    v &= 0x5555555555555555
    v = (v | (v >> 1)) & 0x3333333333333333
    v = (v | (v >> 2)) & 0x0F0F0F0F0F0F0F0F
    v = (v | (v >> 4)) & 0x00FF00FF00FF00FF
    v = (v | (v >> 8)) & 0x0000FFFF0000FFFF
    v = (v | (v >> 16)) & 0x00000000FFFFFFFF
    return v


def morton(cell_x: int, cell_y: int) -> int:
    """Interleave two cell coordinates; x takes bit 0, y bit 1."""
    if cell_x >> 32 or cell_y >> 32:
        raise ValueError("cell coordinates above 32 bits")
    return _spread(cell_x) | (_spread(cell_y) << 1)


def interleave(cell_x: int, cell_y: int, level: int, bits: int = DEFAULT_BITS) -> RingKey:
    if 2 * level > bits:
        raise ValueError(f"level {level} needs {2 * level} bits, key has {bits}")
    n = 1 << level
    if not (0 <= cell_x < n and 0 <= cell_y < n):
        raise ValueError(f"cell ({cell_x},{cell_y}) outside level {level}")
    return RingKey(morton(cell_x, cell_y) << (bits - 2 * level), bits)


def deinterleave(key: RingKey, level: int) -> GridCode:
    """Inverse of :func:`interleave` for a key produced at ``level``."""
    z = key.value >> (key.bits - 2 * level)
    return GridCode(level, _compact(z), _compact(z >> 1))


def point_to_key(p: GeoPoint, side: float, bits: int = DEFAULT_BITS) -> RingKey:
    if bits % 2:
        raise ValueError("key width must be even")
    code = encode_grid(p, bits // 2, side)
    return interleave(code.cell_x, code.cell_y, code.level, bits)


def key_to_point(key: RingKey, side: float) -> GeoPoint:
    """Centre of the finest cell the key addresses."""
    level = key.bits // 2
    code = deinterleave(key, level)
    size = side / (1 << level)
    return GeoPoint((code.cell_x + 0.5) * size, (code.cell_y + 0.5) * size)


def ring_distance(a: RingKey, b: RingKey) -> int:
    if a.bits != b.bits:
        raise KeyWidthMismatch(f"{a.bits}-bit key vs {b.bits}-bit key")
    mod = 1 << a.bits
    d = (a.value - b.value) % mod
    return min(d, mod - d)


def clockwise(a: int, b: int, bits: int) -> int:
    """Clockwise distance from key value ``a`` to key value ``b``."""
    return (b - a) % (1 << bits)


def shared_prefix_bits(a: RingKey, b: RingKey) -> int:
    x = a.value ^ b.value
    return a.bits - x.bit_length()


# --- location approximation ---------------------------------------------------

_GN_ITERATIONS = 20
_GN_STEP_TOL = 1e-9
_MIN_REFERENCE = 5


def _ranges(obs: Sequence[AnchorObservation], model: PropagationModel) -> tuple[np.ndarray, np.ndarray]:
    for o in obs:
        if o.rtt < 0 or not math.isfinite(o.rtt):
            raise InvalidObservation(f"rtt {o.rtt} is not a non-negative number")
    anchors = np.array([[o.anchor.x, o.anchor.y] for o in obs], dtype=float)
    dist = np.array([model.velocity * o.rtt / 2.0 for o in obs], dtype=float)
    return anchors, dist


def _solve(anchors: np.ndarray, dist: np.ndarray) -> np.ndarray:
    a0, d0 = anchors[0], dist[0]
    A = 2.0 * (anchors[1:] - a0)
    b = d0**2 - dist[1:] ** 2 + np.sum(anchors[1:] ** 2, axis=1) - np.sum(a0**2)
    sv = np.linalg.svd(A, compute_uv=False)
    if sv.size < 2 or sv[0] == 0 or sv[-1] / sv[0] < 1e-10:
        raise DegenerateGeometry("anchors are collinear or coincident")
    p = np.linalg.lstsq(A, b, rcond=None)[0]

    sse = float(np.sum(_residuals(p, anchors, dist) ** 2))
    for _ in range(_GN_ITERATIONS):
        diff = p - anchors
        norm = np.hypot(diff[:, 0], diff[:, 1])
        norm = np.where(norm < 1e-12, 1e-12, norm)
        r = norm - dist
        J = diff / norm[:, None]
        step = np.linalg.lstsq(J, -r, rcond=None)[0]
        # Halve the step until it does not increase the squared residual.
        for _ in range(40):
            cand = p + step
            cand_sse = float(np.sum(_residuals(cand, anchors, dist) ** 2))
            if cand_sse <= sse:
                break
            step = step / 2
        else:
            break
        p, sse = cand, cand_sse
        if np.hypot(*step) < _GN_STEP_TOL * max(1.0, np.hypot(*p)):
            break
    return p


def _residuals(p: np.ndarray, anchors: np.ndarray, dist: np.ndarray) -> np.ndarray:
    return np.hypot(p[0] - anchors[:, 0], p[1] - anchors[:, 1]) - dist


def estimate_location(
    obs: Sequence[AnchorObservation], model: PropagationModel = PropagationModel()
) -> tuple[GeoPoint, float]:
    """Least-squares multilateration from round-trip times.

    Returns the estimated point and the root-mean-square range residual.
    """
    if len(obs) < 3:
        raise InsufficientAnchors(f"need at least 3 anchors, got {len(obs)}")
    anchors, dist = _ranges(obs, model)
    p = _solve(anchors, dist)
    r = _residuals(p, anchors, dist)
    return GeoPoint(float(p[0]), float(p[1])), float(np.sqrt(np.mean(r**2)))


def _rms(values: np.ndarray) -> float:
    return float(np.sqrt(np.mean(values**2))) if values.size else 0.0


def flag_outliers(
    obs: Sequence[AnchorObservation],
    estimate: tuple[GeoPoint, float],
    tau: float = 3.0,
    model: PropagationModel = PropagationModel(),
) -> set[int]:
    """Indices of anchors whose range residual exceeds ``tau`` times the rms
    residual of the remaining anchors.

    A single gross outlier drags a least-squares fit toward itself, so each
    anchor is judged against a fit that leaves it out.  The worst offender
    is peeled while its ratio exceeds ``tau``; the location is re-estimated
    once without the suspects and the final decision uses residuals against
    that re-estimate.  A suspect is only judged against at least
    ``_MIN_REFERENCE`` other anchors: with fewer, noise alone pushes honest
    anchors over the threshold.
    """
    if math.isinf(tau) or len(obs) <= _MIN_REFERENCE:
        return set()
    anchors, dist = _ranges(obs, model)
    floor = 1e-9 * max(1.0, float(dist.max()))
    point = np.array([estimate[0].x, estimate[0].y])
    if float(np.max(np.abs(_residuals(point, anchors, dist)))) <= tau * floor:
        return set()

    flagged: set[int] = set()
    while True:
        keep = [j for j in range(len(obs)) if j not in flagged]
        if len(keep) <= _MIN_REFERENCE:
            break
        worst = None
        for i in keep:
            rest = [j for j in keep if j != i]
            try:
                p = _solve(anchors[rest], dist[rest])
            except DegenerateGeometry:
                continue
            r = np.abs(_residuals(p, anchors, dist))
            ratio = r[i] / max(_rms(r[rest]), floor)
            if worst is None or ratio > worst[0]:
                worst = (ratio, i)
        if worst is None or worst[0] <= tau:
            break
        flagged.add(worst[1])
    if not flagged:
        return set()

    keep = [j for j in range(len(obs)) if j not in flagged]
    try:
        point = _solve(anchors[keep], dist[keep])
    except DegenerateGeometry:
        return flagged
    r = np.abs(_residuals(point, anchors, dist))
    scale = max(_rms(r[keep]), floor)
    return {i for i in range(len(obs)) if r[i] > tau * scale}
