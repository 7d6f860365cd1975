"""Planar latency field: distance over a piecewise-constant velocity plus jitter."""
from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

from ..geokey import GeoPoint


@dataclass(frozen=True)
class LinkModel:
    """Latency between two points of a square region.

    ``velocity_grid`` is a row-major G x G grid of multipliers over the
    region (row 0 at y = 0); the multiplier of the cell containing the
    segment midpoint scales ``base_velocity``.  Jitter is uniform on
    ``[0, jitter)``.
    """

    side: float = 1000.0
    base_velocity: float = 1.0
    velocity_grid: tuple[tuple[float, ...], ...] = field(default=((1.0,),))
    jitter: float = 0.0

    def __post_init__(self):
        grid = tuple(tuple(float(v) for v in row) for row in self.velocity_grid)
        if not grid or any(len(row) != len(grid) for row in grid):
            raise ValueError("velocity_grid must be a non-empty square grid")
        if any(v <= 0 for row in grid for v in row) or self.base_velocity <= 0:
            raise ValueError("velocities must be positive")
        if self.jitter < 0:
            raise ValueError("jitter bound must be non-negative")
        object.__setattr__(self, "velocity_grid", grid)

    def velocity(self, a: GeoPoint, b: GeoPoint) -> float:
        g = len(self.velocity_grid)
        mx, my = (a.x + b.x) / 2.0, (a.y + b.y) / 2.0
        col = min(max(int(mx * g / self.side), 0), g - 1)
        row = min(max(int(my * g / self.side), 0), g - 1)
        return self.base_velocity * self.velocity_grid[row][col]

    def base(self, a: GeoPoint, b: GeoPoint) -> float:
        """Jitter-free latency."""
        return math.hypot(a.x - b.x, a.y - b.y) / self.velocity(a, b)

    def sample(self, a: GeoPoint, b: GeoPoint, rng: random.Random) -> float:
        lat = self.base(a, b)
        if self.jitter > 0:
            lat += rng.uniform(0.0, self.jitter)
        return lat

    def mean_velocity(self) -> float:
        cells = [v for row in self.velocity_grid for v in row]
        return self.base_velocity * sum(cells) / len(cells)


def link_latency(a: GeoPoint, b: GeoPoint, model: LinkModel, rng: random.Random) -> float:
    return model.sample(a, b, rng)
