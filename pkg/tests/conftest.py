from __future__ import annotations

import random

import numpy as np
import pytest

from geochord.cluster import build_hierarchy
from geochord.dht import Overlay, OverlayConfig
from geochord.geokey import GeoPoint
from geochord.nettest.link import LinkModel


def uniform_points(n: int, side: float = 1000.0, seed: int = 0) -> list[GeoPoint]:
    rng = random.Random(seed)
    return [GeoPoint(rng.uniform(0, side), rng.uniform(0, side)) for _ in range(n)]


def make_overlay(n: int, seed: int = 0, **cfg) -> Overlay:
    config = OverlayConfig(**cfg)
    return Overlay.build(uniform_points(n, config.side, seed), config, LinkModel(config.side), seed=seed)


def empty_overlay(seed: int = 0, **cfg) -> Overlay:
    """An overlay with a cluster tree but no members, ready for joins."""
    config = OverlayConfig(**cfg)
    pts = np.array([[p.x, p.y] for p in uniform_points(200, config.side, seed)])
    tree = build_hierarchy(pts, config.k, config.h, seed=seed)
    return Overlay(config, tree, LinkModel(config.side), random.Random(seed))


@pytest.fixture
def overlay64() -> Overlay:
    return make_overlay(64, seed=3)


# --- acceptance verdicts ------------------------------------------------------------

VERDICTS: dict[int, tuple[str, bool, str]] = {}


def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
    """Store one acceptance verdict and echo it; returns ``ok``."""
    VERDICTS[number] = (title, bool(ok), detail)
    print(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {title} {detail}".rstrip())
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        title, ok, detail = VERDICTS[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {n:2d}. {title}: {detail}")
