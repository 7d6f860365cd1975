"""Simulation configuration and its flat key-value file format.

A config file holds one ``key = value`` pair per line; ``#`` starts a
comment.  A file whose first non-blank character is ``{`` is read as a
JSON object with the same keys.  Recognised keys::

    seed, nodes, side, k, height, neighborhood, successors, loss, jitter,
    velocity, velocity_grid, fec_shards, queue_cap,
    churn.join, churn.leave, churn.fail

``velocity_grid`` lists rows separated by ``;`` and cells by ``,``, row 0
covering the bottom of the region, e.g. ``1,2;1,1``.
"""
from __future__ import annotations

import configparser
import json
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path


@dataclass(frozen=True)
class ChurnSchedule:
    """Poisson rates of joins, graceful leaves and silent fails per epoch."""

    join: float = 0.0
    leave: float = 0.0
    fail: float = 0.0

    def __post_init__(self):
        for name in ("join", "leave", "fail"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"churn.{name} must be a finite rate >= 0")

    @property
    def idle(self) -> bool:
        return self.join == self.leave == self.fail == 0


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    nodes: int = 64
    side: float = 1000.0
    k: int = 2
    height: int = 5
    neighborhood: int = 4
    successors: int | None = None
    loss: float = 0.0
    jitter: float = 0.0
    velocity: float = 1.0
    velocity_grid: tuple[tuple[float, ...], ...] = ((1.0,),)
    fec_shards: int = 4
    queue_cap: int = 1_000_000
    churn: ChurnSchedule = field(default_factory=ChurnSchedule)

    def __post_init__(self):
        if self.nodes < 1:
            raise ValueError("nodes must be >= 1")
        if not self.side > 0:
            raise ValueError("side must be > 0")
        if self.k < 2 or self.height < 1:
            raise ValueError("need k >= 2 and height >= 1")
        if self.neighborhood < 0 or (self.successors is not None and self.successors < 1):
            raise ValueError("neighborhood must be >= 0 and successors >= 1")
        if not 0 <= self.loss <= 1:
            raise ValueError("loss must lie in [0, 1]")
        if self.jitter < 0 or not self.velocity > 0:
            raise ValueError("jitter must be >= 0 and velocity > 0")
        if self.fec_shards < 1 or self.queue_cap < 1:
            raise ValueError("fec_shards and queue_cap must be >= 1")
        grid = tuple(tuple(float(v) for v in row) for row in self.velocity_grid)
        if not grid or any(len(r) != len(grid) for r in grid) or any(v <= 0 for r in grid for v in r):
            raise ValueError("velocity_grid must be a square grid of positive multipliers")
        object.__setattr__(self, "velocity_grid", grid)

    def with_overrides(self, **kw) -> "SimConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "churn"}
        out["velocity_grid"] = format_grid(self.velocity_grid)
        for name in ("join", "leave", "fail"):
            out[f"churn.{name}"] = getattr(self.churn, name)
        return out


_INT = {"seed", "nodes", "k", "height", "neighborhood", "successors", "fec_shards", "queue_cap"}
_FLOAT = {"side", "loss", "jitter", "velocity"}
_CHURN = {"churn.join", "churn.leave", "churn.fail"}


def parse_grid(text: str) -> tuple[tuple[float, ...], ...]:
    rows = [r for r in str(text).replace(" ", "").split(";") if r]
    return tuple(tuple(float(c) for c in r.split(",")) for r in rows)


def format_grid(grid) -> str:
    return ";".join(",".join(repr(float(c)) for c in row) for row in grid)


def config_from_mapping(doc: dict) -> SimConfig:
    kw: dict = {}
    churn: dict = {}
    for raw, value in doc.items():
        key = raw.strip().lower()
        if key in _INT:
            kw[key] = None if value in (None, "", "none") else int(value)
        elif key in _FLOAT:
            kw[key] = float(value)
        elif key in _CHURN:
            churn[key.split(".", 1)[1]] = float(value)
        elif key == "velocity_grid":
            kw[key] = parse_grid(value) if isinstance(value, str) else tuple(tuple(r) for r in value)
        elif key == "churn" and isinstance(value, dict):
            churn.update({k: float(v) for k, v in value.items()})
        else:
            raise ValueError(f"unknown config key {raw!r}")
    return SimConfig(**kw, churn=ChurnSchedule(**churn))


def parse_config(text: str) -> SimConfig:
    if text.lstrip().startswith("{"):
        return config_from_mapping(json.loads(text))
    parser = configparser.ConfigParser(delimiters=("=",), comment_prefixes=("#",), inline_comment_prefixes=("#",))
    parser.read_string("[sim]\n" + text)
    return config_from_mapping(dict(parser["sim"]))


def load_config(path: str | Path) -> SimConfig:
    return parse_config(Path(path).read_text())
