"""Measurement reports: rows of (experiment, point, statistic, value, stderr)."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

from ..errors import IncomparableReports

FORMAT_VERSION = 1
COLUMNS = ("experiment", "point", "statistic", "value", "stderr")


def format_point(point: dict) -> str:
    return ";".join(f"{k}={point[k]}" for k in point)


def parse_point(text: str) -> dict:
    out = {}
    for part in filter(None, text.split(";")):
        k, v = part.split("=", 1)
        out[k] = v
    return out


def _num(v: float | None) -> str:
    return "" if v is None else repr(float(v))


@dataclass(frozen=True)
class Row:
    experiment: str
    point: str  # "name=value;..." in sweep order
    statistic: str
    value: float
    stderr: float | None = None


@dataclass
class MetricsReport:
    experiment: str
    rows: list[Row] = field(default_factory=list)
    params: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def add(self, point: dict, statistic: str, value: float, stderr: float | None = None) -> None:
        self.rows.append(Row(self.experiment, format_point(point), statistic, float(value), None if stderr is None else float(stderr)))

    def get(self, statistic: str, **point) -> Row:
        want = {k: str(v) for k, v in point.items()}
        for r in self.rows:
            if r.statistic == statistic and all(parse_point(r.point).get(k) == v for k, v in want.items()):
                return r
        raise KeyError(f"{statistic} at {want}")

    def values(self, statistic: str) -> list[tuple[dict, float]]:
        return [(parse_point(r.point), r.value) for r in self.rows if r.statistic == statistic]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow([r.experiment, r.point, r.statistic, _num(r.value), _num(r.stderr)])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "format_version": self.version,
            "experiment": self.experiment,
            "params": self.params,
            "rows": [
                {"point": r.point, "statistic": r.statistic, "value": r.value, "stderr": r.stderr}
                for r in self.rows
            ],
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        doc = json.loads(text)
        if doc.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported report format {doc.get('format_version')!r}")
        exp = doc["experiment"]
        rows = [Row(exp, r["point"], r["statistic"], float(r["value"]), r["stderr"]) for r in doc["rows"]]
        return cls(exp, rows, doc.get("params", {}))

    @classmethod
    def from_csv(cls, text: str) -> "MetricsReport":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if tuple(header) != COLUMNS:
            raise ValueError("not a metrics CSV")
        rows = [Row(e, p, s, float(v), float(se) if se else None) for e, p, s, v, se in reader]
        if not rows:
            raise ValueError("empty report")
        return cls(rows[0].experiment, rows)


@dataclass(frozen=True)
class Delta:
    point: str
    statistic: str
    a: float
    b: float
    delta: float
    allowed: float
    ok: bool


@dataclass
class Comparison:
    deltas: list[Delta]

    @property
    def passed(self) -> bool:
        return all(d.ok for d in self.deltas)

    def summary(self) -> str:
        lines = ["point,statistic,a,b,delta,allowed,ok"]
        for d in self.deltas:
            lines.append(f"{d.point},{d.statistic},{_num(d.a)},{_num(d.b)},{_num(d.delta)},{_num(d.allowed)},{int(d.ok)}")
        return "\n".join(lines) + "\n"


def compare_report(
    a: MetricsReport,
    b: MetricsReport,
    tolerances: dict[str, float] | None = None,
    default_tolerance: float = 0.0,
    sigmas: float | None = None,
) -> Comparison:
    """Per-point deltas ``b - a`` checked against absolute tolerances.

    With ``sigmas`` set, a statistic that carries stderr on both sides may
    also pass when ``|delta| <= sigmas * sqrt(se_a**2 + se_b**2)``.
    """
    if a.experiment != b.experiment:
        raise IncomparableReports(f"{a.experiment} vs {b.experiment}")
    ka = {(r.point, r.statistic): r for r in a.rows}
    kb = {(r.point, r.statistic): r for r in b.rows}
    if ka.keys() != kb.keys() or len(ka) != len(a.rows) or len(kb) != len(b.rows):
        raise IncomparableReports("parameter grids differ")
    tolerances = tolerances or {}
    out = []
    for key in ka:
        ra, rb = ka[key], kb[key]
        allowed = tolerances.get(key[1], default_tolerance)
        if sigmas is not None and ra.stderr is not None and rb.stderr is not None:
            allowed = max(allowed, sigmas * math.hypot(ra.stderr, rb.stderr))
        d = rb.value - ra.value
        same = ra.value == rb.value or (math.isnan(ra.value) and math.isnan(rb.value))
        out.append(Delta(key[0], key[1], ra.value, rb.value, 0.0 if same else d, allowed, same or abs(d) <= allowed))
    return Comparison(out)
