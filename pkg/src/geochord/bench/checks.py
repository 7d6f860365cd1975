"""Declared tolerances per experiment, evaluated on a finished report."""
from __future__ import annotations

import math

from .report import MetricsReport, parse_point

Check = tuple[str, bool]


def _by_point(report: MetricsReport) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {}
    for r in report.rows:
        out.setdefault(r.point, {})[r.statistic] = r.value
    return out


def check_path_length(report: MetricsReport) -> list[Check]:
    out = []
    for point, s in _by_point(report).items():
        n = float(parse_point(point)["N"])
        lg = s["log2_n"]
        out.append((f"{point}: mean hops {s['ours_mean_hops']:.2f} <= 1.5*log2N", s["ours_mean_hops"] <= 1.5 * max(lg, 1.0)))
        if n >= 16:
            r = s["chord_mean_hops"] / lg
            out.append((f"{point}: flat Chord hops/log2N = {r:.3f} in [0.4, 0.6]", 0.4 <= r <= 0.6))
    return out


def check_peer_latency(report: MetricsReport) -> list[Check]:
    out = []
    for point, s in _by_point(report).items():
        if "oracle_latency" in s:
            err = abs(s["mean_latency"] / s["oracle_latency"] - 1)
            out.append((f"{point}: level-0 mean within 2% of oracle ({err:.2%})", err <= 0.02))
        if "common_ratio" in s:
            dev = abs(s["common_ratio"] / s["expected_ratio"] - 1)
            out.append((f"{point}: geometric decay ratio {s['common_ratio']:.3f} within 15% of {s['expected_ratio']:.3f}", dev <= 0.15))
    return out


def check_path_latency(report: MetricsReport) -> list[Check]:
    out = []
    for point, s in _by_point(report).items():
        out.append((f"{point}: ours {s['ours_mean_latency']:.1f} < flat Chord {s['chord_mean_latency']:.1f}", s["ours_mean_latency"] < s["chord_mean_latency"]))
        if "ours_median_stretch" in s:
            out.append((f"{point}: median stretch {s['ours_median_stretch']:.3f} <= 2", s["ours_median_stretch"] <= 2.0))
    return out


def check_storage(report: MetricsReport) -> list[Check]:
    out = []
    for point, s in _by_point(report).items():
        if "max_fingers" in s:
            out.append((f"{point}: max fingers {s['max_fingers']:.0f} <= {s['finger_bound']:.0f}", s["max_fingers"] <= s["finger_bound"]))
            out.append((f"{point}: max entries {s['max_entries']:.0f} <= {s['entry_bound']:.0f}", s["max_entries"] <= s["entry_bound"]))
    return out


def check_churn(report: MetricsReport) -> list[Check]:
    out = []
    for point, s in _by_point(report).items():
        if float(parse_point(point)["fail_fraction"]) <= 0.1:
            out.append((f"{point}: lookup success after repair {s['success_after_repair']:.3f} == 1", s["success_after_repair"] == 1.0))
    return out


def _epoch_series(report: MetricsReport, stat: str) -> list[tuple[int, float]]:
    pts = [(parse_point(r.point).get("epoch"), r.value) for r in report.rows if r.statistic == stat]
    return sorted((int(e), v) for e, v in pts if e is not None and e.isdigit())


def _monotone_after(series: list[tuple[int, float]], start: int) -> bool:
    tail = [v for e, v in series if e >= start]
    return all(b <= a for a, b in zip(tail, tail[1:]))


def check_convergence(report: MetricsReport) -> list[Check]:
    rows = _by_point(report)
    summary = next(s for p, s in rows.items() if parse_point(p).get("epoch") == "summary")
    out = [(
        f"final latency {summary['final_latency']:.2f} <= initial {summary['initial_latency']:.2f}",
        summary["final_latency"] <= summary["initial_latency"],
    )]
    last = int(summary["last_accept_epoch"])
    for stat in ("t_c", "t_p"):
        out.append((f"{stat} non-increasing after epoch {last}", _monotone_after(_epoch_series(report, stat), max(last, 0))))
    sat = int(summary["saturated_epoch"])
    out.append(("all nodes saturated", sat >= 0))
    gb = [v for _, v in _epoch_series(report, "mean_gbest_fitness") if not math.isnan(v)]
    out.append(("mean gbest fitness non-increasing", all(b <= a + 1e-9 for a, b in zip(gb, gb[1:]))))
    return out


def check_overhead(report: MetricsReport) -> list[Check]:
    tc = dict(_epoch_series(report, "t_c"))
    sends = {e: v for e, v in _epoch_series(report, "clustering")}
    peer = dict(_epoch_series(report, "peer_table"))
    quiet = [e for e, v in tc.items() if v == 0 and e - 1 in tc and tc[e - 1] == 0]
    ok = all(sends[e] == 0 and peer[e] == 0 for e in quiet)
    return [(f"zero optimisation messages in {len(quiet)} saturated epochs", ok)]


CHECKS = {
    "path-length": check_path_length,
    "peer-latency": check_peer_latency,
    "path-latency": check_path_latency,
    "storage": check_storage,
    "churn": check_churn,
    "convergence": check_convergence,
    "overhead": check_overhead,
}


def run_checks(report: MetricsReport) -> list[Check]:
    return CHECKS[report.experiment](report)
