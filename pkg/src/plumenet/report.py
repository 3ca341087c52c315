"""Run reports: metrics tables, acceptance verdicts, artifact files.

Every acceptance criterion appears exactly once in a report with a
verdict: pass/fail when the run exercises it, skipped (with the reason)
when it needs a dedicated harness (those run in the acceptance test
suite).  All artifact bytes are deterministic for a (scenario, seed)
pair; the only wall-clock value lives in the text report's header line.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

from .dispersion import to_ascii_grid
from .nodes import meters_to_latlon
from .runtime import TwinRuntime
from .twin import LeakEvent, export_csv

FRESHNESS_BUDGET_S = 360.0
BANDWIDTH_BUDGET_BPS = 1000.0
CALIBRATION_MAD_PPM = 3.0
CALIBRATION_R2 = 0.90
RECALL_FLOOR = 0.90
FALSE_POSITIVE_CAP = 1
IMPUTE_MAD_FACTOR = 2.0

CRITERIA_TITLES = {
    "C01": "QoS-1 reliability (exactly-once under 20% loss)",
    "C02": "Uplink bandwidth under 1 kbps per node",
    "C03": "Dashboard freshness within 6 minutes",
    "C04": "Calibration MAD <= 3 ppm and R^2 >= 0.90",
    "C05": "Solver mass conservation (closed domain)",
    "C06": "Coarse solver vs Gaussian plume oracle within 20%",
    "C07": "Nesting consistency + obstacle meander",
    "C08": "Wind adjustment divergence reduction >= 1000x",
    "C09": "Detection recall >= 0.9, speed-gate suppression, <= 1 FP",
    "C10": "Inverse recovery (position and strength)",
    "C11": "Imputation MAE <= 2x calibration MAD",
    "C12": "Bit-identical artifacts for equal seeds",
}
SUITE_ONLY = "needs a dedicated harness; verified by the acceptance test suite"


@dataclass
class CriterionResult:
    cid: str
    verdict: str  # pass | fail | skipped
    measured: dict
    note: str = ""

    def to_dict(self) -> dict:
        return {"cid": self.cid, "title": CRITERIA_TITLES[self.cid],
                "verdict": self.verdict, "measured": self.measured,
                "note": self.note}


def evaluate_criteria(rt: TwinRuntime) -> list[CriterionResult]:
    """Judge the run against every criterion it can exercise."""
    out: list[CriterionResult] = []
    metrics = rt.metrics_now()
    a = rt.scenario.analysis

    # C01: needs the dedicated lossy soak harness
    out.append(CriterionResult("C01", "skipped", {}, SUITE_ONLY))

    if metrics:
        worst_bw = max(m.bandwidth_bps for m in metrics.values())
        out.append(CriterionResult(
            "C02", "pass" if worst_bw < BANDWIDTH_BUDGET_BPS else "fail",
            {"max_bandwidth_bps": round(worst_bw, 1),
             "budget_bps": BANDWIDTH_BUDGET_BPS}))
        fresh = [m.freshness_s for m in metrics.values()
                 if not math.isinf(m.freshness_s)]
        if len(fresh) == len(metrics):
            worst = max(fresh)
            out.append(CriterionResult(
                "C03", "pass" if worst <= FRESHNESS_BUDGET_S else "fail",
                {"max_freshness_s": round(worst, 1),
                 "budget_s": FRESHNESS_BUDGET_S}))
        else:
            out.append(CriterionResult(
                "C03", "fail",
                {"nodes_without_data": len(metrics) - len(fresh)},
                "some nodes never delivered a reading"))
    else:
        out.append(CriterionResult("C02", "skipped", {}, "no nodes in scenario"))
        out.append(CriterionResult("C03", "skipped", {}, "no nodes in scenario"))

    if rt.calibration is not None:
        rep = rt.calibration.report
        ok = rep.mad_ppm <= CALIBRATION_MAD_PPM and rep.r_squared >= CALIBRATION_R2
        out.append(CriterionResult(
            "C04", "pass" if ok else "fail",
            {"holdout_mad_ppm": round(rep.mad_ppm, 4),
             "holdout_r2": round(rep.r_squared, 4), "n_train": rep.n_train}))
    else:
        out.append(CriterionResult("C04", "skipped", {}, "no calibration fitted"))

    for cid in ("C05", "C06", "C07", "C08"):
        out.append(CriterionResult(cid, "skipped", {}, SUITE_ONLY))

    score = rt.detection_score
    if score is not None and score.truth_events:
        spike_faults = [f for f in rt.scenario.sensor_faults if f.kind == "spike"]
        suppression_ok = len(score.suppressed) == len(spike_faults)
        ok = (score.recall >= RECALL_FLOOR
              and score.false_positives <= FALSE_POSITIVE_CAP
              and suppression_ok)
        measured = score.to_dict()
        measured["planted_spikes"] = len(spike_faults)
        out.append(CriterionResult("C09", "pass" if ok else "fail", measured))
    else:
        out.append(CriterionResult(
            "C09", "skipped", {},
            "no ground-truth super-threshold events in this run"))

    if rt.estimates:
        sources = [s for s in rt.scenario.sources if s.strength_g_s > 0]
        top = rt.estimates[0]
        nearest = min(math.hypot(top.position[0] - s.position_m[0],
                                 top.position[1] - s.position_m[1])
                      for s in sources) if sources else math.inf
        total = sum(e.strength_g_s for e in rt.estimates)
        truth_total = sum(s.strength_g_s for s in sources)
        strength_err = (abs(total - truth_total) / truth_total
                        if truth_total else math.inf)
        ok = nearest <= rt.scenario.grid.coarse_cell_m and strength_err <= 0.30
        out.append(CriterionResult(
            "C10", "pass" if ok else "fail",
            {"top1_distance_m": round(nearest, 1),
             "total_strength_g_s": round(total, 3),
             "true_total_g_s": round(truth_total, 3),
             "strength_error": round(strength_err, 3)},
            "run-level check; noise/fine variants in the acceptance suite"))
    else:
        out.append(CriterionResult("C10", "skipped", {},
                                   "inversion not enabled for this scenario"))

    imp = rt.imputation_score
    if imp is not None and rt.calibration is not None:
        bound = IMPUTE_MAD_FACTOR * rt.calibration.report.mad_ppm
        ok = imp.mae_ppm <= bound
        measured = imp.to_dict()
        measured["bound_ppm"] = round(bound, 4)
        out.append(CriterionResult("C11", "pass" if ok else "fail", measured))
    else:
        out.append(CriterionResult("C11", "skipped", {},
                                   "no dropout plant configured"))

    out.append(CriterionResult("C12", "skipped", {},
                               "needs two runs; verified by the acceptance suite "
                               "and `run --seed` repetition"))
    return out


def build_report(rt: TwinRuntime) -> dict:
    metrics = rt.metrics_now()
    criteria = evaluate_criteria(rt)
    doc = {
        "scenario": rt.scenario.name,
        "seed": rt.scenario.seed,
        "duration_s": rt.now,
        "nodes": {
            node_id: {
                "freshness_s": (None if math.isinf(m.freshness_s)
                                else round(m.freshness_s, 2)),
                "loss_fraction": round(m.loss_fraction, 5),
                "bandwidth_bps": round(m.bandwidth_bps, 1),
                "wire_latency_mean_s": round(m.wire_latency_mean_s, 4),
                "wire_latency_p95_s": round(m.wire_latency_p95_s, 4),
                "age_latency_mean_s": round(m.mean_age_latency_s, 1),
                "readings": m.reading_count,
                "stale": m.stale,
            } for node_id, m in sorted(metrics.items())
        },
        "calibration": rt.calibration.to_dict() if rt.calibration else None,
        "detection": rt.detection_score.to_dict() if rt.detection_score else None,
        "events": [_event_props(e) for e in rt.events],
        "imputation": rt.imputation_score.to_dict() if rt.imputation_score else None,
        "estimates": [
            {"candidate_id": e.candidate_id, "x_m": e.position[0],
             "y_m": e.position[1], "strength_g_s": round(e.strength_g_s, 4),
             "delta_residual": round(e.delta_residual, 6), "rank": e.rank}
            for e in rt.estimates
        ],
        "transport": {
            "injected_g": round(rt.world.diagnostics.injected_g, 6),
            "coarse_outflow_g": round(rt.world.diagnostics.coarse_outflow_g, 6),
        },
        "criteria": [c.to_dict() for c in criteria],
    }
    return doc


def report_passed(doc: dict) -> bool:
    return not any(c["verdict"] == "fail" for c in doc["criteria"])


def render_report_text(doc: dict, wallclock: bool = True) -> str:
    lines = []
    if wallclock:
        lines.append(f"# generated {time.strftime('%Y-%m-%d %H:%M:%S')}")
    lines.append(f"scenario: {doc['scenario']}   seed: {doc['seed']}   "
                 f"sim duration: {doc['duration_s']:.0f} s")
    lines.append("")
    lines.append(f"{'node':<8}{'fresh s':>9}{'loss':>8}{'bps':>8}"
                 f"{'lat s':>8}{'rows':>7}  stale")
    for node_id, m in doc["nodes"].items():
        fresh = "-" if m["freshness_s"] is None else f"{m['freshness_s']:.0f}"
        lines.append(f"{node_id:<8}{fresh:>9}{m['loss_fraction']:>8.3f}"
                     f"{m['bandwidth_bps']:>8.0f}{m['wire_latency_mean_s']:>8.3f}"
                     f"{m['readings']:>7}  {'yes' if m['stale'] else 'no'}")
    if doc.get("calibration"):
        rep = doc["calibration"]["report"]
        lines.append("")
        lines.append(f"calibration: holdout MAD {rep['mad_ppm']:.3f} ppm, "
                     f"R^2 {rep['r_squared']:.4f}, n={rep['n_train']}")
    if doc.get("detection"):
        d = doc["detection"]
        lines.append(f"detection: {d['matched']}/{d['truth_event_count']} truth "
                     f"events matched (recall {d['recall']:.2f}), "
                     f"{d['false_positives']} false positives, "
                     f"{d['suppressed_count']} suppressed")
    if doc.get("imputation"):
        i = doc["imputation"]
        lines.append(f"imputation: {i['imputed']} filled of {i['dropped']} dropped, "
                     f"MAE {i['mae_ppm']:.3f} ppm")
    if doc.get("estimates"):
        lines.append("source estimates:")
        for e in doc["estimates"][:5]:
            lines.append(f"  rank {e['rank']}: ({e['x_m']:.0f}, {e['y_m']:.0f}) m, "
                         f"{e['strength_g_s']:.3f} g/s")
    lines.append("")
    lines.append("acceptance criteria:")
    for c in doc["criteria"]:
        mark = {"pass": "PASS", "fail": "FAIL", "skipped": "skip"}[c["verdict"]]
        lines.append(f"  [{mark}] {c['cid']}: {c['title']}")
        if c["measured"]:
            pairs = ", ".join(f"{k}={v}" for k, v in c["measured"].items())
            lines.append(f"         {pairs}")
        if c["note"]:
            lines.append(f"         ({c['note']})")
    lines.append("")
    verdict = "PASS" if report_passed(doc) else "FAIL"
    evaluated = sum(1 for c in doc["criteria"] if c["verdict"] != "skipped")
    lines.append(f"overall: {verdict} ({evaluated} criteria evaluated)")
    return "\n".join(lines) + "\n"


# ---- artifact files ---------------------------------------------------------------

def _event_props(e: LeakEvent) -> dict:
    return {"node_id": e.node_id, "t_start": e.t_start, "t_end": e.t_end,
            "peak_ppm": round(e.peak_ppm, 3), "suppressed": e.suppressed,
            "reason": e.reason, "lat": round(e.peak_lat, 6),
            "lon": round(e.peak_lon, 6)}


def events_geojson(events: list[LeakEvent]) -> dict:
    return {
        "type": "FeatureCollection",
        "features": [{
            "type": "Feature",
            "geometry": {"type": "Point",
                         "coordinates": [round(e.peak_lon, 6), round(e.peak_lat, 6)]},
            "properties": _event_props(e),
        } for e in events],
    }


def estimates_geojson(rt: TwinRuntime) -> dict:
    feats = []
    for e in rt.estimates:
        lat, lon = meters_to_latlon(e.position[0], e.position[1],
                                    rt.scenario.origin_latlon)
        feats.append({
            "type": "Feature",
            "geometry": {"type": "Point",
                         "coordinates": [round(lon, 6), round(lat, 6)]},
            "properties": {"candidate_id": e.candidate_id,
                           "strength_g_s": round(e.strength_g_s, 4),
                           "rank": e.rank,
                           "delta_residual": round(e.delta_residual, 6),
                           "x_m": e.position[0], "y_m": e.position[1]},
        })
    return {"type": "FeatureCollection", "features": feats}


def write_artifacts(rt: TwinRuntime, outdir) -> dict:
    """Write the full artifact set; returns the report document."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "readings.csv").write_text(export_csv(rt.store))
    doc = build_report(rt)
    (out / "report.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n")
    (out / "report.txt").write_text(render_report_text(doc))
    (out / "events.geojson").write_text(
        json.dumps(events_geojson(rt.events), indent=2, sort_keys=True) + "\n")
    if rt.estimates:
        (out / "estimates.geojson").write_text(
            json.dumps(estimates_geojson(rt), indent=2, sort_keys=True) + "\n")
    if rt.calibration is not None:
        (out / "calibration.json").write_text(
            json.dumps(rt.calibration.to_dict(), indent=2, sort_keys=True) + "\n")
    fields = out / "fields"
    fields.mkdir(exist_ok=True)
    (fields / "coarse.asc").write_text(to_ascii_grid(rt.world.coarse))
    if rt.world.fine is not None:
        (fields / "fine.asc").write_text(to_ascii_grid(rt.world.fine))
    truth = [{"node_id": n, "t_start": t0, "t_end": t1}
             for n, t0, t1 in (rt.detection_score.truth_events
                               if rt.detection_score else [])]
    (out / "truth_events.json").write_text(
        json.dumps(truth, indent=2, sort_keys=True) + "\n")
    return doc
