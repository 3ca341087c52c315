"""Headless entry points: run scenarios, replay recordings, export, locate."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from .config import ScenarioError, load_scenario_file
from .inverse import candidate_grid, localize
from .nodes import meters_to_latlon
from .report import (build_report, estimates_geojson, events_geojson,
                     render_report_text, report_passed, write_artifacts)
from .runtime import TwinRuntime
from .twin import (CalibModel, DetectorConfig, detect_events_all,
                   export_csv, fit_calibration, import_csv)
from .twin.calibration import CalibrationError

BUNDLED_DIR = Path(__file__).parent / "scenarios"


def resolve_scenario(ref: str) -> Path:
    p = Path(ref)
    if p.exists():
        return p
    bundled = BUNDLED_DIR / (ref.replace("-", "_") + ".toml")
    if bundled.exists():
        return bundled
    raise click.ClickException(
        f"scenario {ref!r} not found (no such file, not bundled; bundled: "
        + ", ".join(sorted(q.stem.replace('_', '-') for q in BUNDLED_DIR.glob('*.toml'))))


def _load(ref: str, seed: int | None, duration: float | None,
          scale: float | None):
    path = resolve_scenario(ref)
    try:
        scenario = load_scenario_file(path)
    except ScenarioError as exc:
        click.echo(f"scenario validation failed:\n{exc}", err=True)
        sys.exit(2)
    if seed is not None:
        scenario.seed = seed
    if duration is not None:
        scenario.duration_s = duration
    if scale is not None:
        scenario.clock_scale = scale
    return scenario


@click.group()
def main() -> None:
    """Digital twin of a methane-sensing IoT network."""


@main.command()
@click.option("--scenario", "scenario_ref", required=True,
              help="Scenario file path or bundled name (basin-line, "
                   "facility-loop, nesting-demo).")
@click.option("--duration", type=float, default=None, help="Override sim seconds.")
@click.option("--seed", type=int, default=None, help="Override scenario seed.")
@click.option("--scale", type=float, default=None, help="Clock scale (with gateway).")
@click.option("--out", "outdir", type=click.Path(), default="artifacts",
              help="Artifacts directory.")
@click.option("--with-gateway", is_flag=True,
              help="Serve the HTTP gateway while the scenario runs (paced).")
@click.option("--bind", default="127.0.0.1:8800", help="Gateway bind address.")
def run(scenario_ref, duration, seed, scale, outdir, with_gateway, bind):
    """Run a scenario end to end and write artifacts + report."""
    scenario = _load(scenario_ref, seed, duration, scale)
    rt = TwinRuntime(scenario)
    if with_gateway:
        from .gateway import serve_runtime
        click.echo(f"serving gateway on {bind} at clock scale "
                   f"{scenario.clock_scale}x for {scenario.duration_s:.0f} sim s")
        serve_runtime(rt, bind=bind, run_duration_s=scenario.duration_s)
        rt.analyze()
    else:
        rt.run()
    doc = write_artifacts(rt, outdir)
    click.echo(render_report_text(doc), nl=False)
    click.echo(f"artifacts written to {outdir}")
    sys.exit(0 if report_passed(doc) else 1)


@main.command()
@click.option("--readings", "readings_path", required=True, type=click.Path(exists=True))
@click.option("--calibration", "model_path", type=click.Path(exists=True),
              help="Re-apply this calibration model to the raw channel.")
@click.option("--threshold", type=float, default=5.0)
@click.option("--min-duration", type=float, default=8.0)
@click.option("--speed-gate", type=float, default=15.0)
@click.option("--no-impute", is_flag=True, help="Drop imputed rows before detection.")
@click.option("--out", "outdir", type=click.Path(), default=None)
def replay(readings_path, model_path, threshold, min_duration, speed_gate,
           no_impute, outdir):
    """Re-run calibration application + detection on a recorded CSV."""
    store = import_csv(Path(readings_path).read_text())
    if model_path:
        model = CalibModel.from_dict(json.loads(Path(model_path).read_text()))
        for rows in store.readings.values():
            for r in rows:
                if r.ch4_ppm_raw is not None:
                    r.ch4_ppm_cal = model.apply(r.ch4_ppm_raw, r.temp_c or 25.0,
                                                r.rh_pct or 50.0,
                                                r.press_hpa or 1013.0)
    if no_impute:
        dropped = 0
        for node_id in store.nodes():
            before = len(store.readings[node_id])
            store.readings[node_id] = [r for r in store.readings[node_id]
                                       if not r.imputed]
            dropped += before - len(store.readings[node_id])
        click.echo(f"imputation off: {dropped} imputed rows dropped")
    cfg = DetectorConfig(threshold_ppm=threshold, min_duration_s=min_duration,
                         speed_gate_mps=speed_gate)
    events = detect_events_all(store, cfg)
    unsuppressed = [e for e in events if not e.suppressed]
    click.echo(f"{len(events)} events ({len(unsuppressed)} unsuppressed) over "
               f"{sum(len(v) for v in store.readings.values())} readings")
    for e in events:
        mark = " (suppressed: " + e.reason + ")" if e.suppressed else ""
        click.echo(f"  {e.node_id} [{e.t_start:.0f}, {e.t_end:.0f}] s "
                   f"peak {e.peak_ppm:.2f} ppm{mark}")
    gaps = {n: [(g.seq_start, g.seq_end) for g in gs]
            for n, gs in store.gaps.items() if gs}
    if gaps:
        click.echo(f"open gaps: {gaps}")
    if outdir:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "events.geojson").write_text(
            json.dumps(events_geojson(events), indent=2, sort_keys=True) + "\n")
        (out / "replay.json").write_text(json.dumps({
            "readings": sum(len(v) for v in store.readings.values()),
            "events": [{"node_id": e.node_id, "t_start": e.t_start,
                        "t_end": e.t_end, "peak_ppm": round(e.peak_ppm, 3),
                        "suppressed": e.suppressed, "reason": e.reason}
                       for e in events],
            "gaps": gaps,
        }, indent=2, sort_keys=True) + "\n")
        click.echo(f"replay artifacts written to {outdir}")


@main.command("report")
@click.option("--artifacts", "artifacts_dir", required=True,
              type=click.Path(exists=True))
def report_cmd(artifacts_dir):
    """Render the acceptance report from a run's artifacts directory."""
    path = Path(artifacts_dir) / "report.json"
    if not path.exists():
        click.echo("report.json missing from artifacts; partial render", err=True)
        sys.exit(1)
    doc = json.loads(path.read_text())
    click.echo(render_report_text(doc, wallclock=False), nl=False)
    sys.exit(0 if report_passed(doc) else 1)


@main.command()
@click.option("--readings", "readings_path", required=True, type=click.Path(exists=True))
@click.option("--format", "fmt", type=click.Choice(["csv", "geojson"]),
              default="csv")
@click.option("--nodes", default=None, help="Comma-separated node filter.")
@click.option("--threshold", type=float, default=5.0,
              help="Detector threshold for geojson event export.")
@click.option("--out", "out_path", required=True, type=click.Path())
def export(readings_path, fmt, nodes, threshold, out_path):
    """Export a store snapshot as schema-exact CSV or event GeoJSON."""
    store = import_csv(Path(readings_path).read_text())
    node_filter = nodes.split(",") if nodes else None
    if fmt == "csv":
        Path(out_path).write_text(export_csv(store, node_ids=node_filter))
    else:
        cfg = DetectorConfig(threshold_ppm=threshold)
        events = detect_events_all(store, cfg)
        if node_filter:
            events = [e for e in events if e.node_id in node_filter]
        Path(out_path).write_text(
            json.dumps(events_geojson(events), indent=2, sort_keys=True) + "\n")
    click.echo(f"wrote {out_path}")


@main.group()
def calibrate():
    """Fit or apply a calibration model."""


@calibrate.command("fit")
@click.option("--scenario", "scenario_ref", default=None,
              help="Fit from this scenario's reference campaign.")
@click.option("--pairs", "pairs_path", type=click.Path(exists=True), default=None,
              help="CSV with raw,temp_c,rh_pct,press_hpa,ref_ppm columns.")
@click.option("--n", "n_pairs", type=int, default=480)
@click.option("--lam", type=float, default=1e-6)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_path", required=True, type=click.Path())
def calibrate_fit(scenario_ref, pairs_path, n_pairs, lam, seed, out_path):
    if (scenario_ref is None) == (pairs_path is None):
        raise click.ClickException("pass exactly one of --scenario / --pairs")
    if scenario_ref is not None:
        from .world import World
        scenario = _load(scenario_ref, seed, None, None)
        world = World(scenario)
        rng = np.random.Generator(np.random.PCG64(world.analytics_seed.spawn(1)[0]))
        pairs = world.calibration_pairs(n_pairs, rng)
    else:
        import csv as csvmod
        from .nodes import Sample
        pairs = []
        with open(pairs_path) as fh:
            for k, row in enumerate(csvmod.DictReader(fh)):
                sample = Sample(node_id="pairs", seq=k, ts=float(k),
                                ch4_ppm_raw=float(row["raw"]),
                                co2_ppm_raw=0.0, temp_c=float(row["temp_c"]),
                                rh_pct=float(row["rh_pct"]),
                                press_hpa=float(row["press_hpa"]), batt_v=0.0,
                                lat=0.0, lon=0.0, speed_mps=0.0)
                pairs.append((sample, float(row["ref_ppm"])))
    try:
        model = fit_calibration(pairs, ridge_lambda=lam)
    except CalibrationError as exc:
        raise click.ClickException(str(exc))
    Path(out_path).write_text(json.dumps(model.to_dict(), indent=2,
                                         sort_keys=True) + "\n")
    rep = model.report
    click.echo(f"fitted on {rep.n_train} pairs; holdout MAD {rep.mad_ppm:.4f} ppm, "
               f"R^2 {rep.r_squared:.4f}; model -> {out_path}")


@calibrate.command("apply")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--readings", "readings_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def calibrate_apply(model_path, readings_path, out_path):
    model = CalibModel.from_dict(json.loads(Path(model_path).read_text()))
    store = import_csv(Path(readings_path).read_text())
    n = 0
    for rows in store.readings.values():
        for r in rows:
            if r.ch4_ppm_raw is not None:
                r.ch4_ppm_cal = model.apply(r.ch4_ppm_raw, r.temp_c or 25.0,
                                            r.rh_pct or 50.0, r.press_hpa or 1013.0)
                n += 1
    Path(out_path).write_text(export_csv(store))
    click.echo(f"recalibrated {n} readings -> {out_path}")


@main.command()
@click.option("--scenario", "scenario_ref", required=True)
@click.option("--readings", "readings_path", required=True, type=click.Path(exists=True))
@click.option("--window", default=None, help="t0:t1 seconds to invert over.")
@click.option("--pitch", type=float, default=None,
              help="Candidate grid pitch in meters (default: coarse cell).")
@click.option("--bbox", default=None, help="x0:y0:x1:y1 candidate region.")
@click.option("--resolution", type=click.Choice(["coarse", "fine"]),
              default="coarse")
@click.option("--out", "out_path", type=click.Path(), default=None)
def locate(scenario_ref, readings_path, window, pitch, bbox, resolution, out_path):
    """Invert recorded readings for source positions and strengths."""
    scenario = _load(scenario_ref, None, None, None)
    store = import_csv(Path(readings_path).read_text())
    t_range = None
    if window:
        t0, t1 = (float(v) for v in window.split(":"))
        t_range = (t0, t1)
    rows = [r for r in store.rows(t_range=t_range) if not r.imputed]
    pitch = pitch or scenario.grid.coarse_cell_m
    if bbox:
        x0, y0, x1, y1 = (float(v) for v in bbox.split(":"))
    else:
        x0, y0 = 0.0, 0.0
        x1, y1 = scenario.extent_m
    candidates = candidate_grid((x0, y0, x1, y1), pitch)
    if len(candidates) > 400:
        raise click.ClickException(
            f"{len(candidates)} candidates would need {len(candidates)} forward "
            "runs; narrow --bbox or raise --pitch")
    estimates = localize(scenario, rows, candidates, resolution=resolution)
    if not estimates:
        click.echo("no excess over ambient: empty estimate list")
        return
    for e in estimates[:10]:
        lat, lon = meters_to_latlon(e.position[0], e.position[1],
                                    scenario.origin_latlon)
        click.echo(f"rank {e.rank}: ({e.position[0]:.0f}, {e.position[1]:.0f}) m "
                   f"[{lat:.5f}, {lon:.5f}]  {e.strength_g_s:.3f} g/s  "
                   f"delta {e.delta_residual:.4f}")
    if out_path:
        feats = {"type": "FeatureCollection", "features": []}
        for e in estimates:
            lat, lon = meters_to_latlon(e.position[0], e.position[1],
                                        scenario.origin_latlon)
            feats["features"].append({
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [round(lon, 6),
                                                              round(lat, 6)]},
                "properties": {"candidate_id": e.candidate_id,
                               "strength_g_s": round(e.strength_g_s, 4),
                               "rank": e.rank,
                               "delta_residual": round(e.delta_residual, 6)}})
        Path(out_path).write_text(json.dumps(feats, indent=2, sort_keys=True) + "\n")
        click.echo(f"wrote {out_path}")


@main.command()
@click.option("--scenario", "scenario_ref", required=True)
@click.option("--bind", default="127.0.0.1:8800")
@click.option("--seed", type=int, default=None)
@click.option("--scale", type=float, default=None)
@click.option("--data-dir", type=click.Path(), default=None,
              help="Directory for snapshots.")
def serve(scenario_ref, bind, seed, scale, data_dir):
    """Run the gateway: live simulation + HTTP/stream API for the dashboard."""
    from .gateway import serve_runtime
    scenario = _load(scenario_ref, seed, None, scale)
    rt = TwinRuntime(scenario)
    click.echo(f"gateway on http://{bind} (scenario {scenario.name}, "
               f"clock x{scenario.clock_scale})")
    serve_runtime(rt, bind=bind, data_dir=data_dir)


if __name__ == "__main__":
    main()
