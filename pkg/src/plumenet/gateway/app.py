"""HTTP/streaming service boundary of the digital twin.

Every read endpoint is a pure view over the runtime (verified by state
hashing in tests); mutation flows only through command dispatch and
simulation control.  The live channel is served both as a WebSocket at
/ws/live and as a cursor-polling endpoint at /api/live/poll with the same
frame semantics (ordered, exactly-once per connection, bounded buffer).
"""

from __future__ import annotations

import math
import threading
import time
from pathlib import Path

import anyio
from fastapi import FastAPI, HTTPException, Query, Request, Response, WebSocket
from fastapi.responses import HTMLResponse, JSONResponse
from starlette.websockets import WebSocketDisconnect

from ..report import build_report, estimates_geojson, events_geojson
from ..runtime import LIVE_BUFFER_FRAMES, TwinRuntime
from ..twin import export_csv

WS_POLL_INTERVAL_S = 0.05


class SimDriver(threading.Thread):
    """Paces the simulation clock against wall time at clock_scale."""

    def __init__(self, runtime: TwinRuntime, lock: threading.RLock,
                 run_duration_s: float | None = None):
        super().__init__(daemon=True, name="sim-driver")
        self.runtime = runtime
        self.lock = lock
        self.run_duration_s = run_duration_s
        self.paused = False
        self.clock_scale = runtime.scenario.clock_scale or 60.0
        self._stop = threading.Event()
        self.finished = threading.Event()

    def run(self) -> None:
        tick = self.runtime.scenario.tick_s
        while not self._stop.is_set():
            if self.run_duration_s is not None and \
                    self.runtime.now >= self.run_duration_s - 1e-9:
                break
            if self.paused:
                time.sleep(0.02)
                continue
            with self.lock:
                self.runtime.advance(tick)
            delay = tick / max(self.clock_scale, 1e-6)
            time.sleep(min(delay, 0.5))
        self.finished.set()

    def stop(self) -> None:
        self._stop.set()


def create_app(runtime: TwinRuntime, driver: SimDriver | None = None,
               lock: threading.RLock | None = None,
               data_dir: str | None = None,
               frontend_dir: str | None = None) -> FastAPI:
    lock = lock or threading.RLock()
    app = FastAPI(title="plumenet gateway", version="0.1.0")
    app.state.runtime = runtime
    app.state.lock = lock
    app.state.driver = driver

    def _node_or_404(node_id: str) -> None:
        if node_id not in runtime.world.nodes:
            raise HTTPException(status_code=404, detail=f"unknown node {node_id!r}")

    @app.get("/api/nodes")
    def nodes():
        with lock:
            return {"nodes": runtime.list_nodes(), "t": runtime.now}

    @app.get("/api/nodes/{node_id}/series")
    def series(node_id: str, request: Request,
               t_from: float | None = Query(None, alias="from"),
               t_to: float | None = Query(None, alias="to"),
               raw: bool = False, include_imputed: bool = True,
               downsample: int | None = None,
               limit: int = Query(1000, le=10_000), offset: int = 0):
        _node_or_404(node_id)
        t_range = None
        if t_from is not None or t_to is not None:
            t_range = (t_from if t_from is not None else 0.0,
                       t_to if t_to is not None else float("inf"))
        with lock:
            if "text/csv" in request.headers.get("accept", ""):
                text = export_csv(runtime.store, node_ids=[node_id])
                return Response(content=text, media_type="text/csv")
            pts = runtime.store.series(
                [node_id], t_range=t_range, calibrated=not raw,
                include_imputed=include_imputed, downsample=downsample)[node_id]
        page = pts[offset:offset + limit]
        next_offset = offset + limit if offset + limit < len(pts) else None
        return {"node_id": node_id, "points": [[t, v] for t, v in page],
                "total": len(pts), "next_offset": next_offset,
                "calibrated": not raw}

    @app.get("/api/heatmap")
    def heatmap(bbox: str | None = None, cells: int = Query(64, le=512),
                layer: str = "readings_idw"):
        with lock:
            if bbox is None:
                box = (0.0, 0.0, *runtime.scenario.extent_m)
            else:
                try:
                    x0, y0, x1, y1 = (float(v) for v in bbox.split(":"))
                except ValueError:
                    raise HTTPException(400, "bbox must be x0:y0:x1:y1")
                box = (x0, y0, x1, y1)
            try:
                return runtime.heatmap(box, cells, layer)
            except ValueError as exc:
                raise HTTPException(400, str(exc))

    @app.get("/api/events")
    def events(include_suppressed: bool = True, geojson: bool = False):
        with lock:
            evs = runtime.events
            if not include_suppressed:
                evs = [e for e in evs if not e.suppressed]
            if geojson:
                return events_geojson(evs)
            return {"events": [{
                "node_id": e.node_id, "t_start": e.t_start, "t_end": e.t_end,
                "peak_ppm": round(e.peak_ppm, 3), "lat": e.peak_lat,
                "lon": e.peak_lon, "suppressed": e.suppressed,
                "reason": e.reason} for e in evs]}

    @app.get("/api/metrics")
    def metrics():
        with lock:
            out = {}
            for node_id, m in runtime.metrics_now().items():
                out[node_id] = {
                    "freshness_s": (None if math.isinf(m.freshness_s)
                                    else round(m.freshness_s, 2)),
                    "loss_fraction": round(m.loss_fraction, 5),
                    "bandwidth_bps": round(m.bandwidth_bps, 1),
                    "wire_latency_mean_s": round(m.wire_latency_mean_s, 4),
                    "stale": m.stale,
                    "reading_count": m.reading_count,
                }
            return {"t": runtime.now, "nodes": out}

    @app.post("/api/nodes/{node_id}/cmd")
    def dispatch(node_id: str, body: dict):
        op = body.get("op")
        if not isinstance(op, str):
            raise HTTPException(400, "body needs an 'op'")
        with lock:
            rec = runtime.dispatch_command(node_id, op, body.get("args") or {},
                                           cmd_id=body.get("cmd_id"))
        status = 200
        if rec.state == "rejected":
            status = 404 if rec.detail == "unknown node" else 409
        return JSONResponse(rec.to_dict(), status_code=status)

    @app.get("/api/commands")
    def commands():
        with lock:
            return {"commands": [rec.to_dict()
                                 for rec in runtime.commands.values()]}

    @app.get("/api/estimates")
    def estimates(geojson: bool = False):
        with lock:
            if geojson:
                return estimates_geojson(runtime)
            return {"estimates": [{
                "candidate_id": e.candidate_id, "x_m": e.position[0],
                "y_m": e.position[1], "strength_g_s": round(e.strength_g_s, 4),
                "rank": e.rank, "delta_residual": round(e.delta_residual, 6)}
                for e in runtime.estimates]}

    @app.post("/api/inverse/run")
    def inverse_run(body: dict | None = None):
        body = body or {}
        from ..inverse import candidate_grid, localize
        with lock:
            sc = runtime.scenario
            pitch = float(body.get("pitch", sc.grid.coarse_cell_m))
            if "bbox" in body:
                x0, y0, x1, y1 = (float(v) for v in body["bbox"])
            else:
                raise HTTPException(400, "body needs bbox [x0, y0, x1, y1]")
            window = body.get("window")
            t_range = (float(window[0]), float(window[1])) if window else None
            rows = [r for r in runtime.store.rows(t_range=t_range)
                    if not r.imputed]
            candidates = candidate_grid((x0, y0, x1, y1), pitch)
            if len(candidates) > 400:
                raise HTTPException(400, f"{len(candidates)} candidates is too "
                                         "many; narrow bbox or raise pitch")
            try:
                runtime.estimates = localize(
                    sc, rows, candidates,
                    resolution=body.get("resolution", "coarse"))
            except ValueError as exc:
                raise HTTPException(400, str(exc))
            return {"estimates": len(runtime.estimates)}

    @app.get("/api/sim/state")
    def sim_state():
        with lock:
            return {
                "scenario": runtime.scenario.name,
                "t": runtime.now,
                "duration_s": runtime.scenario.duration_s,
                "paused": driver.paused if driver else True,
                "clock_scale": driver.clock_scale if driver
                               else runtime.scenario.clock_scale,
                "seed": runtime.scenario.seed,
                "node_count": len(runtime.world.nodes),
            }

    @app.post("/api/sim/control")
    def sim_control(body: dict):
        action = body.get("action")
        if driver is None:
            raise HTTPException(409, "no simulation driver attached")
        if action == "pause":
            driver.paused = True
        elif action == "resume":
            driver.paused = False
        elif action == "set_scale":
            try:
                driver.clock_scale = float(body["scale"])
            except (KeyError, ValueError):
                raise HTTPException(400, "set_scale needs a numeric 'scale'")
        elif action == "snapshot":
            target = Path(data_dir or ".") / f"snapshot-{int(runtime.now)}.pkl"
            with lock:
                runtime.snapshot(target)
            return {"ok": True, "snapshot": str(target)}
        else:
            raise HTTPException(400, f"unknown action {action!r}")
        return {"ok": True, "paused": driver.paused,
                "clock_scale": driver.clock_scale}

    @app.get("/api/live/poll")
    def live_poll(cursor: int = 0, nodes: str | None = None,
                  kinds: str | None = None, limit: int = Query(500, le=2000)):
        node_set = set(nodes.split(",")) if nodes else None
        kind_set = set(kinds.split(",")) if kinds else None
        with lock:
            overflowed = cursor and cursor < runtime.hub.oldest_available - 1
            frames = runtime.hub.since(cursor, node_set, kind_set, limit)
            new_cursor = frames[-1].seq if frames else max(
                cursor, runtime.hub.oldest_available - 1)
            return {"frames": [f.to_dict() for f in frames],
                    "cursor": new_cursor,
                    "overflowed": bool(overflowed),
                    "t": runtime.now}

    @app.websocket("/ws/live")
    async def ws_live(ws: WebSocket):
        await ws.accept()
        try:
            sub = await ws.receive_json()
        except (WebSocketDisconnect, ValueError):
            await ws.close(code=1002)
            return
        node_set = set(sub.get("nodes") or []) or None
        kind_set = set(sub.get("kinds") or []) or None
        cursor = int(sub.get("cursor") or 0)
        try:
            while True:
                with lock:
                    if cursor and cursor < runtime.hub.oldest_available - 1:
                        # consumer fell more than a full buffer behind
                        await ws.send_json({"kind": "overflow",
                                            "dropped_before": runtime.hub.oldest_available})
                        await ws.close(code=1011, reason="buffer overflow")
                        return
                    frames = runtime.hub.since(cursor, node_set, kind_set,
                                               limit=200)
                for f in frames:
                    await ws.send_json(f.to_dict())
                    cursor = f.seq
                await anyio.sleep(WS_POLL_INTERVAL_S)
        except WebSocketDisconnect:
            return

    @app.get("/api/report")
    def report():
        with lock:
            return build_report(runtime)

    if frontend_dir and Path(frontend_dir).exists():
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=frontend_dir, html=True),
                  name="frontend")
    else:
        @app.get("/")
        def index():
            return HTMLResponse(
                "<html><body><h3>plumenet gateway</h3>"
                "<p>API under <code>/api</code>; live frames at "
                "<code>/ws/live</code> or <code>/api/live/poll</code>.</p>"
                "</body></html>")

    return app


def serve_runtime(runtime: TwinRuntime, bind: str = "127.0.0.1:8800",
                  run_duration_s: float | None = None,
                  data_dir: str | None = None,
                  frontend_dir: str | None = None) -> None:
    """Prepare the runtime, start the clock driver and serve HTTP."""
    import uvicorn

    host, _, port = bind.partition(":")
    lock = threading.RLock()
    runtime.prepare()
    driver = SimDriver(runtime, lock, run_duration_s=run_duration_s)
    app = create_app(runtime, driver, lock, data_dir=data_dir,
                     frontend_dir=frontend_dir)
    config = uvicorn.Config(app, host=host or "127.0.0.1",
                            port=int(port or 8800), log_level="warning")
    server = uvicorn.Server(config)
    driver.start()
    if run_duration_s is None:
        server.run()
        driver.stop()
    else:
        thread = threading.Thread(target=server.run, daemon=True)
        thread.start()
        driver.finished.wait()
        server.should_exit = True
        thread.join(timeout=10.0)
