"""End-to-end twin runtime: world + bus + analytics behind one clock.

`TwinRuntime` owns a `World`, subscribes an ingest client to every node's
data and status topics, fits the calibration model from a reference
campaign before the run, and exposes the query/command/streaming surface
the gateway and CLI share.  The whole runtime pickles, so a snapshot can
be restored and replayed deterministically.
"""

from __future__ import annotations

import json
import math
import pickle
from dataclasses import dataclass, field

import numpy as np

from .config import AnalysisConfig, Scenario
from .dispersion import bilinear_sample
from .inverse import SourceEstimate, candidate_grid, localize
from .nodes import cmd_topic, encode_command, meters_to_latlon
from .twin import (CalibModel, DetectorConfig, LeakEvent, NodeMetrics,
                   Reading, SeriesStore, compute_metrics, detect_events_all,
                   fit_calibration)
from .twin.impute import ImputeConfig, impute_all_gaps
from .world import World

TWIN_CLIENT_ID = "twin-core"
COMMAND_TIMEOUT_S = 1080.0  # three duty cycles
LIVE_BUFFER_FRAMES = 10_000


@dataclass
class CommandRecord:
    cmd_id: str
    node_id: str
    op: str
    args: dict
    state: str = "sent"  # sent -> acked | rejected | timeout
    issued_by: str = "operator"
    issued_at: float = 0.0
    resolved_at: float | None = None
    detail: str = ""

    def to_dict(self) -> dict:
        return {
            "cmd_id": self.cmd_id, "node_id": self.node_id, "op": self.op,
            "args": self.args, "state": self.state, "issued_by": self.issued_by,
            "issued_at": self.issued_at, "resolved_at": self.resolved_at,
            "detail": self.detail,
        }


@dataclass
class LiveFrame:
    seq: int
    kind: str  # reading | event | metrics | command_update
    node_id: str | None
    payload: dict
    server_ts: float

    def to_dict(self) -> dict:
        return {"seq": self.seq, "kind": self.kind, "node_id": self.node_id,
                "payload": self.payload, "server_ts": self.server_ts}


class LiveHub:
    """Ordered frame log with a bounded ring, shared by ws and polling."""

    def __init__(self, capacity: int = LIVE_BUFFER_FRAMES):
        self.capacity = capacity
        self.frames: list[LiveFrame] = []
        self.next_seq = 1

    def publish(self, kind: str, node_id: str | None, payload: dict,
                server_ts: float) -> LiveFrame:
        frame = LiveFrame(self.next_seq, kind, node_id, payload, server_ts)
        self.next_seq += 1
        self.frames.append(frame)
        if len(self.frames) > self.capacity:
            del self.frames[:len(self.frames) - self.capacity]
        return frame

    def since(self, cursor: int, nodes: set[str] | None = None,
              kinds: set[str] | None = None, limit: int = 500) -> list[LiveFrame]:
        out = []
        for f in self.frames:
            if f.seq <= cursor:
                continue
            if kinds and f.kind not in kinds:
                continue
            if nodes and f.node_id is not None and f.node_id not in nodes:
                continue
            out.append(f)
            if len(out) >= limit:
                break
        return out

    @property
    def oldest_available(self) -> int:
        return self.frames[0].seq if self.frames else self.next_seq


@dataclass
class DetectionScore:
    truth_events: list[tuple[str, float, float]] = field(default_factory=list)
    matched: int = 0
    recall: float = 1.0
    false_positives: int = 0
    suppressed: list[LeakEvent] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "truth_event_count": len(self.truth_events),
            "matched": self.matched,
            "recall": round(self.recall, 4),
            "false_positives": self.false_positives,
            "suppressed_count": len(self.suppressed),
        }


@dataclass
class ImputationScore:
    node_id: str
    dropped: int
    imputed: int
    mae_ppm: float

    def to_dict(self) -> dict:
        return {"node_id": self.node_id, "dropped": self.dropped,
                "imputed": self.imputed, "mae_ppm": round(self.mae_ppm, 4)}


class TwinRuntime:
    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.world = World(scenario)
        self.store = SeriesStore()
        self.hub = LiveHub()
        self.events: list[LeakEvent] = []
        self.estimates: list[SourceEstimate] = []
        self.commands: dict[str, CommandRecord] = {}
        self.calibration: CalibModel | None = None
        self.node_status: dict[str, dict] = {}
        self.detection_score: DetectionScore | None = None
        self.imputation_score: ImputationScore | None = None
        self._analysis_done = False

        a = scenario.analysis
        self.detector_cfg = DetectorConfig(
            threshold_ppm=a.threshold_ppm, min_duration_s=a.min_duration_s,
            speed_gate_mps=a.speed_gate_mps, baseline_window_s=a.baseline_window_s,
            threshold_is_absolute=a.threshold_is_absolute,
            ambient_ppm=scenario.ambient_ch4_ppm)

        calib_seed, dropout_seed = self.world.analytics_seed.spawn(2)
        self._calib_rng = np.random.Generator(np.random.PCG64(calib_seed))
        self._dropout_rng = np.random.Generator(np.random.PCG64(dropout_seed))

        self._twin_client = self.world.net.add_client(
            TWIN_CLIENT_ID, clean_session=False, on_message=self._on_message)

    # ---- lifecycle ---------------------------------------------------------------

    def prepare(self) -> None:
        """Fit calibration from the reference campaign, bring the fabric up."""
        a = self.scenario.analysis
        pairs = self.world.calibration_pairs(a.calibration_n, self._calib_rng)
        self.calibration = fit_calibration(pairs, a.calibration_lambda)
        self.world.net.connect_client(TWIN_CLIENT_ID)
        self._twin_client.subscribe("aimnet/v1/+/data", qos=1)
        self._twin_client.subscribe("aimnet/v1/+/status", qos=1)
        self.world.connect_all()

    def advance(self, dt: float) -> None:
        self.world.advance(dt)
        self._expire_commands()
        new_events = self._refresh_events()
        for ev in new_events:
            self.hub.publish("event", ev.node_id, _event_dict(ev, self.scenario),
                             self.now)

    def run(self, duration_s: float | None = None, chunk_s: float = 60.0) -> None:
        self.prepare()
        remaining = duration_s if duration_s is not None else self.scenario.duration_s
        while remaining > 1e-9:
            step = min(chunk_s, remaining)
            self.advance(step)
            remaining -= step
        self.settle()
        self.analyze()

    def settle(self, extra_s: float = 1.0) -> None:
        """Drain in-flight radio traffic so end-of-run metrics are exact."""
        net = self.world.net
        net.run_until(net.now + extra_s)

    @property
    def now(self) -> float:
        return self.world.now

    # ---- ingest + status ----------------------------------------------------------

    def _calibrator(self, raw, temp_c, rh_pct, press_hpa):
        if self.calibration is None:
            return raw
        return self.calibration.apply(raw, temp_c, rh_pct, press_hpa)

    def _on_message(self, topic: str, payload: bytes, packet) -> None:
        if topic.endswith("/data"):
            new = self.store.ingest(payload, topic, ingest_ts=self.world.net.now,
                                    calibrator=self._calibrator)
            for r in new:
                self.hub.publish("reading", r.node_id, _reading_dict(r), self.now)
        elif topic.endswith("/status"):
            self._on_status(topic.split("/")[2], payload)

    def _on_status(self, node_id: str, payload: bytes) -> None:
        try:
            doc = json.loads(payload.decode())
        except ValueError:
            return
        if doc.get("result") == "heartbeat":
            status = dict(doc.get("detail") or {})
            status["last_status_ts"] = self.now
            self.node_status[node_id] = status
            return
        cmd_id = doc.get("cmd_id")
        rec = self.commands.get(cmd_id)
        if rec is None or rec.state != "sent":
            return
        rec.state = "acked" if doc.get("result") == "ok" else "rejected"
        rec.detail = str(doc.get("detail", ""))
        rec.resolved_at = self.now
        self.hub.publish("command_update", rec.node_id, rec.to_dict(), self.now)

    # ---- commands --------------------------------------------------------------------

    def dispatch_command(self, node_id: str, op: str, args: dict | None = None,
                         cmd_id: str | None = None,
                         issued_by: str = "operator") -> CommandRecord:
        args = args or {}
        if cmd_id is None:
            cmd_id = f"cmd-{len(self.commands) + 1:05d}"
        if cmd_id in self.commands:
            rec = CommandRecord(cmd_id, node_id, op, args, state="rejected",
                                issued_by=issued_by, issued_at=self.now,
                                resolved_at=self.now, detail="duplicate cmd_id")
            return rec
        if node_id not in self.world.nodes:
            rec = CommandRecord(cmd_id, node_id, op, args, state="rejected",
                                issued_by=issued_by, issued_at=self.now,
                                resolved_at=self.now, detail="unknown node")
            self.commands[cmd_id] = rec
            return rec
        rec = CommandRecord(cmd_id, node_id, op, args, issued_by=issued_by,
                            issued_at=self.now)
        self.commands[cmd_id] = rec
        self._twin_client.publish(cmd_topic(node_id),
                                  encode_command(cmd_id, op, args), qos=1)
        self.hub.publish("command_update", node_id, rec.to_dict(), self.now)
        return rec

    def _expire_commands(self) -> None:
        for rec in self.commands.values():
            if rec.state == "sent" and self.now - rec.issued_at > COMMAND_TIMEOUT_S:
                rec.state = "timeout"
                rec.resolved_at = self.now
                self.hub.publish("command_update", rec.node_id, rec.to_dict(),
                                 self.now)

    # ---- analytics ------------------------------------------------------------------

    def _refresh_events(self) -> list[LeakEvent]:
        current = detect_events_all(self.store, self.detector_cfg)
        known = {(e.node_id, e.t_start, e.t_end, e.suppressed) for e in self.events}
        fresh = [e for e in current
                 if (e.node_id, e.t_start, e.t_end, e.suppressed) not in known]
        self.events = current
        return fresh

    def metrics_now(self) -> dict[str, NodeMetrics]:
        return compute_metrics(self.store, self.world.net.metrics(),
                               now=self.now,
                               node_ids=list(self.world.nodes))

    def node_positions_m(self) -> dict[str, tuple[float, float]]:
        return {node_id: self.world.node_position(node_id, self.now)[:2]
                for node_id in self.world.nodes}

    def analyze(self) -> None:
        """Post-run analyses: detection scoring, imputation plant, inversion."""
        self._refresh_events()
        self.detection_score = self._score_detection()
        a = self.scenario.analysis
        if a.impute_dropout_node:
            self.imputation_score = self._planted_dropout_evaluation(
                a.impute_dropout_node, a.impute_dropout_fraction)
        if a.inverse_enabled:
            self.estimates = self._run_inverse()
        self._analysis_done = True

    def _truth_events(self) -> list[tuple[str, float, float]]:
        """Super-threshold runs of the true concentration at each node."""
        cfg = self.detector_cfg
        out = []
        for node_id, records in self.world.truth.items():
            if not records:
                continue
            period = self.scenario.tick_s
            k = 0
            n = len(records)
            while k < n:
                if records[k].true_ch4_ppm < cfg.threshold_ppm:
                    k += 1
                    continue
                j = k
                while (j + 1 < n
                       and records[j + 1].true_ch4_ppm >= cfg.threshold_ppm):
                    j += 1
                t_start, t_end = records[k].t, records[j].t + period
                if t_end - t_start >= cfg.min_duration_s:
                    out.append((node_id, t_start, t_end))
                k = j + 1
        return out

    def _score_detection(self) -> DetectionScore:
        truth = self._truth_events()
        unsuppressed = [e for e in self.events if not e.suppressed]
        suppressed = [e for e in self.events if e.suppressed]
        pad = 2 * self.scenario.tick_s + 8.0  # inlet lag shifts edges slightly
        matched = 0
        for node_id, t0, t1 in truth:
            if any(e.node_id == node_id and e.overlaps(t0 - pad, t1 + pad)
                   for e in unsuppressed):
                matched += 1
        fp = 0
        for e in unsuppressed:
            if not any(node_id == e.node_id and e.overlaps(t0 - pad, t1 + pad)
                       for node_id, t0, t1 in truth):
                fp += 1
        recall = matched / len(truth) if truth else 1.0
        return DetectionScore(truth_events=truth, matched=matched, recall=recall,
                              false_positives=fp, suppressed=suppressed)

    def _planted_dropout_evaluation(self, node_id: str, fraction: float
                                    ) -> ImputationScore | None:
        """Remove a random slice of one node's readings, impute, score MAE."""
        from .twin.store import GapRecord
        rows = self.store.readings.get(node_id)
        if not rows:
            return None
        real = [r for r in rows if not r.imputed and r.seq is not None]
        n_drop = max(1, int(len(real) * fraction))
        drop_idx = sorted(self._dropout_rng.choice(len(real), size=n_drop,
                                                   replace=False).tolist())
        dropped = [real[k] for k in drop_idx]
        dropped_seqs = {r.seq for r in dropped}
        kept = [r for r in rows if r.seq not in dropped_seqs]
        self.store.readings[node_id] = kept
        self.store._seen[node_id] -= dropped_seqs
        gaps = self.store.gaps.setdefault(node_id, [])
        by_seq = {r.seq: r for r in real}
        runs: list[list[int]] = []
        for s in sorted(dropped_seqs):
            if runs and s == runs[-1][-1] + 1:
                runs[-1].append(s)
            else:
                runs.append([s])
        for run in runs:
            before = by_seq.get(run[0] - 1)
            after = by_seq.get(run[-1] + 1)
            ts_before = before.ts if before else by_seq[run[0]].ts - 4.0
            ts_after = after.ts if after else by_seq[run[-1]].ts + 4.0
            gaps.append(GapRecord(node_id, run[0], run[-1], ts_before, ts_after))
        gaps.sort(key=lambda g: g.seq_start)

        imputed = impute_all_gaps(
            self.store, self.node_positions_m(),
            ImputeConfig(radius_m=self.scenario.analysis.impute_radius_m,
                         ambient_ppm=self.scenario.ambient_ch4_ppm),
            ingest_ts=self.now)
        truth_by_ts = {round(r.ts, 3): r.ch4_ppm_cal for r in dropped}
        errors = []
        for r in imputed:
            if r.node_id != node_id:
                continue
            key = round(r.ts, 3)
            if key in truth_by_ts:
                errors.append(abs(r.ch4_ppm_cal - truth_by_ts[key]))
        mae = float(np.mean(errors)) if errors else float("nan")
        return ImputationScore(node_id=node_id, dropped=n_drop,
                               imputed=len(errors), mae_ppm=mae)

    def _run_inverse(self) -> list[SourceEstimate]:
        a = self.scenario.analysis
        window = a.inverse_window or (0.0, self.scenario.duration_s)
        rows = [r for r in self.store.rows(t_range=window) if not r.imputed]
        if a.inverse_candidates:
            candidates = a.inverse_candidates
        else:
            # pitch-aligned grid over the hot region around peak readings
            hot = max(rows, key=lambda r: r.ch4_ppm_cal, default=None)
            if hot is None:
                return []
            positions = self.node_positions_m()
            cx, cy = positions.get(hot.node_id, (self.scenario.extent_m[0] / 2,
                                                 self.scenario.extent_m[1] / 2))
            pitch = a.candidate_pitch_m
            half = 3 * pitch
            x0 = max(0.0, cx - 300.0 - half)
            y0 = max(0.0, cy - half)
            bbox = (x0, y0, min(self.scenario.extent_m[0], x0 + 2 * half + 300.0),
                    min(self.scenario.extent_m[1], y0 + 2 * half))
            candidates = candidate_grid(bbox, pitch)
        return localize(self.scenario, rows, candidates,
                        resolution=a.inverse_resolution)

    # ---- gateway surface ------------------------------------------------------------

    def list_nodes(self) -> list[dict]:
        metrics = self.metrics_now()
        out = []
        for node_id, node in self.world.nodes.items():
            x, y, _ = self.world.node_position(node_id, self.now)
            lat, lon = meters_to_latlon(x, y, self.scenario.origin_latlon)
            latest = self.store.latest(node_id)
            m = metrics.get(node_id)
            status = self.node_status.get(node_id, {})
            freshness = m.freshness_s if m else math.inf
            if "last_status_ts" in status:
                freshness = min(freshness, self.now - status["last_status_ts"])
            out.append({
                "node_id": node_id,
                "x_m": round(x, 2), "y_m": round(y, 2),
                "lat": round(lat, 6), "lon": round(lon, 6),
                "latest_ch4_ppm": (round(latest.ch4_ppm_cal, 3)
                                   if latest else None),
                "latest_ts": latest.ts if latest else None,
                "freshness_s": None if math.isinf(freshness) else round(freshness, 1),
                "stale": m.stale if m else True,
                "battery_v": status.get("battery_v"),
                "isolated": bool(status.get("isolated",
                                            node.state.isolated)),
                "phase": node.state.phase.value,
                "flags": "",
            })
        return out

    def heatmap(self, bbox: tuple[float, float, float, float], cells: int,
                layer: str) -> dict:
        x0, y0, x1, y1 = bbox
        if not (x1 > x0 and y1 > y0):
            raise ValueError("bbox must have positive area")
        if not (self.scenario.contains(x0, y0) and self.scenario.contains(x1, y1)):
            raise ValueError("bbox outside extent")
        cells = min(int(cells), 512)
        nx = ny = cells
        dx, dy = (x1 - x0) / nx, (y1 - y0) / ny
        xs = x0 + (np.arange(nx) + 0.5) * dx
        ys = y0 + (np.arange(ny) + 0.5) * dy
        X, Y = np.meshgrid(xs, ys)
        ambient = self.scenario.ambient_ch4_ppm
        if layer == "model_coarse":
            values = ambient + bilinear_sample(self.world.coarse_grid,
                                               self.world.coarse.values,
                                               X.ravel(), Y.ravel()).reshape(X.shape)
        elif layer == "model_fine":
            if self.world.fine is None:
                raise ValueError("scenario has no fine grid")
            values = ambient + bilinear_sample(self.world.fine.grid,
                                               self.world.fine.values,
                                               X.ravel(), Y.ravel()).reshape(X.shape)
        elif layer == "readings_idw":
            values = self._idw_layer(X, Y)
        else:
            raise ValueError(f"unknown layer {layer!r}")
        return {
            "layer": layer, "origin_m": [x0, y0], "cell_m": [dx, dy],
            "nx": nx, "ny": ny, "units": "ppm", "t": self.now,
            "values": [[None if math.isnan(v) else round(float(v), 4)
                        for v in row] for row in values],
        }

    def _idw_layer(self, X: np.ndarray, Y: np.ndarray,
                   radius_m: float | None = None, power: int = 2) -> np.ndarray:
        radius = radius_m or self.scenario.analysis.impute_radius_m
        values = np.full(X.shape, np.nan)
        num = np.zeros(X.shape)
        den = np.zeros(X.shape)
        positions = self.node_positions_m()
        for node_id, (nx_pos, ny_pos) in positions.items():
            latest = self.store.latest(node_id)
            if latest is None:
                continue
            d2 = (X - nx_pos) ** 2 + (Y - ny_pos) ** 2
            inside = d2 <= radius ** 2
            w = np.where(inside, 1.0 / np.maximum(d2, 1e-6) ** (power / 2), 0.0)
            num += w * latest.ch4_ppm_cal
            den += w
        mask = den > 0
        values[mask] = num[mask] / den[mask]
        return values

    # ---- persistence ------------------------------------------------------------------

    def __getstate__(self):
        state = self.__dict__.copy()
        return state

    def snapshot(self, path) -> None:
        with open(path, "wb") as fh:
            pickle.dump(self, fh)

    @classmethod
    def restore(cls, path) -> "TwinRuntime":
        with open(path, "rb") as fh:
            runtime = pickle.load(fh)
        if not isinstance(runtime, cls):
            raise TypeError("snapshot does not contain a runtime")
        return runtime


def _reading_dict(r: Reading) -> dict:
    return {
        "node_id": r.node_id, "seq": r.seq, "ts": r.ts,
        "ch4_ppm_raw": r.ch4_ppm_raw, "ch4_ppm_cal": round(r.ch4_ppm_cal, 4),
        "lat": r.lat, "lon": r.lon, "speed_mps": r.speed_mps,
        "imputed": r.imputed,
    }


def _event_dict(e: LeakEvent, scenario: Scenario) -> dict:
    return {
        "node_id": e.node_id, "t_start": e.t_start, "t_end": e.t_end,
        "peak_ppm": round(e.peak_ppm, 3), "lat": e.peak_lat, "lon": e.peak_lon,
        "suppressed": e.suppressed, "reason": e.reason,
    }
