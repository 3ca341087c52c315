"""Telemetry ingestion and the per-node time-series store.

Ingest decodes batch payloads, cross-checks the topic against the payload,
calibrates raw readings with the currently installed model, deduplicates
by (node_id, seq) and maintains a gap index of missing sequence ranges.
Re-ingesting any payload is a no-op.  The store is append-only: rows are
never mutated, imputed rows are inserted in timestamp order.
"""

from __future__ import annotations

import bisect
import csv
import hashlib
import io
import json
from dataclasses import dataclass, field, replace

from ..nodes import decode_batch


@dataclass
class Reading:
    node_id: str
    seq: int | None
    ts: float
    ch4_ppm_raw: float | None
    ch4_ppm_cal: float
    co2_ppm: float | None
    temp_c: float | None
    rh_pct: float | None
    press_hpa: float | None
    batt_v: float | None
    lat: float
    lon: float
    speed_mps: float
    imputed: bool = False
    ingest_ts: float = 0.0
    flags: str = ""


@dataclass
class GapRecord:
    node_id: str
    seq_start: int
    seq_end: int
    ts_before: float
    ts_after: float

    @property
    def missing_count(self) -> int:
        return self.seq_end - self.seq_start + 1


@dataclass
class SeriesStore:
    readings: dict[str, list[Reading]] = field(default_factory=dict)
    gaps: dict[str, list[GapRecord]] = field(default_factory=dict)
    quarantine: list[tuple[str, bytes, str]] = field(default_factory=list)
    counters: dict[str, int] = field(default_factory=lambda: {
        "ingested": 0, "duplicates": 0, "malformed": 0, "topic_mismatch": 0})
    _seen: dict[str, set[int]] = field(default_factory=dict)

    def nodes(self) -> list[str]:
        return sorted(self.readings)

    def latest(self, node_id: str) -> Reading | None:
        rows = self.readings.get(node_id)
        return rows[-1] if rows else None

    # ---- ingestion -------------------------------------------------------------

    def ingest(self, payload: bytes, topic: str, ingest_ts: float,
               calibrator=None) -> list[Reading]:
        """Decode one data-topic payload and append its fresh samples."""
        parts = topic.split("/")
        if len(parts) != 4 or parts[-1] != "data":
            self.counters["topic_mismatch"] += 1
            self.quarantine.append((topic, payload, "not a data topic"))
            return []
        topic_node = parts[2]
        try:
            doc = decode_batch(payload)
        except (ValueError, UnicodeDecodeError) as exc:
            self.counters["malformed"] += 1
            self.quarantine.append((topic, payload, f"malformed: {exc}"))
            return []
        if doc["node_id"] != topic_node:
            self.counters["topic_mismatch"] += 1
            self.quarantine.append((topic, payload, "payload node_id does not match topic"))
            return []

        new: list[Reading] = []
        for s in doc["samples"]:
            try:
                reading = self._reading_from_sample(topic_node, s, ingest_ts, calibrator)
            except (KeyError, TypeError, ValueError) as exc:
                self.counters["malformed"] += 1
                self.quarantine.append((topic, payload, f"bad sample: {exc}"))
                continue
            if self._append(reading):
                new.append(reading)
        return new

    def _reading_from_sample(self, node_id: str, s: dict, ingest_ts: float,
                             calibrator) -> Reading:
        raw = float(s["ch4"])
        cal = raw
        if calibrator is not None:
            cal = calibrator(raw, float(s["t"]), float(s["rh"]), float(s["p"]))
        return Reading(
            node_id=node_id, seq=int(s["seq"]), ts=float(s["ts"]),
            ch4_ppm_raw=raw, ch4_ppm_cal=cal, co2_ppm=float(s["co2"]),
            temp_c=float(s["t"]), rh_pct=float(s["rh"]), press_hpa=float(s["p"]),
            batt_v=float(s["bv"]), lat=float(s["lat"]), lon=float(s["lon"]),
            speed_mps=float(s["spd"]), ingest_ts=ingest_ts)

    def _append(self, r: Reading) -> bool:
        seen = self._seen.setdefault(r.node_id, set())
        if r.seq is not None and r.seq in seen:
            self.counters["duplicates"] += 1
            return False
        rows = self.readings.setdefault(r.node_id, [])
        if r.seq is not None:
            seen.add(r.seq)
            self._update_gaps(r, rows)
        if rows and r.ts <= rows[-1].ts and not r.imputed:
            # late out-of-order arrival: keep timestamp order
            bisect.insort(rows, r, key=lambda x: x.ts)
        else:
            rows.append(r)
        self.counters["ingested"] += 1
        return True

    def _update_gaps(self, r: Reading, rows: list[Reading]) -> None:
        glist = self.gaps.setdefault(r.node_id, [])
        # a gap record closes when its sequences arrive
        for g in list(glist):
            if g.seq_start <= r.seq <= g.seq_end:
                glist.remove(g)
                if r.seq > g.seq_start:
                    glist.append(replace(g, seq_end=r.seq - 1, ts_after=r.ts))
                if r.seq < g.seq_end:
                    glist.append(replace(g, seq_start=r.seq + 1, ts_before=r.ts))
                glist.sort(key=lambda g: g.seq_start)
                return
        prev = max((row for row in rows if row.seq is not None),
                   key=lambda row: row.seq, default=None)
        if prev is not None and r.seq > prev.seq + 1:
            glist.append(GapRecord(r.node_id, prev.seq + 1, r.seq - 1,
                                   prev.ts, r.ts))
            glist.sort(key=lambda g: g.seq_start)

    def add_imputed(self, r: Reading) -> None:
        """Insert an imputed reading (no raw fields) in timestamp order."""
        rows = self.readings.setdefault(r.node_id, [])
        bisect.insort(rows, r, key=lambda x: x.ts)
        self.counters["ingested"] += 1

    # ---- queries -----------------------------------------------------------------

    def series(self, node_ids, t_range=None, calibrated: bool = True,
               include_imputed: bool = True, downsample: int | None = None
               ) -> dict[str, list[tuple[float, float]]]:
        """Ordered (ts, value) sequences with optional bucket-mean downsampling.

        Unknown nodes map to empty sequences (the caller can flag a warning).
        """
        out: dict[str, list[tuple[float, float]]] = {}
        for node_id in node_ids:
            rows = self.readings.get(node_id, [])
            if t_range is not None:
                t0, t1 = t_range
                rows = [r for r in rows if t0 <= r.ts <= t1]
            if not include_imputed:
                rows = [r for r in rows if not r.imputed]
            pts = []
            for r in rows:
                value = r.ch4_ppm_cal if calibrated else r.ch4_ppm_raw
                if value is None:
                    continue
                pts.append((r.ts, float(value)))
            if downsample and len(pts) > downsample:
                pts = _bucket_mean(pts, downsample)
            out[node_id] = pts
        return out

    def rows(self, node_ids=None, t_range=None) -> list[Reading]:
        ids = node_ids if node_ids is not None else self.nodes()
        out = []
        for node_id in ids:
            for r in self.readings.get(node_id, []):
                if t_range is None or t_range[0] <= r.ts <= t_range[1]:
                    out.append(r)
        return out

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for node_id in self.nodes():
            for r in self.readings[node_id]:
                h.update(json.dumps(
                    [r.node_id, r.seq, r.ts, r.ch4_ppm_raw, r.ch4_ppm_cal,
                     r.imputed, r.flags], separators=(",", ":")).encode())
        return h.hexdigest()


def _bucket_mean(pts: list[tuple[float, float]], n_buckets: int):
    t0, t1 = pts[0][0], pts[-1][0]
    span = (t1 - t0) or 1.0
    buckets: list[list[float]] = [[] for _ in range(n_buckets)]
    times: list[list[float]] = [[] for _ in range(n_buckets)]
    for ts, v in pts:
        k = min(int((ts - t0) / span * n_buckets), n_buckets - 1)
        buckets[k].append(v)
        times[k].append(ts)
    out = []
    for k in range(n_buckets):
        if buckets[k]:
            out.append((sum(times[k]) / len(times[k]),
                        sum(buckets[k]) / len(buckets[k])))
    return out


# ---- CSV export/import ------------------------------------------------------------

CSV_HEADER = ["node_id", "seq", "ts", "ch4_raw", "ch4_cal", "co2", "temp_c",
              "rh_pct", "press_hpa", "batt_v", "lat", "lon", "speed_mps",
              "imputed", "flags"]


def _fmt(v, nd=None) -> str:
    if v is None:
        return ""
    if nd is not None:
        return f"{v:.{nd}f}"
    return repr(v) if isinstance(v, float) else str(v)


def export_csv(store: SeriesStore, node_ids=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    ids = node_ids if node_ids is not None else store.nodes()
    for node_id in ids:
        for r in store.readings.get(node_id, []):
            w.writerow([
                r.node_id, "" if r.seq is None else r.seq, _fmt(r.ts),
                _fmt(r.ch4_ppm_raw), _fmt(r.ch4_ppm_cal), _fmt(r.co2_ppm),
                _fmt(r.temp_c), _fmt(r.rh_pct), _fmt(r.press_hpa),
                _fmt(r.batt_v), _fmt(r.lat), _fmt(r.lon), _fmt(r.speed_mps),
                "1" if r.imputed else "0", r.flags,
            ])
    return buf.getvalue()


def import_csv(text: str) -> SeriesStore:
    store = SeriesStore()
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if header != CSV_HEADER:
        raise ValueError(f"unexpected CSV schema: {header}")
    def opt(v):
        return None if v == "" else float(v)
    for row in reader:
        (node_id, seq, ts, ch4_raw, ch4_cal, co2, temp_c, rh_pct, press_hpa,
         batt_v, lat, lon, speed, imputed, flags) = row
        r = Reading(
            node_id=node_id, seq=None if seq == "" else int(seq), ts=float(ts),
            ch4_ppm_raw=opt(ch4_raw), ch4_ppm_cal=float(ch4_cal), co2_ppm=opt(co2),
            temp_c=opt(temp_c), rh_pct=opt(rh_pct), press_hpa=opt(press_hpa),
            batt_v=opt(batt_v), lat=float(lat), lon=float(lon),
            speed_mps=float(speed), imputed=imputed == "1", flags=flags)
        if r.imputed:
            store.add_imputed(r)
        else:
            store._append(r)
    return store
