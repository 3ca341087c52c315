"""Gap filling from neighboring sensors.

Primary path: inverse-distance-weighted (power 2) mean of calibrated
readings from nodes within the radius that measured within half a sample
period of the missing timestamp.  Fallback: the node's last observation
decaying exponentially toward ambient with a one-hour time constant.
Imputed readings carry no raw fields and are flagged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .store import GapRecord, Reading, SeriesStore

IDW_POWER = 2
DEFAULT_RADIUS_M = 2000.0
DECAY_TAU_S = 3600.0


@dataclass(frozen=True)
class ImputeConfig:
    radius_m: float = DEFAULT_RADIUS_M
    ambient_ppm: float = 1.9


def idw_mean(values: list[float], distances_m: list[float]) -> float:
    weights = [1.0 / max(d, 1e-6) ** IDW_POWER for d in distances_m]
    return sum(w * v for w, v in zip(weights, values)) / sum(weights)


def decay_to_ambient(last_value: float, dt_s: float, ambient: float,
                     tau_s: float = DECAY_TAU_S) -> float:
    return ambient + (last_value - ambient) * math.exp(-dt_s / tau_s)


def _nearest_within(rows: list[Reading], ts: float, half_window: float
                    ) -> Reading | None:
    best = None
    for r in rows:
        if r.imputed or abs(r.ts - ts) > half_window:
            continue
        if best is None or abs(r.ts - ts) < abs(best.ts - ts):
            best = r
    return best


def impute_gap(store: SeriesStore, gap: GapRecord,
               node_positions: dict[str, tuple[float, float]],
               cfg: ImputeConfig | None = None,
               ingest_ts: float = 0.0) -> list[Reading]:
    """Fill one recorded gap; returns the imputed readings (also stored)."""
    cfg = cfg or ImputeConfig()
    node_id = gap.node_id
    if node_id not in node_positions:
        return []
    own_rows = store.readings.get(node_id, [])
    period = ((gap.ts_after - gap.ts_before) / (gap.missing_count + 1)
              if gap.ts_after > gap.ts_before else 4.0)
    half_window = period / 2.0
    x0, y0 = node_positions[node_id]

    neighbors = []
    for other_id, pos in node_positions.items():
        if other_id == node_id or other_id not in store.readings:
            continue
        d = math.hypot(pos[0] - x0, pos[1] - y0)
        if d <= cfg.radius_m:
            neighbors.append((other_id, d))

    out: list[Reading] = []
    for k in range(1, gap.missing_count + 1):
        ts = gap.ts_before + k * period
        vals, dists = [], []
        for other_id, d in neighbors:
            r = _nearest_within(store.readings[other_id], ts, half_window)
            if r is not None:
                vals.append(r.ch4_ppm_cal)
                dists.append(d)
        if vals:
            value = idw_mean(vals, dists)
        else:
            prior = [r for r in own_rows if r.ts < ts and not r.imputed]
            if not prior:
                continue  # nothing to extrapolate from: gap remains
            last = prior[-1]
            value = decay_to_ambient(last.ch4_ppm_cal, ts - last.ts,
                                     cfg.ambient_ppm)
        lat, lon = _position_estimate(own_rows, ts)
        r = Reading(node_id=node_id, seq=None, ts=ts, ch4_ppm_raw=None,
                    ch4_ppm_cal=value, co2_ppm=None, temp_c=None, rh_pct=None,
                    press_hpa=None, batt_v=None, lat=lat, lon=lon,
                    speed_mps=0.0, imputed=True, ingest_ts=ingest_ts)
        store.add_imputed(r)
        out.append(r)
    return out


def _position_estimate(rows: list[Reading], ts: float) -> tuple[float, float]:
    before = next((r for r in reversed(rows) if r.ts <= ts), None)
    after = next((r for r in rows if r.ts >= ts), None)
    pick = before or after
    if pick is None:
        return 0.0, 0.0
    return pick.lat, pick.lon


def impute_all_gaps(store: SeriesStore,
                    node_positions: dict[str, tuple[float, float]],
                    cfg: ImputeConfig | None = None,
                    ingest_ts: float = 0.0) -> list[Reading]:
    out = []
    for node_id in sorted(store.gaps):
        for gap in list(store.gaps[node_id]):
            out.extend(impute_gap(store, gap, node_positions, cfg, ingest_ts))
    return out
