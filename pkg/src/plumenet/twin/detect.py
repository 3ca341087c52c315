"""Leak-event detection and per-reading anomaly flags.

An event is a maximal run of super-threshold calibrated readings.  Runs
shorter than the minimum duration normally emit nothing; if every sample
in a short run is moving faster than the speed gate it is emitted anyway,
marked suppressed, so operators can audit high-speed artifacts (the
mobile platform's classic highway false positive) without them polluting
the alert stream.  A run's duration includes one trailing sample period,
so a single super-threshold sample has nonzero duration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .store import Reading


@dataclass
class DetectorConfig:
    threshold_ppm: float = 5.0
    min_duration_s: float = 8.0
    speed_gate_mps: float = 15.0
    baseline_window_s: float = 1800.0
    threshold_is_absolute: bool = True  # False: threshold above rolling baseline
    ambient_ppm: float = 1.9

    def __post_init__(self) -> None:
        if self.threshold_is_absolute and self.threshold_ppm <= self.ambient_ppm:
            raise ValueError("threshold must exceed ambient")
        if self.min_duration_s <= 0:
            raise ValueError("min_duration_s must be positive")


@dataclass
class LeakEvent:
    node_id: str
    t_start: float
    t_end: float
    peak_ppm: float
    peak_lat: float
    peak_lon: float
    suppressed: bool = False
    reason: str = ""

    def overlaps(self, t0: float, t1: float) -> bool:
        return self.t_start <= t1 and t0 <= self.t_end


def _sample_period(rows: list[Reading]) -> float:
    diffs = sorted(b.ts - a.ts for a, b in zip(rows, rows[1:]) if b.ts > a.ts)
    if not diffs:
        return 4.0
    return diffs[len(diffs) // 2]


def _rolling_median(values: list[float], times: list[float], window_s: float
                    ) -> list[float]:
    out = []
    start = 0
    for k, t in enumerate(times):
        while times[start] < t - window_s:
            start += 1
        window = sorted(values[start:k + 1])
        mid = len(window) // 2
        med = window[mid] if len(window) % 2 else 0.5 * (window[mid - 1] + window[mid])
        out.append(med)
    return out


def detect_events(rows: list[Reading], cfg: DetectorConfig) -> list[LeakEvent]:
    """Scan one node's time-ordered readings for leak events."""
    rows = [r for r in rows if not r.imputed]
    if not rows:
        return []
    period = _sample_period(rows)
    values = [r.ch4_ppm_cal for r in rows]
    if cfg.threshold_is_absolute:
        over = [v >= cfg.threshold_ppm for v in values]
    else:
        baseline = _rolling_median(values, [r.ts for r in rows], cfg.baseline_window_s)
        over = [v - b >= cfg.threshold_ppm for v, b in zip(values, baseline)]

    events: list[LeakEvent] = []
    k = 0
    n = len(rows)
    while k < n:
        if not over[k]:
            k += 1
            continue
        j = k
        while j + 1 < n and over[j + 1] and rows[j + 1].ts - rows[j].ts <= 2 * period:
            j += 1
        run = rows[k:j + 1]
        t_start = run[0].ts
        t_end = run[-1].ts + period
        duration = t_end - t_start
        peak = max(run, key=lambda r: r.ch4_ppm_cal)
        fast = all(r.speed_mps > cfg.speed_gate_mps for r in run)
        if fast and duration < 2 * cfg.min_duration_s:
            events.append(LeakEvent(run[0].node_id, t_start, t_end,
                                    peak.ch4_ppm_cal, peak.lat, peak.lon,
                                    suppressed=True, reason="speed_gate"))
        elif duration >= cfg.min_duration_s:
            events.append(LeakEvent(run[0].node_id, t_start, t_end,
                                    peak.ch4_ppm_cal, peak.lat, peak.lon))
        k = j + 1
    return events


def detect_events_all(store, cfg: DetectorConfig) -> list[LeakEvent]:
    events = []
    for node_id in store.nodes():
        events.extend(detect_events(store.readings[node_id], cfg))
    events.sort(key=lambda e: (e.t_start, e.node_id))
    return events


STUCK_SPAN_S = 1800.0
SPIKE_MAD_FACTOR = 6.0
DRIFT_SLOPE_PPM_H = 0.5
DRIFT_SPAN_S = 6 * 3600.0


def anomaly_flags(rows: list[Reading], cfg: DetectorConfig | None = None
                  ) -> dict[int, set[str]]:
    """Per-reading anomaly flags keyed by row index: stuck, spike, drift."""
    cfg = cfg or DetectorConfig()
    out: dict[int, set[str]] = {}
    n = len(rows)
    if n < 2:
        return out
    times = [r.ts for r in rows]
    values = [r.ch4_ppm_cal for r in rows]
    span = times[-1] - times[0]
    if span < cfg.baseline_window_s:
        return out  # not enough history

    def flag(k: int, name: str) -> None:
        out.setdefault(k, set()).add(name)

    # stuck: identical value (to wire precision) for more than 30 minutes
    k = 0
    while k < n:
        j = k
        while j + 1 < n and round(values[j + 1], 2) == round(values[k], 2):
            j += 1
        if times[j] - times[k] > STUCK_SPAN_S:
            for m in range(k, j + 1):
                flag(m, "stuck")
        k = j + 1

    # spike: isolated sample far outside the rolling median +/- 6 MAD band
    med = _rolling_median(values, times, cfg.baseline_window_s)
    devs = [abs(v - m) for v, m in zip(values, med)]
    start = 0
    mads = []
    for k, t in enumerate(times):
        while times[start] < t - cfg.baseline_window_s:
            start += 1
        window = sorted(devs[start:k + 1])
        mid = len(window) // 2
        mad = window[mid] if len(window) % 2 else 0.5 * (window[mid - 1] + window[mid])
        mads.append(max(mad, 0.01))
    for k in range(n):
        if devs[k] > SPIKE_MAD_FACTOR * mads[k]:
            left_ok = k == 0 or devs[k - 1] <= SPIKE_MAD_FACTOR * mads[k - 1]
            right_ok = k == n - 1 or devs[k + 1] <= SPIKE_MAD_FACTOR * mads[min(k + 1, n - 1)]
            if left_ok and right_ok:
                flag(k, "spike")

    # drift: sustained baseline slope over six hours
    if span >= DRIFT_SPAN_S:
        t0 = times[-1] - DRIFT_SPAN_S
        idx = [k for k in range(n) if times[k] >= t0]
        if len(idx) >= 4:
            ts = [times[k] for k in idx]
            vs = [med[k] for k in idx]
            tbar = sum(ts) / len(ts)
            vbar = sum(vs) / len(vs)
            num = sum((t - tbar) * (v - vbar) for t, v in zip(ts, vs))
            den = sum((t - tbar) ** 2 for t in ts)
            slope_per_h = (num / den) * 3600.0 if den else 0.0
            if abs(slope_per_h) > DRIFT_SLOPE_PPM_H:
                for k in idx:
                    flag(k, "drift")
    return out
