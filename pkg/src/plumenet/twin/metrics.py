"""Per-node link and freshness metrics as the dashboard sees them."""

from __future__ import annotations

import math
from dataclasses import dataclass

from ..bus.stats import LinkMetrics as BusLinkMetrics
from .store import SeriesStore

STALE_AFTER_CYCLES = 2.0
CYCLE_S = 360.0


@dataclass
class NodeMetrics:
    node_id: str
    freshness_s: float  # now - newest reading ts (inf if none)
    mean_age_latency_s: float  # ingest_ts - ts over the window (buffering included)
    p95_age_latency_s: float
    loss_fraction: float
    wire_latency_mean_s: float
    wire_latency_p95_s: float
    bandwidth_bps: float
    stale: bool
    reading_count: int


def compute_metrics(store: SeriesStore, bus_stats: dict[str, BusLinkMetrics],
                    now: float, window_s: float = 3600.0,
                    node_ids=None) -> dict[str, NodeMetrics]:
    """Join store freshness with bus link statistics, most recent window."""
    ids = sorted(node_ids) if node_ids is not None else store.nodes()
    out: dict[str, NodeMetrics] = {}
    for node_id in ids:
        rows = [r for r in store.readings.get(node_id, []) if not r.imputed]
        if rows:
            newest = max(r.ts for r in rows)
            freshness = now - newest
            recent = [r for r in rows if r.ts >= now - window_s]
            ages = sorted(r.ingest_ts - r.ts for r in recent) or [0.0]
            mean_age = sum(ages) / len(ages)
            p95_age = ages[min(len(ages) - 1, int(0.95 * (len(ages) - 1) + 0.5))]
        else:
            freshness = math.inf
            mean_age = p95_age = 0.0
        bus = bus_stats.get(node_id, BusLinkMetrics())
        out[node_id] = NodeMetrics(
            node_id=node_id, freshness_s=freshness,
            mean_age_latency_s=mean_age, p95_age_latency_s=p95_age,
            loss_fraction=bus.loss_fraction,
            wire_latency_mean_s=bus.mean_latency_s,
            wire_latency_p95_s=bus.p95_latency_s,
            bandwidth_bps=bus.bandwidth_bps,
            stale=freshness > STALE_AFTER_CYCLES * CYCLE_S,
            reading_count=len(rows))
    return out
