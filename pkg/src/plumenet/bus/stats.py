"""Link accounting: loss, latency and bandwidth per client."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field


@dataclass
class LinkMetrics:
    """Per-client link quality over the observed window."""

    loss_fraction: float = 0.0
    mean_latency_s: float = 0.0
    p95_latency_s: float = 0.0
    bandwidth_bps: float = 0.0
    messages_sent: int = 0
    messages_delivered: int = 0
    bytes_sent: int = 0


@dataclass
class LinkLog:
    """Raw send/delivery events recorded by the network.

    Every transmission attempt gets a unique id; deliveries point back at
    the attempt that produced them.  Loss is evaluated on first attempts
    only, so QoS-1 retransmissions do not mask wire-level drops.
    Bandwidth counts every encoded byte offered to the link,
    retransmissions included.
    """

    sends: dict[str, list[tuple[int, float, int, bool]]] = field(
        default_factory=lambda: defaultdict(list))  # client -> (attempt_id, t, nbytes, first)
    deliveries: dict[str, list[tuple[int, float, float]]] = field(
        default_factory=lambda: defaultdict(list))  # client -> (attempt_id, sent_t, delivered_t)
    _next_attempt: int = 0

    def record_send(self, client_id: str, t: float, nbytes: int, first_attempt: bool) -> int:
        attempt_id = self._next_attempt
        self._next_attempt += 1
        self.sends[client_id].append((attempt_id, t, nbytes, first_attempt))
        return attempt_id

    def record_delivery(self, client_id: str, attempt_id: int,
                        sent_t: float, delivered_t: float) -> None:
        self.deliveries[client_id].append((attempt_id, sent_t, delivered_t))

    def clients(self) -> list[str]:
        return sorted(set(self.sends) | set(self.deliveries))


def link_stats(log: LinkLog, window_s: float | None = None) -> dict[str, LinkMetrics]:
    """Reduce a :class:`LinkLog` to per-client :class:`LinkMetrics`.

    ``window_s`` overrides the bandwidth averaging window; by default the
    observed send-timestamp span is used.  An empty log yields no entries.
    """
    out: dict[str, LinkMetrics] = {}
    for client in log.clients():
        sends = log.sends.get(client, [])
        deliveries = log.deliveries.get(client, [])
        m = LinkMetrics()
        m.bytes_sent = sum(n for _, _, n, _ in sends)
        m.messages_sent = len(sends)
        m.messages_delivered = len(deliveries)
        first_ids = {aid for aid, _, _, first in sends if first}
        if first_ids:
            delivered_ids = {aid for aid, _, _ in deliveries}
            m.loss_fraction = len(first_ids - delivered_ids) / len(first_ids)
        if deliveries:
            lats = sorted(d - s for _, s, d in deliveries)
            m.mean_latency_s = sum(lats) / len(lats)
            m.p95_latency_s = lats[min(len(lats) - 1, int(0.95 * (len(lats) - 1) + 0.5))]
        if sends:
            span = window_s
            if span is None:
                span = max(t for _, t, _, _ in sends) - min(t for _, t, _, _ in sends)
            if span <= 0:
                span = 1.0
            m.bandwidth_bps = m.bytes_sent * 8.0 / span
        out[client] = m
    return out
