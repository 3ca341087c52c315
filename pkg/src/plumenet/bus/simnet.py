"""Deterministic in-process network: clients, faulted links, one broker.

Encoded packet bytes travel through per-client :class:`FaultInjector`
pairs into a single time-ordered event heap.  Draining the heap up to a
simulation time delivers bytes to the broker or client stream decoders,
which may emit further sends processed in the same drain.  Everything is
plain data, so a whole network (broker sessions, client state, undelivered
bytes) can be pickled for snapshot/restore.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

from .broker import Broker
from .client import MessageHandler, MqttClient
from .codec import Packet, encode_packet
from .faults import PERFECT_LINK, FaultInjector, FaultProfile, make_link_injectors
from .stats import LinkLog, link_stats


@dataclass
class _Link:
    client: MqttClient
    up: FaultInjector
    down: FaultInjector
    epoch: int = 0
    open: bool = False


class _Port:
    """Picklable per-client callable bundle handed to MqttClient."""

    def __init__(self, net: "SimNetwork", client_id: str):
        self.net = net
        self.client_id = client_id

    def send(self, packet: Packet) -> None:
        self.net._client_send(self.client_id, packet)

    def now(self) -> float:
        return self.net.now


class _BrokerClock:
    def __init__(self, net: "SimNetwork"):
        self.net = net

    def __call__(self) -> float:
        return self.net.now


class SimNetwork:
    """Virtual-time transport fabric connecting MqttClients to a Broker."""

    def __init__(self) -> None:
        self.now = 0.0
        self.log = LinkLog()
        self.broker = Broker(transport=self, now_fn=_BrokerClock(self))
        self._links: dict[str, _Link] = {}
        self._heap: list[tuple] = []  # (time, seq, kind, client_id, epoch, *rest)
        self._seq = 0

    # ---- topology ------------------------------------------------------------

    def add_client(self, client_id: str, profile: FaultProfile = PERFECT_LINK,
                   clean_session: bool = True, keepalive_s: int = 120,
                   on_message: MessageHandler | None = None) -> MqttClient:
        if client_id in self._links:
            raise ValueError(f"client {client_id!r} already attached")
        port = _Port(self, client_id)
        client = MqttClient(client_id, send=port.send, clean_session=clean_session,
                            keepalive_s=keepalive_s, on_message=on_message, now_fn=port.now)
        up, down = make_link_injectors(profile)
        self._links[client_id] = _Link(client=client, up=up, down=down)
        return client

    def client(self, client_id: str) -> MqttClient:
        return self._links[client_id].client

    def set_link_profile(self, client_id: str, profile: FaultProfile,
                         direction: str = "both") -> None:
        """Swap the fault profile mid-run (outage windows, degraded links)."""
        link = self._links[client_id]
        up, down = make_link_injectors(profile)
        if direction in ("both", "up"):
            link.up = up
        if direction in ("both", "down"):
            link.down = down

    def connect_client(self, client_id: str) -> None:
        """Open the link and start the MQTT handshake."""
        link = self._links[client_id]
        link.epoch += 1
        link.open = True
        self.broker.on_connection_open(client_id)
        link.client.connect()

    def drop_link(self, client_id: str) -> None:
        """Simulate abrupt connection loss (power fault, cell outage)."""
        link = self._links[client_id]
        if not link.open:
            return
        link.epoch += 1
        link.open = False
        link.client.connected = False
        self.broker.on_connection_lost(client_id)

    # ---- transport interface used by MqttClient ------------------------------

    def _client_send(self, client_id: str, packet: Packet) -> None:
        link = self._links[client_id]
        if not link.open:
            return
        data = encode_packet(packet)
        attempt_id = self.log.record_send(client_id, self.now, len(data),
                                          first_attempt=not packet.dup)
        for deliver_at, _ in link.up.inject(self.now, None):
            self._push(deliver_at, "c2b", client_id, link.epoch, attempt_id, self.now, data)

    # ---- transport interface used by Broker -----------------------------------

    def send_to_client(self, client_id: str, packet: Packet) -> None:
        link = self._links.get(client_id)
        if link is None or not link.open:
            return
        data = encode_packet(packet)
        for deliver_at, _ in link.down.inject(self.now, None):
            self._push(deliver_at, "b2c", client_id, link.epoch, data)

    def close_client(self, client_id: str) -> None:
        link = self._links.get(client_id)
        if link is None or not link.open:
            return
        link.epoch += 1
        link.open = False
        link.client.connected = False

    # ---- event loop ------------------------------------------------------------

    def _push(self, t: float, *event) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (t, self._seq, *event))

    def run_until(self, t: float) -> None:
        """Deliver every event due at or before ``t``; clock ends at ``t``."""
        while self._heap and self._heap[0][0] <= t:
            entry = heapq.heappop(self._heap)
            self.now = max(self.now, entry[0])
            kind, client_id, epoch = entry[2], entry[3], entry[4]
            link = self._links[client_id]
            if epoch != link.epoch or not link.open:
                continue  # bytes in flight when the connection died
            if kind == "c2b":
                attempt_id, sent_t, data = entry[5], entry[6], entry[7]
                self.log.record_delivery(client_id, attempt_id, sent_t, self.now)
                self.broker.handle_bytes(client_id, data)
            else:
                link.client.handle_bytes(entry[5])
        self.now = max(self.now, t)

    def service(self, now: float | None = None) -> None:
        """Run retransmission/keepalive timers on the broker and all clients."""
        t = self.now if now is None else now
        self.broker.service(t)
        for link in self._links.values():
            if link.open:
                link.client.service(t)

    def run(self, until: float, tick: float = 1.0) -> None:
        """Drive events and service timers in lockstep to ``until``."""
        t = self.now
        while t < until:
            t = min(t + tick, until)
            self.run_until(t)
            self.service(t)

    @property
    def pending_events(self) -> int:
        return len(self._heap)

    def metrics(self, window_s: float | None = None):
        return link_stats(self.log, window_s)
