"""Client-side MQTT session: publisher/subscriber endpoint with QoS-1 state.

The client is sans-io: it turns application calls into packets handed to a
``send(packet)`` callable and consumes inbound bytes/packets via
``handle_bytes``/``handle_packet``.  Retransmission and keepalive run off
an explicit ``service(now)`` tick, so the same code drives simulated and
wall-clock transports.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .broker import MAX_RETRIES, RETRY_TIMEOUT_S, InflightEntry
from .codec import MalformedPacket, Packet, PacketKind, StreamDecoder

MessageHandler = Callable[[str, bytes, Packet], None]


@dataclass
class _Subscription:
    topic_filter: str
    qos: int
    acked: bool = False
    last_sent: float = 0.0


class MqttClient:
    """One client session; survives reconnects when clean_session=False."""

    def __init__(self, client_id: str, send: Callable[[Packet], None],
                 clean_session: bool = True, keepalive_s: int = 120,
                 on_message: MessageHandler | None = None,
                 now_fn: Callable[[], float] = lambda: 0.0):
        self.client_id = client_id
        self._send_raw = send
        self.clean_session = clean_session
        self.keepalive_s = keepalive_s
        self.on_message = on_message
        self.now_fn = now_fn

        self.connected = False
        self.connect_sent = False
        self.inflight: dict[int, InflightEntry] = {}
        self.subscriptions: dict[int, _Subscription] = {}  # keyed by subscribe pid
        self._next_pid = 0
        self._seen_inbound: set[int] = set()
        self._outbox: list[Packet] = []  # queued publishes before CONNACK
        self._decoder = StreamDecoder()
        self._last_send = 0.0
        self.counters = {"delivered": 0, "duplicates_dropped": 0,
                         "unknown_puback": 0, "retry_exhausted": 0}

    # ---- outbound ----------------------------------------------------------

    def _send(self, p: Packet) -> None:
        self._last_send = self.now_fn()
        self._send_raw(p)

    def _alloc_pid(self) -> int:
        for _ in range(65535):
            self._next_pid = self._next_pid % 65535 + 1
            if self._next_pid not in self.inflight and self._next_pid not in self.subscriptions:
                return self._next_pid
        raise RuntimeError("no free packet ids")

    def connect(self) -> None:
        self._decoder = StreamDecoder()
        self.connected = False
        self.connect_sent = True
        self._send(Packet(PacketKind.CONNECT, client_id=self.client_id,
                          clean_session=self.clean_session, keepalive_s=self.keepalive_s))

    def disconnect(self) -> None:
        if self.connected:
            self._send(Packet(PacketKind.DISCONNECT))
        self.connected = False
        self.connect_sent = False

    def subscribe(self, topic_filter: str, qos: int = 1) -> int:
        pid = self._alloc_pid()
        self.subscriptions[pid] = _Subscription(topic_filter, qos)
        if self.connected:
            self._send(Packet(PacketKind.SUBSCRIBE, qos=qos, packet_id=pid,
                              topic=topic_filter))
        # else CONNACK handling re-sends every unacked subscription
        return pid

    def publish(self, topic: str, payload: bytes, qos: int = 0) -> int | None:
        """Publish; QoS-1 messages are tracked until PUBACK. Returns the pid."""
        now = self.now_fn()
        if qos == 0:
            pkt = Packet(PacketKind.PUBLISH, topic=topic, payload=payload)
            if self.connected:
                self._send(pkt)
            else:
                self._outbox.append(pkt)
            return None
        pid = self._alloc_pid()
        pkt = Packet(PacketKind.PUBLISH, qos=1, packet_id=pid, topic=topic, payload=payload)
        entry = InflightEntry(packet=pkt, first_sent=now, last_sent=now,
                              transmitted=self.connected)
        self.inflight[pid] = entry
        if self.connected:
            self._send(pkt)
        return pid

    # ---- inbound -----------------------------------------------------------

    def handle_bytes(self, chunk: bytes) -> None:
        try:
            packets = self._decoder.feed(chunk)
        except MalformedPacket:
            # protocol violation from the peer: drop the connection state
            self.connected = False
            raise
        for p in packets:
            self.handle_packet(p)

    def handle_packet(self, p: Packet) -> None:
        if p.kind == PacketKind.CONNACK:
            self.connected = True
            if not p.session_present:
                # broker holds no state for us: every subscription is unacked
                for sub in self.subscriptions.values():
                    sub.acked = False
                if self.clean_session:
                    self._seen_inbound.clear()
            now = self.now_fn()
            for pid, sub in list(self.subscriptions.items()):
                if not sub.acked:
                    sub.last_sent = now
                    self._send(Packet(PacketKind.SUBSCRIBE, qos=sub.qos,
                                      packet_id=pid, topic=sub.topic_filter))
            now = self.now_fn()
            for pid in sorted(self.inflight):
                entry = self.inflight[pid]
                if entry.transmitted:
                    entry.packet.dup = True
                    entry.retries += 1
                entry.transmitted = True
                entry.last_sent = now
                self._send(entry.packet)
            outbox, self._outbox = self._outbox, []
            for pkt in outbox:
                self._send(pkt)
        elif p.kind == PacketKind.PUBLISH:
            self._on_publish(p)
        elif p.kind == PacketKind.PUBACK:
            if p.packet_id in self.inflight:
                del self.inflight[p.packet_id]
            else:
                self.counters["unknown_puback"] += 1
        elif p.kind == PacketKind.SUBACK:
            sub = self.subscriptions.get(p.packet_id)
            if sub is not None:
                sub.acked = True
        elif p.kind == PacketKind.PINGRESP:
            pass

    def _on_publish(self, p: Packet) -> None:
        if p.qos == 1:
            duplicate = p.dup and p.packet_id in self._seen_inbound
            self._seen_inbound.add(p.packet_id)
            self._send(Packet(PacketKind.PUBACK, packet_id=p.packet_id))
            if duplicate:
                self.counters["duplicates_dropped"] += 1
                return
        self.counters["delivered"] += 1
        if self.on_message is not None:
            self.on_message(p.topic, p.payload, p)

    # ---- periodic service ----------------------------------------------------

    def service(self, now: float) -> None:
        """Retransmit stale QoS-1 publishes and keep the session alive."""
        if not self.connected:
            return
        for pid, sub in list(self.subscriptions.items()):
            if not sub.acked and now - sub.last_sent >= RETRY_TIMEOUT_S:
                sub.last_sent = now
                self._send(Packet(PacketKind.SUBSCRIBE, qos=sub.qos,
                                  packet_id=pid, topic=sub.topic_filter))
        for pid in sorted(self.inflight):
            entry = self.inflight[pid]
            if now - entry.last_sent < RETRY_TIMEOUT_S:
                continue
            if entry.retries >= MAX_RETRIES:
                self.counters["retry_exhausted"] += 1
                del self.inflight[pid]
                continue
            entry.packet.dup = True
            entry.retries += 1
            entry.last_sent = now
            self._send(entry.packet)
        if now - self._last_send >= 0.8 * self.keepalive_s:
            self._send(Packet(PacketKind.PINGREQ))
