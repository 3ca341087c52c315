"""In-process MQTT 3.1.1 broker for the supported QoS 0/1 subset.

The broker is transport-agnostic: it hands outbound packets to a
``send(client_id, packet)`` callable and asks for connection teardown via
``close(client_id)``.  The simulated network and any socket shim both
satisfy that interface.  All state lives in :class:`BrokerSession`
objects keyed by client id; durable sessions (clean_session=False)
survive disconnects and queue QoS-1 traffic for redelivery.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Protocol

from .codec import (MalformedPacket, Packet, PacketKind, StreamDecoder,
                    topic_matches, validate_filter)

RETRY_TIMEOUT_S = 5.0
MAX_RETRIES = 10
KEEPALIVE_GRACE = 1.5


class Transport(Protocol):
    def send_to_client(self, client_id: str, packet: Packet) -> None: ...
    def close_client(self, client_id: str) -> None: ...


@dataclass
class InflightEntry:
    packet: Packet
    first_sent: float
    last_sent: float
    retries: int = 0
    transmitted: bool = True  # False while queued on a disconnected client


@dataclass
class BrokerSession:
    """Durable per-client broker state."""

    client_id: str
    clean_session: bool = True
    connected: bool = False
    keepalive_s: int = 120
    last_seen: float = 0.0
    subscriptions: dict[str, int] = field(default_factory=dict)  # filter -> granted qos
    inflight: dict[int, InflightEntry] = field(default_factory=dict)
    pending: deque = field(default_factory=deque)  # (topic, payload, qos) while offline
    inbound_routed: set[int] = field(default_factory=set)
    _next_pid: int = 0

    def alloc_pid(self) -> int:
        for _ in range(65535):
            self._next_pid = self._next_pid % 65535 + 1
            if self._next_pid not in self.inflight:
                return self._next_pid
        raise RuntimeError("no free packet ids")


class Broker:
    """Routes PUBLISH traffic between sessions and services QoS-1 state."""

    def __init__(self, transport: Transport, now_fn: Callable[[], float] = lambda: 0.0,
                 retry_timeout_s: float = RETRY_TIMEOUT_S, max_retries: int = MAX_RETRIES):
        self.transport = transport
        self.now_fn = now_fn
        self.retry_timeout_s = retry_timeout_s
        self.max_retries = max_retries
        self.sessions: dict[str, BrokerSession] = {}
        self.counters: dict[str, int] = {
            "malformed": 0, "unauthenticated": 0, "unknown_puback": 0,
            "retry_exhausted": 0, "keepalive_expired": 0,
        }
        self._decoders: dict[str, StreamDecoder] = {}
        # connection id -> client id, resolved by the CONNECT packet
        self._conn_client: dict[str, str] = {}

    # ---- byte-stream interface -------------------------------------------

    def on_connection_open(self, conn_id: str) -> None:
        self._decoders[conn_id] = StreamDecoder()
        self._conn_client.pop(conn_id, None)

    def on_connection_lost(self, conn_id: str) -> None:
        client_id = self._conn_client.pop(conn_id, None)
        self._decoders.pop(conn_id, None)
        if client_id is not None:
            self._drop_connection(client_id)

    def handle_bytes(self, conn_id: str, chunk: bytes) -> None:
        decoder = self._decoders.setdefault(conn_id, StreamDecoder())
        try:
            packets = decoder.feed(chunk)
        except MalformedPacket:
            self.counters["malformed"] += 1
            self._abort_connection(conn_id)
            return
        for p in packets:
            self.handle_packet(conn_id, p)

    def _abort_connection(self, conn_id: str) -> None:
        self.transport.close_client(conn_id)
        self.on_connection_lost(conn_id)

    # ---- packet interface ------------------------------------------------

    def handle_packet(self, conn_id: str, p: Packet) -> None:
        now = self.now_fn()
        if p.kind == PacketKind.CONNECT:
            self._on_connect(conn_id, p, now)
            return
        client_id = self._conn_client.get(conn_id)
        if client_id is None:
            # anything before CONNECT is a protocol violation
            self.counters["unauthenticated"] += 1
            self._abort_connection(conn_id)
            return
        sess = self.sessions[client_id]
        sess.last_seen = now
        if p.kind == PacketKind.PUBLISH:
            self._on_publish(sess, p, now)
        elif p.kind == PacketKind.PUBACK:
            if p.packet_id in sess.inflight:
                del sess.inflight[p.packet_id]
            else:
                self.counters["unknown_puback"] += 1
        elif p.kind == PacketKind.SUBSCRIBE:
            validate_filter(p.topic or "")
            sess.subscriptions[p.topic] = p.qos
            self.transport.send_to_client(client_id,
                                          Packet(PacketKind.SUBACK, qos=p.qos,
                                                 packet_id=p.packet_id, return_code=p.qos))
        elif p.kind == PacketKind.PINGREQ:
            self.transport.send_to_client(client_id, Packet(PacketKind.PINGRESP))
        elif p.kind == PacketKind.DISCONNECT:
            self._conn_client.pop(conn_id, None)
            self._drop_connection(client_id)
        else:
            self.counters["malformed"] += 1
            self._abort_connection(conn_id)

    # ---- connection lifecycle --------------------------------------------

    def _on_connect(self, conn_id: str, p: Packet, now: float) -> None:
        client_id = p.client_id
        if self._conn_client.get(conn_id) is not None:
            # second CONNECT on one connection
            self.counters["malformed"] += 1
            self.transport.close_client(conn_id)
            self.on_connection_lost(conn_id)
            return
        session_present = False
        old = self.sessions.get(client_id)
        if p.clean_session or old is None:
            sess = BrokerSession(client_id=client_id, clean_session=p.clean_session)
        else:
            sess = old
            sess.clean_session = False
            session_present = True
        sess.connected = True
        sess.keepalive_s = p.keepalive_s
        sess.last_seen = now
        self.sessions[client_id] = sess
        self._conn_client[conn_id] = client_id
        self.transport.send_to_client(
            client_id, Packet(PacketKind.CONNACK, session_present=session_present))
        if session_present:
            self._recover_session(sess, now)

    def _recover_session(self, sess: BrokerSession, now: float) -> None:
        # unacknowledged deliveries first, in original order, then the
        # offline backlog, preserving per-topic publish order
        for pid in sorted(sess.inflight):
            entry = sess.inflight[pid]
            entry.packet.dup = True
            entry.last_sent = now
            entry.retries += 1
            self.transport.send_to_client(sess.client_id, entry.packet)
        while sess.pending:
            topic, payload, qos = sess.pending.popleft()
            if qos == 1:
                self._send_qos1(sess, topic, payload, now)
            else:
                self.transport.send_to_client(
                    sess.client_id, Packet(PacketKind.PUBLISH, topic=topic, payload=payload))

    def _drop_connection(self, client_id: str) -> None:
        sess = self.sessions.get(client_id)
        if sess is None:
            return
        sess.connected = False
        if sess.clean_session:
            del self.sessions[client_id]

    # ---- publish routing ---------------------------------------------------

    def _on_publish(self, sess: BrokerSession, p: Packet, now: float) -> None:
        if p.qos == 1:
            # retransmission of a publish we already routed: ack again only
            duplicate = p.dup and p.packet_id in sess.inbound_routed
            sess.inbound_routed.add(p.packet_id)
            self.transport.send_to_client(sess.client_id,
                                          Packet(PacketKind.PUBACK, packet_id=p.packet_id))
            if duplicate:
                return
        self.route(p.topic, p.payload, p.qos, now)

    def route(self, topic: str, payload: bytes, qos: int, now: float | None = None) -> None:
        """Fan a publish out to every matching session at min(pub, sub) QoS."""
        if now is None:
            now = self.now_fn()
        for sub in list(self.sessions.values()):
            best: int | None = None
            for filt, sub_qos in sub.subscriptions.items():
                if topic_matches(filt, topic):
                    q = min(qos, sub_qos)
                    best = q if best is None else max(best, q)
            if best is None:
                continue
            if best == 0:
                if sub.connected:
                    self.transport.send_to_client(
                        sub.client_id, Packet(PacketKind.PUBLISH, topic=topic, payload=payload))
            elif sub.connected:
                self._send_qos1(sub, topic, payload, now)
            else:
                # durable subscriber offline: queue for session recovery
                sub.pending.append((topic, payload, 1))

    def _send_qos1(self, sess: BrokerSession, topic: str, payload: bytes, now: float) -> None:
        pid = sess.alloc_pid()
        pkt = Packet(PacketKind.PUBLISH, qos=1, packet_id=pid, topic=topic, payload=payload)
        sess.inflight[pid] = InflightEntry(packet=pkt, first_sent=now, last_sent=now)
        self.transport.send_to_client(sess.client_id, pkt)

    # ---- periodic service ---------------------------------------------------

    def service(self, now: float) -> None:
        """Retransmit stale QoS-1 deliveries and expire silent sessions."""
        for sess in list(self.sessions.values()):
            if not sess.connected:
                continue
            if now - sess.last_seen > KEEPALIVE_GRACE * sess.keepalive_s:
                self.counters["keepalive_expired"] += 1
                conns = [c for c, cid in self._conn_client.items() if cid == sess.client_id]
                for conn_id in conns:
                    self._abort_connection(conn_id)
                if not conns:
                    self._drop_connection(sess.client_id)
                continue
            for pid in sorted(sess.inflight):
                entry = sess.inflight[pid]
                if now - entry.last_sent < self.retry_timeout_s:
                    continue
                if entry.retries >= self.max_retries:
                    self.counters["retry_exhausted"] += 1
                    del sess.inflight[pid]
                    continue
                entry.packet.dup = True
                entry.retries += 1
                entry.last_sent = now
                self.transport.send_to_client(sess.client_id, entry.packet)
