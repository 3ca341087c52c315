"""MQTT 3.1.1 wire codec for the telemetry fabric.

Bit-exact encoder/decoder for the nine control packets the network uses
(CONNECT, CONNACK, PUBLISH, PUBACK, SUBSCRIBE, SUBACK, PINGREQ, PINGRESP,
DISCONNECT) at QoS 0/1.  QoS 2, retained messages, wills and auth are
outside the supported subset and decode as protocol violations.

The decoder is incremental: it reports how many bytes it consumed so a
stream of concatenated packets can be reassembled from arbitrary chunk
boundaries (see :class:`StreamDecoder`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

MAX_REMAINING_LENGTH = 268_435_455  # 4-byte varint ceiling

PROTOCOL_NAME = b"\x00\x04MQTT"
PROTOCOL_LEVEL = 4


class PacketKind(IntEnum):
    CONNECT = 1
    CONNACK = 2
    PUBLISH = 3
    PUBACK = 4
    SUBSCRIBE = 8
    SUBACK = 9
    PINGREQ = 12
    PINGRESP = 13
    DISCONNECT = 14


class CodecError(Exception):
    """Base for all wire-level errors."""


class MalformedPacket(CodecError):
    """Protocol violation; the connection carrying it must be closed."""


class OversizePacket(CodecError):
    """Encoded remaining length would exceed the MQTT 3.1.1 limit."""


class NeedMoreData(Exception):
    """Buffer holds a truncated packet; not a failure, feed more bytes."""


@dataclass
class Packet:
    """One decoded MQTT control packet.

    Only the fields relevant to ``kind`` are meaningful; the rest keep
    their defaults.  ``qos`` doubles as the requested QoS on SUBSCRIBE
    and the granted QoS on SUBACK.
    """

    kind: PacketKind
    qos: int = 0
    dup: bool = False
    packet_id: int | None = None
    topic: str | None = None
    payload: bytes = b""
    client_id: str | None = None
    clean_session: bool = True
    keepalive_s: int = 120
    session_present: bool = False  # CONNACK
    return_code: int = 0  # CONNACK / SUBACK


def connect(client_id: str, clean_session: bool = True, keepalive_s: int = 120) -> Packet:
    return Packet(PacketKind.CONNECT, client_id=client_id,
                  clean_session=clean_session, keepalive_s=keepalive_s)


def publish(topic: str, payload: bytes, qos: int = 0,
            packet_id: int | None = None, dup: bool = False) -> Packet:
    return Packet(PacketKind.PUBLISH, qos=qos, dup=dup,
                  packet_id=packet_id, topic=topic, payload=payload)


def puback(packet_id: int) -> Packet:
    return Packet(PacketKind.PUBACK, packet_id=packet_id)


def subscribe(packet_id: int, topic_filter: str, qos: int = 1) -> Packet:
    return Packet(PacketKind.SUBSCRIBE, qos=qos, packet_id=packet_id, topic=topic_filter)


def _encode_varint(n: int) -> bytes:
    if n > MAX_REMAINING_LENGTH:
        raise OversizePacket(f"remaining length {n} exceeds {MAX_REMAINING_LENGTH}")
    out = bytearray()
    while True:
        byte = n % 128
        n //= 128
        if n > 0:
            byte |= 0x80
        out.append(byte)
        if n == 0:
            return bytes(out)


def _encode_utf8(text: str) -> bytes:
    try:
        raw = text.encode("utf-8")
    except UnicodeEncodeError as exc:
        raise MalformedPacket(f"invalid UTF-8 string: {exc}") from None
    if "\x00" in text:
        raise MalformedPacket("U+0000 not allowed in MQTT strings")
    if len(raw) > 0xFFFF:
        raise MalformedPacket("UTF-8 string longer than 65535 bytes")
    return len(raw).to_bytes(2, "big") + raw


def _u16(n: int) -> bytes:
    return n.to_bytes(2, "big")


def validate_topic(topic: str) -> None:
    """Reject publish topics that are empty or contain wildcard characters."""
    if not topic:
        raise MalformedPacket("empty topic")
    if "+" in topic or "#" in topic:
        raise MalformedPacket(f"wildcard character in publish topic {topic!r}")


def validate_filter(topic_filter: str) -> None:
    """Reject malformed subscription filters per MQTT 3.1.1 wildcard rules."""
    if not topic_filter:
        raise MalformedPacket("empty topic filter")
    levels = topic_filter.split("/")
    for i, level in enumerate(levels):
        if "#" in level:
            if level != "#" or i != len(levels) - 1:
                raise MalformedPacket(f"'#' must be the final full level: {topic_filter!r}")
        if "+" in level and level != "+":
            raise MalformedPacket(f"'+' must occupy a full level: {topic_filter!r}")


def topic_matches(topic_filter: str, topic: str) -> bool:
    """MQTT 3.1.1 wildcard matching of a concrete topic against a filter."""
    validate_filter(topic_filter)
    validate_topic(topic)
    flevels = topic_filter.split("/")
    tlevels = topic.split("/")
    for i, flevel in enumerate(flevels):
        if flevel == "#":
            # multi-level wildcard also matches its parent level ("a/#" ~ "a")
            return True
        if i >= len(tlevels):
            return False
        if flevel != "+" and flevel != tlevels[i]:
            return False
    return len(tlevels) == len(flevels)


def encode_packet(p: Packet) -> bytes:
    """Serialize a packet to MQTT 3.1.1 bytes.

    Raises :class:`MalformedPacket` on invariant violations (bad topic,
    missing/zero packet id where one is required) and
    :class:`OversizePacket` when the body exceeds the framing limit.
    """
    kind = p.kind
    flags = 0
    if kind == PacketKind.CONNECT:
        if p.client_id is None:
            raise MalformedPacket("CONNECT requires client_id")
        conn_flags = 0x02 if p.clean_session else 0x00
        body = (PROTOCOL_NAME + bytes([PROTOCOL_LEVEL, conn_flags])
                + _u16(p.keepalive_s) + _encode_utf8(p.client_id))
    elif kind == PacketKind.CONNACK:
        body = bytes([1 if p.session_present else 0, p.return_code])
    elif kind == PacketKind.PUBLISH:
        if p.qos not in (0, 1):
            raise MalformedPacket(f"QoS {p.qos} outside supported subset")
        if p.topic is None:
            raise MalformedPacket("PUBLISH requires a topic")
        validate_topic(p.topic)
        flags = (0x08 if p.dup else 0) | (p.qos << 1)
        body = _encode_utf8(p.topic)
        if p.qos == 1:
            if not p.packet_id:
                raise MalformedPacket("QoS-1 PUBLISH requires a nonzero packet id")
            body += _u16(p.packet_id)
        body += p.payload
    elif kind == PacketKind.PUBACK:
        if not p.packet_id:
            raise MalformedPacket("PUBACK requires a nonzero packet id")
        body = _u16(p.packet_id)
    elif kind == PacketKind.SUBSCRIBE:
        if not p.packet_id:
            raise MalformedPacket("SUBSCRIBE requires a nonzero packet id")
        if p.topic is None:
            raise MalformedPacket("SUBSCRIBE requires a topic filter")
        validate_filter(p.topic)
        if p.qos not in (0, 1):
            raise MalformedPacket(f"requested QoS {p.qos} outside supported subset")
        flags = 0x02
        body = _u16(p.packet_id) + _encode_utf8(p.topic) + bytes([p.qos])
    elif kind == PacketKind.SUBACK:
        if not p.packet_id:
            raise MalformedPacket("SUBACK requires a nonzero packet id")
        body = _u16(p.packet_id) + bytes([p.return_code])
    elif kind in (PacketKind.PINGREQ, PacketKind.PINGRESP, PacketKind.DISCONNECT):
        body = b""
    else:  # pragma: no cover - PacketKind is closed
        raise MalformedPacket(f"unsupported packet kind {kind}")
    return bytes([(kind << 4) | flags]) + _encode_varint(len(body)) + body


def _decode_varint(buf: memoryview, pos: int) -> tuple[int, int]:
    value = 0
    shift = 0
    for i in range(4):
        if pos + i >= len(buf):
            raise NeedMoreData
        byte = buf[pos + i]
        value |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return value, pos + i + 1
        shift += 7
    raise MalformedPacket("remaining length varint longer than 4 bytes")


class _Reader:
    """Cursor over one packet body with bounds-checked reads."""

    def __init__(self, body: memoryview):
        self.body = body
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.body):
            raise MalformedPacket("field extends past declared remaining length")
        out = self.body[self.pos:self.pos + n]
        self.pos += n
        return out

    def u16(self) -> int:
        raw = self.take(2)
        return (raw[0] << 8) | raw[1]

    def utf8(self) -> str:
        n = self.u16()
        raw = bytes(self.take(n))
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedPacket(f"invalid UTF-8: {exc}") from None
        if "\x00" in text:
            raise MalformedPacket("U+0000 not allowed in MQTT strings")
        return text

    def rest(self) -> bytes:
        out = bytes(self.body[self.pos:])
        self.pos = len(self.body)
        return out

    def expect_end(self) -> None:
        if self.pos != len(self.body):
            raise MalformedPacket("trailing bytes after packet body")


def decode_packet(data: bytes | memoryview) -> tuple[Packet, int]:
    """Decode one packet from the head of ``data``.

    Returns ``(packet, bytes_consumed)`` so callers can reassemble a
    byte stream.  Raises :class:`NeedMoreData` when the buffer holds a
    truncated packet and :class:`MalformedPacket` on protocol violations.
    """
    buf = memoryview(data) if not isinstance(data, memoryview) else data
    if len(buf) == 0:
        raise NeedMoreData
    first = buf[0]
    kind_val = first >> 4
    flags = first & 0x0F
    try:
        kind = PacketKind(kind_val)
    except ValueError:
        raise MalformedPacket(f"reserved or unsupported packet type {kind_val}") from None
    length, body_start = _decode_varint(buf, 1)
    if length > MAX_REMAINING_LENGTH:
        raise MalformedPacket("remaining length exceeds protocol limit")
    if body_start + length > len(buf):
        raise NeedMoreData
    consumed = body_start + length
    r = _Reader(buf[body_start:consumed])

    if kind == PacketKind.PUBLISH:
        if flags & 0x01:
            raise MalformedPacket("retained messages outside supported subset")
        qos = (flags >> 1) & 0x03
        if qos > 1:
            raise MalformedPacket(f"QoS {qos} outside supported subset")
        dup = bool(flags & 0x08)
        if dup and qos == 0:
            raise MalformedPacket("DUP set on QoS-0 PUBLISH")
        topic = r.utf8()
        validate_topic(topic)
        packet_id = None
        if qos == 1:
            packet_id = r.u16()
            if packet_id == 0:
                raise MalformedPacket("zero packet id on QoS-1 PUBLISH")
        p = Packet(kind, qos=qos, dup=dup, packet_id=packet_id,
                   topic=topic, payload=r.rest())
        return p, consumed

    if flags != (0x02 if kind == PacketKind.SUBSCRIBE else 0x00):
        raise MalformedPacket(f"invalid fixed-header flags {flags:#x} for {kind.name}")

    if kind == PacketKind.CONNECT:
        if bytes(r.take(6)) != PROTOCOL_NAME:
            raise MalformedPacket("protocol name is not MQTT")
        if r.take(1)[0] != PROTOCOL_LEVEL:
            raise MalformedPacket("unsupported protocol level")
        conn_flags = r.take(1)[0]
        if conn_flags & ~0x02:
            raise MalformedPacket("will/auth connect flags outside supported subset")
        keepalive = r.u16()
        client_id = r.utf8()
        r.expect_end()
        p = Packet(kind, client_id=client_id,
                   clean_session=bool(conn_flags & 0x02), keepalive_s=keepalive)
    elif kind == PacketKind.CONNACK:
        ack_flags = r.take(1)[0]
        if ack_flags & ~0x01:
            raise MalformedPacket("invalid CONNACK acknowledge flags")
        code = r.take(1)[0]
        r.expect_end()
        p = Packet(kind, session_present=bool(ack_flags & 0x01), return_code=code)
    elif kind == PacketKind.PUBACK:
        pid = r.u16()
        if pid == 0:
            raise MalformedPacket("zero packet id on PUBACK")
        r.expect_end()
        p = Packet(kind, packet_id=pid)
    elif kind == PacketKind.SUBSCRIBE:
        pid = r.u16()
        if pid == 0:
            raise MalformedPacket("zero packet id on SUBSCRIBE")
        topic_filter = r.utf8()
        validate_filter(topic_filter)
        qos_raw = r.take(1)[0]
        if qos_raw > 1:
            raise MalformedPacket(f"requested QoS {qos_raw} outside supported subset")
        r.expect_end()
        p = Packet(kind, qos=qos_raw, packet_id=pid, topic=topic_filter)
    elif kind == PacketKind.SUBACK:
        pid = r.u16()
        if pid == 0:
            raise MalformedPacket("zero packet id on SUBACK")
        code = r.take(1)[0]
        if code not in (0x00, 0x01, 0x80):
            raise MalformedPacket(f"invalid SUBACK return code {code:#x}")
        r.expect_end()
        p = Packet(kind, qos=code if code != 0x80 else 0, packet_id=pid, return_code=code)
    else:  # PINGREQ / PINGRESP / DISCONNECT
        r.expect_end()
        p = Packet(kind)
    return p, consumed


@dataclass
class StreamDecoder:
    """Reassembles packets from a byte stream split at arbitrary points."""

    _buffer: bytearray = field(default_factory=bytearray)

    def feed(self, chunk: bytes) -> list[Packet]:
        """Append ``chunk`` and return every complete packet now available."""
        self._buffer.extend(chunk)
        out: list[Packet] = []
        view = memoryview(self._buffer)
        pos = 0
        try:
            while pos < len(view):
                packet, used = decode_packet(view[pos:])
                out.append(packet)
                pos += used
        except NeedMoreData:
            pass
        finally:
            view.release()
        del self._buffer[:pos]
        return out

    @property
    def pending_bytes(self) -> int:
        return len(self._buffer)
