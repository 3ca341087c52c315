"""Telemetry fabric: MQTT 3.1.1 codec, in-process broker, simulated links."""

from .broker import Broker, BrokerSession, InflightEntry
from .client import MqttClient
from .codec import (MalformedPacket, NeedMoreData, OversizePacket, Packet,
                    PacketKind, StreamDecoder, decode_packet, encode_packet,
                    topic_matches)
from .faults import PERFECT_LINK, FaultInjector, FaultProfile
from .simnet import SimNetwork
from .stats import LinkLog, LinkMetrics, link_stats

__all__ = [
    "Broker", "BrokerSession", "InflightEntry", "MqttClient",
    "MalformedPacket", "NeedMoreData", "OversizePacket", "Packet",
    "PacketKind", "StreamDecoder", "decode_packet", "encode_packet",
    "topic_matches", "PERFECT_LINK", "FaultInjector", "FaultProfile",
    "SimNetwork", "LinkLog", "LinkMetrics", "link_stats",
]
