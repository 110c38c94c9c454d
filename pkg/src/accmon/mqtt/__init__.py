"""Minimal MQTT 3.1.1 subset: codec, topic matching, broker and client.

Supported packets: CONNECT, CONNACK, PUBLISH (QoS 0 only), SUBSCRIBE,
SUBACK, PINGREQ, PINGRESP, DISCONNECT. No retained messages, no wills,
no sessions. Byte layouts are documented in docs/mqtt-subset.md.
"""

from .packets import (  # noqa: F401
    MalformedPacket,
    Packet,
    PacketKind,
    UnsupportedType,
    decode_packet,
    encode_packet,
)
from .topics import InvalidFilter, topic_matches, validate_filter  # noqa: F401
from .broker import Broker, BrokerLimits, Subscription, broker_dispatch  # noqa: F401
from .client import MqttClient, MqttError  # noqa: F401
