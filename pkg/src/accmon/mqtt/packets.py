"""MQTT 3.1.1 wire codec for the supported packet subset.

Only what the telemetry bus needs: CONNECT/CONNACK, PUBLISH at QoS 0,
SUBSCRIBE/SUBACK, PINGREQ/PINGRESP, DISCONNECT. Anything else (QoS > 0,
retain, wills, other packet types) decodes to UnsupportedType.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

MAX_REMAINING_LENGTH = 268_435_455  # 4-byte varint ceiling per MQTT 3.1.1


class MalformedPacket(Exception):
    pass


class UnsupportedType(Exception):
    pass


class PacketKind(IntEnum):
    CONNECT = 1
    CONNACK = 2
    PUBLISH = 3
    SUBSCRIBE = 8
    SUBACK = 9
    PINGREQ = 12
    PINGRESP = 13
    DISCONNECT = 14


_SUPPORTED = {k.value for k in PacketKind}


@dataclass(frozen=True)
class Packet:
    kind: PacketKind
    client_id: str = ""
    username: str = ""          # CONNECT: static bearer token
    keep_alive_s: int = 0
    clean_session: bool = True
    topic: str = ""             # PUBLISH
    payload: bytes = b""        # PUBLISH
    filters: tuple[str, ...] = field(default_factory=tuple)  # SUBSCRIBE
    packet_id: int = 0          # SUBSCRIBE / SUBACK
    return_code: int = 0        # CONNACK
    granted_qos: tuple[int, ...] = field(default_factory=tuple)  # SUBACK


def encode_varint(value: int) -> bytes:
    if not 0 <= value <= MAX_REMAINING_LENGTH:
        raise MalformedPacket(f"remaining length {value} out of range")
    out = bytearray()
    while True:
        digit = value % 128
        value //= 128
        if value:
            digit |= 0x80
        out.append(digit)
        if not value:
            return bytes(out)


def decode_varint(data: bytes, offset: int = 0) -> tuple[int, int]:
    """Returns (value, bytes consumed). Raises MalformedPacket on overrun."""
    multiplier = 1
    value = 0
    consumed = 0
    while True:
        if offset + consumed >= len(data):
            raise MalformedPacket("truncated remaining-length varint")
        byte = data[offset + consumed]
        value += (byte & 0x7F) * multiplier
        consumed += 1
        if not byte & 0x80:
            return value, consumed
        multiplier *= 128
        if multiplier > 128 ** 3:
            raise MalformedPacket("remaining-length varint too long")


def _mqtt_string(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise MalformedPacket("string too long")
    return struct.pack("!H", len(raw)) + raw


def _read_string(data: bytes, pos: int) -> tuple[str, int]:
    if pos + 2 > len(data):
        raise MalformedPacket("truncated string length")
    (n,) = struct.unpack_from("!H", data, pos)
    pos += 2
    if pos + n > len(data):
        raise MalformedPacket("truncated string body")
    try:
        return data[pos : pos + n].decode("utf-8"), pos + n
    except UnicodeDecodeError as exc:
        raise MalformedPacket("invalid UTF-8 in string") from exc


def encode_packet(p: Packet) -> bytes:
    if p.kind is PacketKind.CONNECT:
        flags = 0x02 if p.clean_session else 0x00
        if p.username:
            flags |= 0x80
        body = _mqtt_string("MQTT") + bytes([4, flags]) + struct.pack("!H", p.keep_alive_s)
        body += _mqtt_string(p.client_id)
        if p.username:
            body += _mqtt_string(p.username)
        first = 0x10
    elif p.kind is PacketKind.CONNACK:
        body = bytes([0x00, p.return_code])
        first = 0x20
    elif p.kind is PacketKind.PUBLISH:
        if not p.topic:
            raise MalformedPacket("PUBLISH requires a topic")
        if any(c in p.topic for c in "+#"):
            raise MalformedPacket("wildcards not allowed in PUBLISH topic")
        body = _mqtt_string(p.topic) + p.payload
        first = 0x30  # QoS 0, no dup, no retain
    elif p.kind is PacketKind.SUBSCRIBE:
        if not p.filters:
            raise MalformedPacket("SUBSCRIBE requires at least one filter")
        body = struct.pack("!H", p.packet_id)
        for f in p.filters:
            body += _mqtt_string(f) + bytes([0])  # requested QoS 0
        first = 0x82  # fixed flags 0b0010
    elif p.kind is PacketKind.SUBACK:
        body = struct.pack("!H", p.packet_id) + bytes(p.granted_qos)
        first = 0x90
    elif p.kind is PacketKind.PINGREQ:
        return b"\xc0\x00"
    elif p.kind is PacketKind.PINGRESP:
        return b"\xd0\x00"
    elif p.kind is PacketKind.DISCONNECT:
        return b"\xe0\x00"
    else:  # pragma: no cover - enum is closed
        raise UnsupportedType(str(p.kind))
    return bytes([first]) + encode_varint(len(body)) + body


def decode_packet(data: bytes) -> Packet:
    """Decode exactly one packet; extra trailing bytes are malformed."""
    if not data:
        raise MalformedPacket("empty packet")
    first = data[0]
    ptype = first >> 4
    flags = first & 0x0F
    if ptype not in _SUPPORTED:
        raise UnsupportedType(f"packet type {ptype}")
    length, consumed = decode_varint(data, 1)
    body = data[1 + consumed : 1 + consumed + length]
    if len(body) != length or len(data) != 1 + consumed + length:
        raise MalformedPacket("length field does not match packet size")
    kind = PacketKind(ptype)

    if kind is PacketKind.CONNECT:
        proto, pos = _read_string(body, 0)
        if proto != "MQTT":
            raise MalformedPacket(f"unknown protocol name {proto!r}")
        if pos + 4 > len(body):
            raise MalformedPacket("truncated CONNECT header")
        level = body[pos]
        if level != 4:
            raise UnsupportedType(f"protocol level {level}")
        cflags = body[pos + 1]
        if cflags & 0x04:
            raise UnsupportedType("will flag not supported")
        (keep_alive,) = struct.unpack_from("!H", body, pos + 2)
        pos += 4
        client_id, pos = _read_string(body, pos)
        username = ""
        if cflags & 0x80:
            username, pos = _read_string(body, pos)
        if cflags & 0x40:  # password present: tolerated, ignored
            _, pos = _read_string(body, pos)
        if pos != len(body):
            raise MalformedPacket("trailing bytes in CONNECT")
        return Packet(
            kind,
            client_id=client_id,
            username=username,
            keep_alive_s=keep_alive,
            clean_session=bool(cflags & 0x02),
        )

    if kind is PacketKind.CONNACK:
        if length != 2:
            raise MalformedPacket("CONNACK must have 2 body bytes")
        return Packet(kind, return_code=body[1])

    if kind is PacketKind.PUBLISH:
        qos = (flags >> 1) & 0x03
        if qos:
            raise UnsupportedType(f"QoS {qos} not supported")
        if flags & 0x01:
            raise UnsupportedType("retain not supported")
        topic, pos = _read_string(body, 0)
        if not topic:
            raise MalformedPacket("empty PUBLISH topic")
        if any(c in topic for c in "+#"):
            raise MalformedPacket("wildcards not allowed in PUBLISH topic")
        return Packet(kind, topic=topic, payload=body[pos:])

    if kind is PacketKind.SUBSCRIBE:
        if flags != 0x02:
            raise MalformedPacket("SUBSCRIBE fixed flags must be 0b0010")
        if len(body) < 2:
            raise MalformedPacket("truncated SUBSCRIBE")
        (packet_id,) = struct.unpack_from("!H", body, 0)
        pos = 2
        filters = []
        while pos < len(body):
            f, pos = _read_string(body, pos)
            if pos >= len(body):
                raise MalformedPacket("missing requested QoS byte")
            if body[pos] > 2:
                raise MalformedPacket("invalid requested QoS")
            pos += 1  # requested QoS is granted as 0 regardless
            filters.append(f)
        if not filters:
            raise MalformedPacket("SUBSCRIBE with no filters")
        return Packet(kind, packet_id=packet_id, filters=tuple(filters))

    if kind is PacketKind.SUBACK:
        if len(body) < 2:
            raise MalformedPacket("truncated SUBACK")
        (packet_id,) = struct.unpack_from("!H", body, 0)
        return Packet(kind, packet_id=packet_id, granted_qos=tuple(body[2:]))

    # PINGREQ / PINGRESP / DISCONNECT carry no body
    if length != 0:
        raise MalformedPacket(f"{kind.name} must have an empty body")
    return Packet(kind)
