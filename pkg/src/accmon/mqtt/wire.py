"""Socket-level packet framing shared by broker and client."""

from __future__ import annotations

import socket

from .packets import MalformedPacket, decode_varint


def recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed connection")
        buf += chunk
    return bytes(buf)


def recv_packet(sock: socket.socket, max_size: int) -> bytes:
    """Read one whole MQTT packet (fixed header + body) off a socket.

    Raises ConnectionError on EOF, MalformedPacket on a bad varint or a
    packet exceeding max_size.
    """
    header = bytearray(recv_exact(sock, 1))
    # remaining-length varint: 1 to 4 bytes, continuation bit driven
    for _ in range(4):
        header += recv_exact(sock, 1)
        if not header[-1] & 0x80:
            break
    else:
        raise MalformedPacket("remaining-length varint too long")
    length, _ = decode_varint(bytes(header), 1)
    if 1 + (len(header) - 1) + length > max_size:
        raise MalformedPacket(f"packet exceeds size limit ({length} bytes body)")
    return bytes(header) + (recv_exact(sock, length) if length else b"")
