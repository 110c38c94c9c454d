"""Threaded MQTT 3.1.1 subset broker.

One thread per client connection. QoS 0 only: no persistence, no
retransmission. A new connection reusing an existing client id evicts
the old one (standard broker behavior, and what a reconnecting gateway
relies on). Connection-level failures close that client only; the
broker itself stays up under arbitrary malformed input.
"""

from __future__ import annotations

import logging
import socket
import threading
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .packets import (
    MalformedPacket,
    Packet,
    PacketKind,
    UnsupportedType,
    decode_packet,
    encode_packet,
)
from .topics import InvalidFilter, topic_matches, validate_filter
from .wire import recv_packet

log = logging.getLogger(__name__)

CONNACK_OK = 0
CONNACK_BAD_CREDENTIALS = 4
SUBACK_FAILURE = 0x80


def _force_close(sock: socket.socket) -> None:
    # shutdown first: close() alone is deferred while another thread sits in
    # recv() on the same socket, so no FIN would reach the peer
    try:
        sock.shutdown(socket.SHUT_RDWR)
    except OSError:
        pass
    try:
        sock.close()
    except OSError:
        pass


@dataclass(frozen=True)
class Subscription:
    client_id: str
    filter: str


def broker_dispatch(
    publish: Packet, subs: Iterable[Subscription]
) -> list[tuple[str, Packet]]:
    """Deliveries for one PUBLISH: at most one per client, payload untouched.

    A client subscribed with several overlapping filters still receives a
    single copy (deduplicated on client_id).
    """
    seen: set[str] = set()
    out: list[tuple[str, Packet]] = []
    for sub in subs:
        if sub.client_id in seen:
            continue
        if topic_matches(sub.filter, publish.topic):
            seen.add(sub.client_id)
            out.append((sub.client_id, publish))
    return out


@dataclass
class BrokerLimits:
    max_packet_bytes: int = 64 * 1024
    max_clients: int = 128
    max_subscriptions_per_client: int = 64


class _ClientConn:
    def __init__(self, sock: socket.socket, client_id: str):
        self.sock = sock
        self.client_id = client_id
        self.write_lock = threading.Lock()

    def send(self, data: bytes) -> None:
        with self.write_lock:
            self.sock.sendall(data)


class Broker:
    """TCP broker; start() serves in a daemon thread, stop() shuts down."""

    def __init__(
        self,
        host: str = "127.0.0.1",
        port: int = 1883,
        limits: Optional[BrokerLimits] = None,
        allowed_tokens: Optional[set[str]] = None,
    ):
        self.host = host
        self.port = port
        self.limits = limits or BrokerLimits()
        self.allowed_tokens = allowed_tokens
        self._lock = threading.RLock()
        self._clients: dict[str, _ClientConn] = {}
        self._subs: dict[str, list[str]] = {}
        self._server_sock: Optional[socket.socket] = None
        self._accept_thread: Optional[threading.Thread] = None
        self._stopping = threading.Event()
        self.published_count = 0
        self.delivered_count = 0

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> None:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((self.host, self.port))
        sock.listen(32)
        self.port = sock.getsockname()[1]  # resolves port 0 to the real one
        self._server_sock = sock
        self._stopping.clear()
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="mqtt-broker-accept", daemon=True
        )
        self._accept_thread.start()
        log.info("broker listening on %s:%d", self.host, self.port)

    def stop(self) -> None:
        self._stopping.set()
        if self._server_sock:
            _force_close(self._server_sock)
        with self._lock:
            conns = list(self._clients.values())
        for conn in conns:
            _force_close(conn.sock)
        if self._accept_thread:
            self._accept_thread.join(timeout=2)

    def __enter__(self) -> "Broker":
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.stop()

    @property
    def address(self) -> tuple[str, int]:
        return (self.host, self.port)

    def client_count(self) -> int:
        with self._lock:
            return len(self._clients)

    # -- connection handling -------------------------------------------------

    def _accept_loop(self) -> None:
        assert self._server_sock is not None
        while not self._stopping.is_set():
            try:
                sock, addr = self._server_sock.accept()
            except OSError:
                break
            threading.Thread(
                target=self._serve_client, args=(sock, addr), daemon=True
            ).start()

    def _serve_client(self, sock: socket.socket, addr) -> None:
        client_id = None
        conn = None
        try:
            sock.settimeout(10.0)  # CONNECT must arrive promptly
            connect = decode_packet(recv_packet(sock, self.limits.max_packet_bytes))
            if connect.kind is not PacketKind.CONNECT:
                log.debug("%s: first packet was %s, dropping", addr, connect.kind.name)
                return
            if (
                self.allowed_tokens is not None
                and connect.username not in self.allowed_tokens
            ):
                sock.sendall(
                    encode_packet(
                        Packet(PacketKind.CONNACK, return_code=CONNACK_BAD_CREDENTIALS)
                    )
                )
                return
            with self._lock:
                if len(self._clients) >= self.limits.max_clients:
                    log.warning("client limit reached, refusing %s", addr)
                    return
            client_id = connect.client_id or f"anon-{addr[0]}-{addr[1]}"
            conn = _ClientConn(sock, client_id)
            self._register(conn)
            sock.sendall(encode_packet(Packet(PacketKind.CONNACK, return_code=CONNACK_OK)))
            # keep-alive policy: disconnect after 1.5x the announced interval
            # with no traffic; 0 disables the check.
            if connect.keep_alive_s:
                sock.settimeout(1.5 * connect.keep_alive_s)
            else:
                sock.settimeout(None)
            self._packet_loop(conn)
        except (ConnectionError, OSError, socket.timeout):
            pass
        except (MalformedPacket, UnsupportedType) as exc:
            log.debug("%s (%s): protocol error: %s", addr, client_id, exc)
        finally:
            if conn is not None:
                self._unregister(conn)
            try:
                sock.close()
            except OSError:
                pass

    def _packet_loop(self, conn: _ClientConn) -> None:
        while True:
            packet = decode_packet(recv_packet(conn.sock, self.limits.max_packet_bytes))
            if packet.kind is PacketKind.PUBLISH:
                self._handle_publish(packet)
            elif packet.kind is PacketKind.SUBSCRIBE:
                self._handle_subscribe(conn, packet)
            elif packet.kind is PacketKind.PINGREQ:
                conn.send(encode_packet(Packet(PacketKind.PINGRESP)))
            elif packet.kind is PacketKind.DISCONNECT:
                return
            else:
                raise MalformedPacket(f"client sent {packet.kind.name}")

    def _handle_publish(self, packet: Packet) -> None:
        with self._lock:
            self.published_count += 1
            subs = [
                Subscription(cid, f)
                for cid, filters in self._subs.items()
                for f in filters
            ]
            conns = dict(self._clients)
        data = encode_packet(packet)
        for cid, _ in broker_dispatch(packet, subs):
            target = conns.get(cid)
            if target is None:
                continue
            try:
                target.send(data)
                with self._lock:
                    self.delivered_count += 1
            except OSError:
                # receiver went away; its own thread cleans up
                pass

    def _handle_subscribe(self, conn: _ClientConn, packet: Packet) -> None:
        granted = []
        with self._lock:
            filters = self._subs.setdefault(conn.client_id, [])
            for f in packet.filters:
                try:
                    validate_filter(f)
                except InvalidFilter:
                    granted.append(SUBACK_FAILURE)
                    continue
                if (
                    f not in filters
                    and len(filters) >= self.limits.max_subscriptions_per_client
                ):
                    granted.append(SUBACK_FAILURE)
                    continue
                if f not in filters:
                    filters.append(f)
                granted.append(0)
        conn.send(
            encode_packet(
                Packet(
                    PacketKind.SUBACK,
                    packet_id=packet.packet_id,
                    granted_qos=tuple(granted),
                )
            )
        )

    def _register(self, conn: _ClientConn) -> None:
        evicted = None
        with self._lock:
            evicted = self._clients.get(conn.client_id)
            self._clients[conn.client_id] = conn
            self._subs.setdefault(conn.client_id, [])
        if evicted is not None:
            log.info("client id %r reconnected, evicting old connection", conn.client_id)
            _force_close(evicted.sock)

    def _unregister(self, conn: _ClientConn) -> None:
        with self._lock:
            # only remove if this connection still owns the id (it may have
            # been evicted by a reconnect)
            if self._clients.get(conn.client_id) is conn:
                del self._clients[conn.client_id]
                self._subs.pop(conn.client_id, None)
