"""Single-connection MQTT client protocol engine.

Usable from one thread at a time; a background reader thread routes
incoming PUBLISH packets to a queue (or an on_message callback) and
answers nothing on its own. Reconnection policy belongs to the caller
(the gateway), not here.
"""

from __future__ import annotations

import logging
import queue
import socket
import threading
import time
from typing import Callable, Optional

from .packets import Packet, PacketKind, decode_packet, encode_packet
from .wire import recv_packet

log = logging.getLogger(__name__)


class MqttError(Exception):
    pass


class MqttClient:
    def __init__(
        self,
        host: str,
        port: int,
        client_id: str,
        username: str = "",
        keep_alive_s: int = 60,
        on_message: Optional[Callable[[str, bytes], None]] = None,
        max_packet_bytes: int = 64 * 1024,
    ):
        self.host = host
        self.port = port
        self.client_id = client_id
        self.username = username
        self.keep_alive_s = keep_alive_s
        self.on_message = on_message
        self.max_packet_bytes = max_packet_bytes
        self._sock: Optional[socket.socket] = None
        self._send_lock = threading.Lock()
        self._acks: "queue.Queue[Packet]" = queue.Queue()
        self._messages: "queue.Queue[tuple[str, bytes]]" = queue.Queue()
        self._reader: Optional[threading.Thread] = None
        self._pinger: Optional[threading.Thread] = None
        self._closed = threading.Event()
        self._last_send = 0.0
        self._packet_id = 0

    # -- lifecycle ---------------------------------------------------------

    def connect(self, timeout: float = 5.0) -> None:
        sock = socket.create_connection((self.host, self.port), timeout=timeout)
        sock.settimeout(timeout)
        sock.sendall(
            encode_packet(
                Packet(
                    PacketKind.CONNECT,
                    client_id=self.client_id,
                    username=self.username,
                    keep_alive_s=self.keep_alive_s,
                )
            )
        )
        ack = decode_packet(recv_packet(sock, self.max_packet_bytes))
        if ack.kind is not PacketKind.CONNACK:
            sock.close()
            raise MqttError(f"expected CONNACK, got {ack.kind.name}")
        if ack.return_code != 0:
            sock.close()
            raise MqttError(f"connection refused (return code {ack.return_code})")
        sock.settimeout(None)
        self._sock = sock
        self._closed.clear()
        self._last_send = time.monotonic()
        self._reader = threading.Thread(
            target=self._read_loop, name=f"mqtt-{self.client_id}-reader", daemon=True
        )
        self._reader.start()
        if self.keep_alive_s:
            self._pinger = threading.Thread(
                target=self._ping_loop, name=f"mqtt-{self.client_id}-ping", daemon=True
            )
            self._pinger.start()

    @property
    def connected(self) -> bool:
        return self._sock is not None and not self._closed.is_set()

    def close(self) -> None:
        if self._sock is not None and not self._closed.is_set():
            try:
                self._send(encode_packet(Packet(PacketKind.DISCONNECT)))
            except (OSError, MqttError):
                pass
        self._teardown()

    def _teardown(self) -> None:
        self._closed.set()
        if self._sock is not None:
            # shutdown wakes a reader thread blocked in recv(); a bare
            # close() would be deferred until that recv returned
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                self._sock.close()
            except OSError:
                pass

    # -- operations ----------------------------------------------------------

    def publish(self, topic: str, payload: bytes) -> None:
        """QoS 0 publish: fire and forget."""
        self._send(encode_packet(Packet(PacketKind.PUBLISH, topic=topic, payload=payload)))

    def subscribe(self, *filters: str, timeout: float = 5.0) -> tuple[int, ...]:
        self._packet_id = self._packet_id % 0xFFFF + 1
        self._send(
            encode_packet(
                Packet(PacketKind.SUBSCRIBE, packet_id=self._packet_id, filters=filters)
            )
        )
        deadline = time.monotonic() + timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise MqttError("timed out waiting for SUBACK")
            try:
                ack = self._acks.get(timeout=remaining)
            except queue.Empty:
                continue
            if ack.kind is PacketKind.SUBACK and ack.packet_id == self._packet_id:
                return ack.granted_qos

    def recv(self, timeout: Optional[float] = None) -> Optional[tuple[str, bytes]]:
        """Next received (topic, payload), or None on timeout/close."""
        try:
            return self._messages.get(timeout=timeout)
        except queue.Empty:
            return None

    # -- internals -----------------------------------------------------------

    def _send(self, data: bytes) -> None:
        if self._sock is None or self._closed.is_set():
            raise MqttError("not connected")
        try:
            with self._send_lock:
                self._sock.sendall(data)
                self._last_send = time.monotonic()
        except OSError as exc:
            self._teardown()
            raise MqttError(f"send failed: {exc}") from exc

    def _read_loop(self) -> None:
        assert self._sock is not None
        sock = self._sock
        try:
            while not self._closed.is_set():
                packet = decode_packet(recv_packet(sock, self.max_packet_bytes))
                if packet.kind is PacketKind.PUBLISH:
                    if self.on_message is not None:
                        try:
                            self.on_message(packet.topic, packet.payload)
                        except Exception:  # callback bugs must not kill the reader
                            log.exception("on_message callback failed")
                    else:
                        self._messages.put((packet.topic, packet.payload))
                elif packet.kind is PacketKind.SUBACK:
                    self._acks.put(packet)
                # PINGRESP and anything else: nothing to do
        except Exception:
            pass
        finally:
            self._teardown()

    def _ping_loop(self) -> None:
        interval = max(self.keep_alive_s / 2.0, 0.5)
        while not self._closed.wait(interval):
            if time.monotonic() - self._last_send >= interval:
                try:
                    self._send(encode_packet(Packet(PacketKind.PINGREQ)))
                except MqttError:
                    return
