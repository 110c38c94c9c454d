"""Telemetry gateway: reads a meter's TIC stream, publishes over MQTT.

One gateway is one logical process with two concurrent duties: the
periodic publish loop (every refresh period it samples the freshest
complete TIC frame, "latest frame wins") and the control subscription
(commands forwarded to the house's controllable-load hook). On broker
loss it retries with exponential backoff (1 s doubling to a 60 s cap)
and resumes with its sequence counter continuing, so a subscriber can
count the missed ticks from the gap.

A reading derived from a checksum-failed frame is never published: the
frame is skipped and counted, and more than 5 consecutive failures emit
a status message on acc/ops/status.
"""

from __future__ import annotations

import enum
import json
import logging
import threading
from dataclasses import dataclass
from typing import Callable, Optional

from .clock import Clock
from .mqtt import MqttClient, MqttError
from .telemetry import TelemetryPoint, encode_telemetry
from .tic import TicError, TicMode, extract_reading, parse_frame

log = logging.getLogger(__name__)

BACKOFF_INITIAL_S = 1.0
BACKOFF_CAP_S = 60.0
TIC_FAILURE_ALERT_THRESHOLD = 5
MAX_BACKLOG_TICKS = 120  # beyond this the loop jumps ahead instead of catching up


class ControlError(Exception):
    pass


class ControlAction(enum.Enum):
    ON = "on"
    OFF = "off"
    SET_POWER = "set_power"


@dataclass(frozen=True)
class ControlCommand:
    device: str
    action: ControlAction
    value_w: Optional[int] = None

    def __post_init__(self):
        if not self.device:
            raise ControlError("device must be non-empty")
        if self.action is ControlAction.SET_POWER and self.value_w is None:
            raise ControlError("set_power requires value_w")
        if self.value_w is not None and self.value_w < 0:
            raise ControlError("value_w must be >= 0")

    def to_json(self) -> bytes:
        obj: dict = {"device": self.device, "action": self.action.value}
        if self.value_w is not None:
            obj["value_w"] = self.value_w
        return json.dumps(obj, separators=(",", ":")).encode()

    @classmethod
    def from_json(cls, payload: bytes) -> "ControlCommand":
        try:
            obj = json.loads(payload.decode("utf-8"))
            action = ControlAction(obj["action"])
            value = obj.get("value_w")
            return cls(device=obj["device"], action=action,
                       value_w=int(value) if value is not None else None)
        except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
            raise ControlError(f"bad control payload: {exc}") from exc


@dataclass
class GatewayConfig:
    house_id: str
    broker_host: str
    broker_port: int
    refresh_period_s: int = 30
    tic_mode: TicMode = TicMode.STANDARD
    credentials: str = ""  # static bearer token sent as MQTT username

    def __post_init__(self):
        if self.refresh_period_s < 1:
            raise ValueError("refresh_period_s must be >= 1")

    @property
    def telemetry_topic(self) -> str:
        return f"acc/{self.house_id}/telemetry"

    @property
    def control_topic(self) -> str:
        return f"acc/{self.house_id}/control"


STATUS_TOPIC = "acc/ops/status"


class Gateway:
    """Publish loop + control subscription for one house."""

    def __init__(
        self,
        config: GatewayConfig,
        tic_source: Callable[[float], bytes],
        control_hook: Optional[Callable[[ControlCommand], None]] = None,
        clock: Optional[Clock] = None,
    ):
        self.config = config
        self.tic_source = tic_source
        self.control_hook = control_hook
        self.clock = clock or Clock()
        self.seq = 0
        self.published = 0
        self.tic_errors = 0
        self.control_errors = 0
        self._consecutive_tic_failures = 0
        self._client: Optional[MqttClient] = None
        self._backoff_s = BACKOFF_INITIAL_S
        self._retry_at = 0.0
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> "Gateway":
        self._thread = threading.Thread(
            target=self._run, name=f"gateway-{self.config.house_id}", daemon=True
        )
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._client is not None:
            self._client.close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def join(self, timeout=None) -> None:
        if self._thread is not None:
            self._thread.join(timeout)

    @property
    def connected(self) -> bool:
        return self._client is not None and self._client.connected

    # -- connection management -------------------------------------------------

    def _ensure_connected(self, now: float) -> bool:
        if self.connected:
            return True
        if now < self._retry_at:
            return False
        client = MqttClient(
            self.config.broker_host,
            self.config.broker_port,
            client_id=f"gw-{self.config.house_id}",
            username=self.config.credentials,
            keep_alive_s=60,
            on_message=self._on_control,
        )
        try:
            client.connect(timeout=2.0)
            client.subscribe(self.config.control_topic)
        except (MqttError, OSError) as exc:
            log.debug("%s: connect failed: %s", self.config.house_id, exc)
            client.close()
            self._retry_at = now + self._backoff_s
            self._backoff_s = min(self._backoff_s * 2, BACKOFF_CAP_S)
            return False
        self._client = client
        self._backoff_s = BACKOFF_INITIAL_S
        self._retry_at = 0.0
        log.info("%s: connected to broker", self.config.house_id)
        return True

    def _on_control(self, topic: str, payload: bytes) -> None:
        try:
            cmd = ControlCommand.from_json(payload)
        except ControlError as exc:
            self.control_errors += 1
            log.warning("%s: dropping control message: %s", self.config.house_id, exc)
            return
        if self.control_hook is not None:
            self.control_hook(cmd)

    # -- publish loop ------------------------------------------------------------

    def _run(self) -> None:
        period = self.config.refresh_period_s
        next_tick = (int(self.clock.now()) // period + 1) * period
        while not self._stop.is_set():
            self.clock.sleep_until(next_tick)
            if self._stop.is_set():
                break
            self._tick(next_tick)
            next_tick += period
            # a late loop catches up tick by tick (each publish carries its
            # scheduled timestamp); only a pathological clock jump is
            # skipped, with the missed sequence numbers staying consumed
            now = self.clock.now()
            if next_tick + period * MAX_BACKLOG_TICKS < now:
                missed = int((now - next_tick) // period) + 1
                self.seq += missed
                next_tick += missed * period

    def _tick(self, tick_ts: int) -> None:
        self.seq += 1
        # connect before sampling: the control subscription and status
        # reporting must work even while the TIC side is broken
        connected = self._ensure_connected(self.clock.now())
        reading = self._sample_reading(tick_ts)
        if reading is None or not connected:
            return
        point = TelemetryPoint(
            house_id=self.config.house_id, ts=int(tick_ts), seq=self.seq, reading=reading
        )
        try:
            assert self._client is not None
            self._client.publish(self.config.telemetry_topic, encode_telemetry(point))
            self.published += 1
        except MqttError as exc:
            log.info("%s: publish failed, will reconnect: %s", self.config.house_id, exc)

    def _sample_reading(self, now: float):
        try:
            raw = self.tic_source(now)
            frame = parse_frame(raw, self.config.tic_mode)
            reading = extract_reading(frame)
        except TicError as exc:
            self.tic_errors += 1
            self._consecutive_tic_failures += 1
            log.warning("%s: TIC frame skipped: %s", self.config.house_id, exc)
            if self._consecutive_tic_failures == TIC_FAILURE_ALERT_THRESHOLD + 1:
                self._emit_status("tic_failures", self._consecutive_tic_failures)
            return None
        self._consecutive_tic_failures = 0
        return reading

    def _emit_status(self, event: str, count: int) -> None:
        if not self.connected:
            return
        body = json.dumps(
            {
                "house": self.config.house_id,
                "ts": int(self.clock.now()),
                "event": event,
                "count": count,
            },
            separators=(",", ":"),
        ).encode()
        try:
            assert self._client is not None
            self._client.publish(STATUS_TOPIC, body)
        except MqttError:
            pass


def run_gateway(
    config: GatewayConfig,
    tic_source: Callable[[float], bytes],
    control_hook: Optional[Callable[[ControlCommand], None]] = None,
    clock: Optional[Clock] = None,
) -> Gateway:
    """Start a gateway in its own thread and return the handle."""
    return Gateway(config, tic_source, control_hook, clock).start()


class RecordedTicSource:
    """Replays frames from a binary capture, cycling forever.

    The capture is a concatenation of raw TIC frames (STX...ETX); frames
    are split without validation so corrupt captures exercise the
    gateway's skip-and-count path.
    """

    def __init__(self, raw: bytes):
        self.frames: list[bytes] = []
        pos = 0
        while True:
            start = raw.find(b"\x02", pos)
            if start < 0:
                break
            end = raw.find(b"\x03", start + 1)
            if end < 0:
                break
            self.frames.append(raw[start : end + 1])
            pos = end + 1
        if not self.frames:
            raise ValueError("capture contains no frames")
        self._i = 0

    def __call__(self, now: float) -> bytes:
        frame = self.frames[self._i % len(self.frames)]
        self._i += 1
        return frame
