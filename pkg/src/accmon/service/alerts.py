"""Alert dispatch: consumption-shift nudges and system faults.

Channels are pluggable sinks. Built-ins: a file sink (one ISO-8601
timestamped line per delivery) and a webhook sink (HTTP POST of the
alert JSON). A failing sink is retried 3 times, then the delivery is
recorded as failed; alerts themselves are kept in a ring so the API can
serve the per-house inbox.
"""

from __future__ import annotations

import datetime as dt
import enum
import json
import logging
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Optional, Protocol

log = logging.getLogger(__name__)

MAX_KEPT_ALERTS = 1000
RETRIES = 3


class AlertChannel(enum.Enum):
    EMAIL = "email"
    SMS = "sms"
    NOTIFICATION = "notification"


class AlertKind(enum.Enum):
    SHIFT_CONSUMPTION = "shift_consumption"
    REDUCE_CONSUMPTION = "reduce_consumption"
    SYSTEM_FAULT = "system_fault"


@dataclass(frozen=True)
class AlertMessage:
    channel: AlertChannel
    kind: AlertKind
    body: str
    house_id: Optional[str] = None  # None = broadcast to the whole operation
    created_at: int = 0
    delivered_at: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "channel": self.channel.value,
            "kind": self.kind.value,
            "body": self.body,
            "house": self.house_id,
            "created_at": self.created_at,
            "delivered_at": self.delivered_at,
        }


@dataclass(frozen=True)
class DeliveryRecord:
    alert: AlertMessage
    sink: str
    ok: bool
    attempts: int
    delivered_at: Optional[int]
    error: str = ""

    def to_dict(self) -> dict:
        return {
            "alert": self.alert.to_dict(),
            "sink": self.sink,
            "ok": self.ok,
            "attempts": self.attempts,
            "delivered_at": self.delivered_at,
            "error": self.error,
        }


class AlertSink(Protocol):
    name: str

    def deliver(self, alert: AlertMessage, now: int) -> None: ...


class FileSink:
    def __init__(self, path: str):
        self.name = f"file:{path}"
        self.path = path
        self._lock = threading.Lock()

    def deliver(self, alert: AlertMessage, now: int) -> None:
        stamp = dt.datetime.fromtimestamp(now, dt.timezone.utc).isoformat()
        line = f"{stamp} {json.dumps(alert.to_dict(), separators=(',', ':'))}\n"
        with self._lock, open(self.path, "a", encoding="utf-8") as f:
            f.write(line)


class WebhookSink:
    def __init__(self, url: str, timeout_s: float = 3.0):
        self.name = f"webhook:{url}"
        self.url = url
        self.timeout_s = timeout_s

    def deliver(self, alert: AlertMessage, now: int) -> None:
        req = urllib.request.Request(
            self.url,
            data=json.dumps(alert.to_dict()).encode(),
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
            if resp.status >= 400:
                raise urllib.error.HTTPError(self.url, resp.status, "sink refused", None, None)


class AlertDispatcher:
    def __init__(self, sinks: Optional[list] = None, now_fn=None):
        self.sinks = sinks if sinks is not None else []
        self.now_fn = now_fn or (lambda: 0)
        self._lock = threading.Lock()
        self._alerts: list[AlertMessage] = []
        self._deliveries: list[DeliveryRecord] = []

    def dispatch(self, alert: AlertMessage) -> list[DeliveryRecord]:
        """Deliver to every sink; per-sink retry then a failed record."""
        now = int(self.now_fn())
        records = []
        for sink in self.sinks:
            ok = False
            error = ""
            attempts = 0
            for attempts in range(1, RETRIES + 1):
                try:
                    sink.deliver(alert, now)
                    ok = True
                    break
                except Exception as exc:
                    error = str(exc)
                    log.warning("alert sink %s failed (try %d): %s", sink.name, attempts, exc)
            records.append(
                DeliveryRecord(
                    alert=alert,
                    sink=sink.name,
                    ok=ok,
                    attempts=attempts,
                    delivered_at=now if ok else None,
                    error=error,
                )
            )
        stamped = AlertMessage(
            channel=alert.channel,
            kind=alert.kind,
            body=alert.body,
            house_id=alert.house_id,
            created_at=alert.created_at or now,
            delivered_at=now if (not self.sinks or any(r.ok for r in records)) else None,
        )
        with self._lock:
            self._alerts.append(stamped)
            del self._alerts[:-MAX_KEPT_ALERTS]
            self._deliveries.extend(records)
            del self._deliveries[:-MAX_KEPT_ALERTS]
        return records

    def broadcast(self, alert: AlertMessage, houses: list[str]) -> list[DeliveryRecord]:
        """One delivery per house for operation-wide nudges."""
        records = []
        for house in houses:
            per_house = AlertMessage(
                channel=alert.channel,
                kind=alert.kind,
                body=alert.body,
                house_id=house,
                created_at=alert.created_at,
            )
            records.extend(self.dispatch(per_house))
        return records

    def alerts_for(self, house_id: Optional[str] = None) -> list[AlertMessage]:
        with self._lock:
            if house_id is None:
                return list(self._alerts)
            return [a for a in self._alerts if a.house_id in (house_id, None)]

    def deliveries(self) -> list[DeliveryRecord]:
        with self._lock:
            return list(self._deliveries)
