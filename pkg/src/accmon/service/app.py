"""Operation backend: ingest, supervision loop, analytics glue, alerts.

Ingest, supervision ticks and API serving run in separate threads; the
store mediates shared data under its own lock, the status table under
the supervision lock. A slow API client can never block ingest.
"""

from __future__ import annotations

import datetime as dt
import json
import logging
import queue
import threading
from dataclasses import dataclass, field
from typing import Optional
from zoneinfo import ZoneInfo

from ..analytics import (
    RateReport,
    RateScale,
    TariffSchedule,
    bucket_deltas,
    cost,
    instantaneous_rates,
    predict_day_consumption,
    rates_from_buckets,
)
from ..clock import Clock
from ..gateway import ControlCommand
from ..mqtt import MqttClient, MqttError
from ..store import Store, StoreError
from ..telemetry import SchemaError, decode_telemetry
from .alerts import (
    AlertChannel,
    AlertDispatcher,
    AlertKind,
    AlertMessage,
    FileSink,
    WebhookSink,
)
from .supervision import GatewayState, Supervision

log = logging.getLogger(__name__)


@dataclass
class HouseEntry:
    house_id: str
    role: str = "consumer"
    token: Optional[str] = None
    tariff: TariffSchedule = field(default_factory=lambda: TariffSchedule.base(0.2276))


@dataclass
class ServiceConfig:
    houses: list[HouseEntry]
    broker_host: str = "127.0.0.1"
    broker_port: int = 1883
    listen_host: str = "127.0.0.1"
    listen_port: int = 8080
    refresh_period_s: int = 30
    stale_factor: float = 2.0
    down_factor: float = 6.0
    timezone: str = "Europe/Paris"
    admin_token: Optional[str] = None
    alert_file: Optional[str] = None
    alert_webhooks: list[str] = field(default_factory=list)
    static_dir: Optional[str] = None
    store_sync: bool = True

    def entry(self, house_id: str) -> Optional[HouseEntry]:
        for h in self.houses:
            if h.house_id == house_id:
                return h
        return None

    @classmethod
    def from_json(cls, text: str) -> "ServiceConfig":
        obj = json.loads(text)
        houses = []
        for h in obj.get("houses", []):
            tariff_obj = h.get("tariff", {"kind": "base", "price": 0.2276})
            if tariff_obj.get("kind") == "hphc":
                tariff = TariffSchedule.hphc(
                    tariff_obj["price_hp"],
                    tariff_obj["price_hc"],
                    windows=tuple(tariff_obj.get("hc_windows", ("22:00-24:00", "00:00-06:00"))),
                    timezone=obj.get("timezone", "Europe/Paris"),
                )
            else:
                tariff = TariffSchedule.base(tariff_obj.get("price", 0.2276))
            houses.append(
                HouseEntry(
                    house_id=h["house_id"],
                    role=h.get("role", "consumer"),
                    token=h.get("token"),
                    tariff=tariff,
                )
            )
        alerts = obj.get("alerts", {})
        return cls(
            houses=houses,
            broker_host=obj.get("broker", {}).get("host", "127.0.0.1"),
            broker_port=obj.get("broker", {}).get("port", 1883),
            listen_host=obj.get("listen", {}).get("host", "127.0.0.1"),
            listen_port=obj.get("listen", {}).get("port", 8080),
            refresh_period_s=obj.get("refresh_period_s", 30),
            stale_factor=obj.get("stale_factor", 2.0),
            down_factor=obj.get("down_factor", 6.0),
            timezone=obj.get("timezone", "Europe/Paris"),
            admin_token=obj.get("admin_token"),
            alert_file=alerts.get("file"),
            alert_webhooks=list(alerts.get("webhooks", [])),
            static_dir=obj.get("static_dir"),
            store_sync=obj.get("store_sync", True),
        )


class EventHub:
    """Fan-out of live events to /api/events subscribers (SSE)."""

    def __init__(self, max_queue: int = 256):
        self._lock = threading.Lock()
        self._subscribers: list[queue.Queue] = []
        self.max_queue = max_queue

    def subscribe(self) -> "queue.Queue[tuple[str, dict]]":
        q: "queue.Queue[tuple[str, dict]]" = queue.Queue(self.max_queue)
        with self._lock:
            self._subscribers.append(q)
        return q

    def unsubscribe(self, q) -> None:
        with self._lock:
            if q in self._subscribers:
                self._subscribers.remove(q)

    def publish(self, event: str, data: dict) -> None:
        with self._lock:
            subs = list(self._subscribers)
        for q in subs:
            try:
                q.put_nowait((event, data))
            except queue.Full:
                pass  # slow client: it drops events, ingest never blocks


class Service:
    def __init__(self, config: ServiceConfig, store: Store, clock: Optional[Clock] = None):
        self.config = config
        self.store = store
        self.clock = clock or Clock()
        self.events = EventHub()
        sinks = []
        if config.alert_file:
            sinks.append(FileSink(config.alert_file))
        for url in config.alert_webhooks:
            sinks.append(WebhookSink(url))
        self.alerts = AlertDispatcher(sinks, now_fn=self.clock.now)
        self.supervision = Supervision(
            [h.house_id for h in config.houses],
            refresh_period_s=config.refresh_period_s,
            stale_factor=config.stale_factor,
            down_factor=config.down_factor,
            started_at=int(self.clock.now()),
            on_transition=self._on_transition,
        )
        self.ingested = 0
        self.ingest_errors = 0
        self.store_rejects = 0
        self._client: Optional[MqttClient] = None
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self.started_at = int(self.clock.now())

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> "Service":
        self.started_at = int(self.clock.now())
        self.supervision.started_at = self.started_at
        for target, name in (
            (self._ingest_loop, "svc-ingest"),
            (self._supervision_loop, "svc-supervision"),
        ):
            t = threading.Thread(target=target, name=name, daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._client is not None:
            self._client.close()
        for t in self._threads:
            t.join(timeout=3)

    # -- ingest ----------------------------------------------------------------

    def _ingest_loop(self) -> None:
        while not self._stop.is_set():
            client = MqttClient(
                self.config.broker_host,
                self.config.broker_port,
                client_id="accmon-service",
                keep_alive_s=0,
                on_message=self._on_telemetry,
            )
            try:
                client.connect(timeout=2.0)
                client.subscribe("acc/+/telemetry", "acc/ops/status")
            except (MqttError, OSError) as exc:
                log.info("ingest: broker not reachable (%s), retrying", exc)
                client.close()
                if self._stop.wait(0.5):
                    return
                continue
            self._client = client
            while client.connected and not self._stop.is_set():
                self._stop.wait(0.2)
            client.close()

    def _on_telemetry(self, topic: str, payload: bytes) -> None:
        if topic == "acc/ops/status":
            try:
                self.events.publish("ops_status", json.loads(payload))
            except json.JSONDecodeError:
                self.ingest_errors += 1
            return
        try:
            point = decode_telemetry(payload)
        except SchemaError as exc:
            self.ingest_errors += 1
            log.warning("ingest: dropping malformed payload: %s", exc)
            return
        try:
            self.store.append(point)
        except StoreError as exc:
            self.store_rejects += 1
            log.warning("ingest: store rejected point: %s", exc)
            self.events.publish(
                "store_reject", {"house": point.house_id, "ts": point.ts, "reason": str(exc)}
            )
            return
        self.ingested += 1
        self.supervision.record_seen(point.house_id, point.ts, point.seq)
        self.events.publish("telemetry", point.to_dict())

    # -- supervision --------------------------------------------------------------

    def _supervision_loop(self) -> None:
        period = max(self.config.refresh_period_s / 2.0, 1.0)
        while not self._stop.is_set():
            self.clock.sleep(period)
            if self._stop.is_set():
                return
            self.supervision.tick(self.clock.now())

    def _on_transition(self, house: str, old: GatewayState, new: GatewayState) -> None:
        self.events.publish(
            "status", {"house": house, "from": old.value, "to": new.value,
                       "ts": int(self.clock.now())}
        )
        if new in (GatewayState.STALE, GatewayState.DOWN):
            self.alerts.dispatch(
                AlertMessage(
                    channel=AlertChannel.NOTIFICATION,
                    kind=AlertKind.SYSTEM_FAULT,
                    body=f"gateway {house} went {new.value} (was {old.value})",
                    house_id=house,
                    created_at=int(self.clock.now()),
                )
            )

    # -- control -------------------------------------------------------------------

    def send_control(self, house_id: str, cmd: ControlCommand) -> None:
        """Publish a control command; fire-and-forget at QoS 0."""
        client = self._client
        if client is None or not client.connected:
            raise MqttError("service is not connected to the broker")
        client.publish(f"acc/{house_id}/control", cmd.to_json())

    # -- time helpers -----------------------------------------------------------

    def _tz(self) -> ZoneInfo:
        return ZoneInfo(self.config.timezone)

    def local_midnight(self, now: int) -> int:
        local = dt.datetime.fromtimestamp(now, self._tz())
        midnight = local.replace(hour=0, minute=0, second=0, microsecond=0)
        return int(midnight.timestamp())

    def local_month_start(self, now: int) -> int:
        local = dt.datetime.fromtimestamp(now, self._tz())
        first = local.replace(day=1, hour=0, minute=0, second=0, microsecond=0)
        return int(first.timestamp())

    # -- read models (everything the API serves) ----------------------------------

    def _register_delta(self, house_id: str, t0: int, t1: int) -> tuple[int, int]:
        """(consumed, injected) register delta over [t0, t1]."""
        points = self.store.query(house_id, t0, t1 + 1)
        if len(points) < 2:
            return (0, 0)
        return (
            points[-1].east_wh - points[0].east_wh,
            points[-1].eait_wh - points[0].eait_wh,
        )

    def live_view(self, house_id: str) -> dict:
        entry = self.config.entry(house_id)
        if entry is None:
            raise KeyError(house_id)
        now = int(self.clock.now())
        last = self.store.last_point(house_id) if house_id in self.store.houses() else None
        fresh = self.supervision.is_fresh(house_id, now)
        view: dict = {
            "house": house_id,
            "now": now,
            "stale": not fresh,
            "contract": entry.tariff.contract_label,
            "reading": None,
            "active_power_w": None,
            "today": None,
            "month": None,
            "prediction_wh": None,
            "tariff_label": None,
            "price_eur_per_kwh": None,
        }
        if last is None:
            return view
        view["reading"] = last.to_dict()
        view["tariff_label"] = last.tariff
        view["price_eur_per_kwh"] = entry.tariff.price_millicents_per_kwh(last.ts) / 100_000
        recent = self.store.query(house_id, last.ts - 4 * self.config.refresh_period_s, last.ts + 1)
        if len(recent) >= 2:
            a, b = recent[-2], recent[-1]
            dt_s = b.ts - a.ts
            view["active_power_w"] = {
                "draw": (b.east_wh - a.east_wh) * 3600.0 / dt_s,
                "inject": (b.eait_wh - a.eait_wh) * 3600.0 / dt_s,
            }
        day0 = self.local_midnight(now)
        month0 = self.local_month_start(now)
        day_c, day_i = self._register_delta(house_id, day0, now)
        mon_c, mon_i = self._register_delta(house_id, month0, now)
        day_buckets = self.store.downsample(house_id, day0, max(now, day0 + 1), 1800)
        month_buckets = self.store.downsample(house_id, month0, max(now, month0 + 1), 1800)
        view["today"] = {
            "consumed_wh": day_c,
            "injected_wh": day_i,
            "cost_eur": round(cost(day_buckets, entry.tariff), 4),
        }
        view["month"] = {
            "consumed_wh": mon_c,
            "injected_wh": mon_i,
            "cost_eur": round(cost(month_buckets, entry.tariff), 4),
        }
        view["prediction_wh"] = self._predict(house_id, now, day0, day_c)
        return view

    def _predict(self, house_id: str, now: int, day0: int, today_so_far: int,
                 past_days: int = 7) -> Optional[float]:
        history = []
        for d in range(1, past_days + 1):
            start = day0 - d * 86400
            if start < self.started_at - 86400 and not self.store.query(
                house_id, start, start + 86400
            ):
                continue
            buckets = self.store.downsample(house_id, start, start + 86400, 600)
            if any(b.sample_count for b in buckets):
                history.append([b.consumed_wh for b in buckets])
        if not history:
            return None
        now_tod = now - day0
        return round(
            predict_day_consumption(history, today_so_far, min(now_tod, 86400)), 1
        )

    def history_view(self, house_id: str, t0: int, t1: int, bucket_s: int) -> dict:
        if self.config.entry(house_id) is None:
            raise KeyError(house_id)
        if house_id in self.store.houses():
            buckets = self.store.downsample(house_id, t0, t1, bucket_s)
        else:
            buckets = bucket_deltas([], t0, t1, bucket_s)
        return {
            "house": house_id,
            "from": t0,
            "to": t1,
            "bucket_s": bucket_s,
            "buckets": [
                {
                    "start": b.start,
                    "consumed_wh": b.consumed_wh,
                    "injected_wh": b.injected_wh,
                    "mean_apparent_va": round(b.mean_apparent_va, 1),
                    "samples": b.sample_count,
                }
                for b in buckets
            ],
        }

    def _instant_power(self, house_id: str, now: int) -> Optional[tuple[float, float]]:
        """Latest (draw_w, inject_w) if fresh, from the last index delta."""
        if not self.supervision.is_fresh(house_id, now):
            return None
        pts = self.store.query(
            house_id, int(now - 4 * self.config.refresh_period_s), int(now) + 1
        )
        if len(pts) < 2:
            return None
        a, b = pts[-2], pts[-1]
        dt_s = b.ts - a.ts
        return (
            (b.east_wh - a.east_wh) * 3600.0 / dt_s,
            (b.eait_wh - a.eait_wh) * 3600.0 / dt_s,
        )

    def rates_view(self, scale: RateScale, t0: Optional[int] = None,
                   t1: Optional[int] = None) -> dict:
        now = int(self.clock.now())
        houses = [h.house_id for h in self.config.houses]
        if scale is RateScale.INSTANT:
            draw = inject = 0.0
            used = 0
            excluded = []
            for h in houses:
                p = self._instant_power(h, now)
                if p is None:
                    excluded.append(h)
                    continue
                draw += p[0]
                inject += p[1]
                used += 1
            if used == 0:
                sc = ss = None
            else:
                sc, ss = instantaneous_rates(draw, inject)
            report = RateReport(
                scale=scale, window=(now, now), self_consumption=sc,
                self_sufficiency=ss, samples_used=used,
            )
            out = report.to_dict()
            out["excluded_houses"] = excluded
            return out
        if scale is RateScale.THIRTY_MIN:
            end = now - now % 1800
            t0, t1 = end - 1800, end
        else:
            t0 = t0 if t0 is not None else self.started_at
            t1 = t1 if t1 is not None else now
        report = self.operation_rates(t0, t1, scale)
        return report.to_dict()

    def operation_rates(self, t0: int, t1: int, scale: RateScale = RateScale.PERIOD,
                        bucket_s: int = 1800) -> RateReport:
        """Period rates on the 30-min resampled operation aggregate.

        The identical function runs offline on an exported CSV (the CLI
        rates path), so API responses are bit-consistent with offline
        analytics over the same data.
        """
        per_house = {}
        for h in [e.house_id for e in self.config.houses]:
            points = self.store.query(h, t0, t1 + 1) if h in self.store.houses() else []
            per_house[h] = bucket_deltas(points, t0, t1, bucket_s)
        return rates_from_buckets(per_house, scale, (t0, t1))

    def summary_view(self) -> dict:
        now = int(self.clock.now())
        houses = [h.house_id for h in self.config.houses]
        draw = inject = 0.0
        live_houses = 0
        for h in houses:
            p = self._instant_power(h, now)
            if p is not None:
                draw += p[0]
                inject += p[1]
                live_houses += 1
        day0 = self.local_midnight(now)
        month0 = self.local_month_start(now)
        horizons = {}
        for name, start in (("daily", day0), ("monthly", month0), ("since_start", self.started_at)):
            consumed = injected = 0
            for h in houses:
                if h not in self.store.houses():
                    continue
                c, i = self._register_delta(h, start, now)
                consumed += c
                injected += i
            horizons[name] = {"consumed_wh": consumed, "injected_wh": injected}
        return {
            "now": now,
            "live": {
                "drawn_w": round(draw, 1),
                "reinjected_w": round(inject, 1),
                "balance_w": round(draw - inject, 1),
                "houses_reporting": live_houses,
            },
            "horizons": horizons,
        }

    def status_view(self) -> list[dict]:
        return [s.to_dict() for s in self.supervision.tick(self.clock.now())]
