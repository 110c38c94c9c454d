"""HTTP + JSON API for the two dashboards and operations tooling.

Pull-based: clients poll every refresh period (the dashboard default is
30 s); /api/events offers the same payloads as a server-push stream for
clients that prefer it. Exact schemas in docs/api.md.

Auth is a static bearer token per house on individual endpoints and
control, plus an admin token on alert injection; it mirrors the
operation's login-details onboarding step at desk scale and is
explicitly not a security design.
"""

from __future__ import annotations

import json
import logging
import mimetypes
import queue
import re
import threading
import urllib.parse
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional

from ..analytics import AnalyticsError, RateScale
from ..gateway import ControlCommand, ControlError
from ..mqtt import MqttError
from .alerts import AlertChannel, AlertKind, AlertMessage
from .app import Service
from .supervision import GatewayState

log = logging.getLogger(__name__)

_SCALES = {
    "instant": RateScale.INSTANT,
    "30min": RateScale.THIRTY_MIN,
    "period": RateScale.PERIOD,
}


class HttpError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


class ApiServer:
    def __init__(self, service: Service, host: Optional[str] = None, port: Optional[int] = None):
        self.service = service
        self.host = host if host is not None else service.config.listen_host
        self.port = port if port is not None else service.config.listen_port
        self._httpd: Optional[ThreadingHTTPServer] = None
        self._thread: Optional[threading.Thread] = None

    def start(self) -> "ApiServer":
        api = self

        class Handler(_Handler):
            server_api = api

        self._httpd = ThreadingHTTPServer((self.host, self.port), Handler)
        self._httpd.daemon_threads = True
        self.port = self._httpd.server_address[1]
        self._thread = threading.Thread(
            target=self._httpd.serve_forever, name="api-server", daemon=True
        )
        self._thread.start()
        log.info("api listening on http://%s:%d", self.host, self.port)
        return self

    def stop(self) -> None:
        if self._httpd is not None:
            self._httpd.shutdown()
            self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=3)

    @property
    def base_url(self) -> str:
        return f"http://{self.host}:{self.port}"


class _Handler(BaseHTTPRequestHandler):
    server_api: ApiServer  # injected by ApiServer.start
    protocol_version = "HTTP/1.1"

    # -- plumbing ----------------------------------------------------------

    def log_message(self, fmt, *args):  # route through logging, not stderr
        log.debug("%s %s", self.address_string(), fmt % args)

    @property
    def svc(self) -> Service:
        return self.server_api.service

    def _send_json(self, obj, status: int = 200) -> None:
        body = json.dumps(obj).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)

    def _error(self, status: int, message: str) -> None:
        self._send_json({"error": message}, status=status)

    def _query(self) -> dict[str, str]:
        parsed = urllib.parse.urlparse(self.path)
        return {k: v[-1] for k, v in urllib.parse.parse_qs(parsed.query).items()}

    def _route(self) -> str:
        return urllib.parse.urlparse(self.path).path

    def _token(self) -> Optional[str]:
        auth = self.headers.get("Authorization", "")
        if auth.startswith("Bearer "):
            return auth[len("Bearer "):].strip()
        return self._query().get("token")

    def _check_house_token(self, house_id: str) -> None:
        entry = self.svc.config.entry(house_id)
        if entry is None:
            raise HttpError(404, f"unknown house {house_id!r}")
        if entry.token and self._token() not in (entry.token, self.svc.config.admin_token):
            raise HttpError(401, "missing or wrong house token")

    def _check_admin(self) -> None:
        admin = self.svc.config.admin_token
        if admin and self._token() != admin:
            raise HttpError(401, "admin token required")

    def _read_body(self) -> bytes:
        length = int(self.headers.get("Content-Length") or 0)
        return self.rfile.read(length) if length else b""

    def _int_param(self, q: dict, key: str, default: Optional[int] = None) -> Optional[int]:
        if key not in q:
            return default
        try:
            return int(q[key])
        except ValueError:
            raise HttpError(422, f"parameter {key!r} must be an integer")

    # -- dispatch ------------------------------------------------------------

    def do_GET(self):
        try:
            self._dispatch_get()
        except HttpError as exc:
            self._error(exc.status, exc.message)
        except (BrokenPipeError, ConnectionResetError):
            pass
        except Exception:
            log.exception("GET %s failed", self.path)
            self._error(500, "internal error")

    def do_POST(self):
        try:
            self._dispatch_post()
        except HttpError as exc:
            self._error(exc.status, exc.message)
        except (BrokenPipeError, ConnectionResetError):
            pass
        except Exception:
            log.exception("POST %s failed", self.path)
            self._error(500, "internal error")

    def _dispatch_get(self):
        path = self._route()
        q = self._query()
        m = re.fullmatch(r"/api/house/([^/]+)/live", path)
        if m:
            self._check_house_token(m.group(1))
            try:
                return self._send_json(self.svc.live_view(m.group(1)))
            except KeyError:
                raise HttpError(404, f"unknown house {m.group(1)!r}")
        m = re.fullmatch(r"/api/house/([^/]+)/history", path)
        if m:
            self._check_house_token(m.group(1))
            now = int(self.svc.clock.now())
            t0 = self._int_param(q, "from", self.svc.local_midnight(now))
            t1 = self._int_param(q, "to", now)
            bucket = self._int_param(q, "bucket", 1800)
            if t0 >= t1:
                raise HttpError(422, "need from < to")
            try:
                return self._send_json(self.svc.history_view(m.group(1), t0, t1, bucket))
            except AnalyticsError as exc:
                raise HttpError(422, str(exc))
            except KeyError:
                raise HttpError(404, f"unknown house {m.group(1)!r}")
        if path == "/api/operation/summary":
            return self._send_json(self.svc.summary_view())
        if path == "/api/operation/rates":
            scale_name = q.get("scale", "instant")
            scale = _SCALES.get(scale_name)
            if scale is None:
                raise HttpError(422, f"scale must be one of {sorted(_SCALES)}")
            t0 = self._int_param(q, "from")
            t1 = self._int_param(q, "to")
            try:
                return self._send_json(self.svc.rates_view(scale, t0, t1))
            except AnalyticsError as exc:
                raise HttpError(422, str(exc))
        if path == "/api/operation/status":
            return self._send_json(self.svc.status_view())
        if path == "/api/alerts":
            house = q.get("house")
            if house is not None:
                self._check_house_token(house)
            else:
                self._check_admin()
            alerts = self.svc.alerts.alerts_for(house)
            return self._send_json([a.to_dict() for a in alerts])
        if path == "/api/health":
            return self._send_json(
                {
                    "ok": True,
                    "ingested": self.svc.ingested,
                    "ingest_errors": self.svc.ingest_errors,
                    "store_rejects": self.svc.store_rejects,
                }
            )
        if path == "/api/events":
            return self._serve_events()
        return self._serve_static(path)

    def _dispatch_post(self):
        path = self._route()
        m = re.fullmatch(r"/api/house/([^/]+)/control", path)
        if m:
            house_id = m.group(1)
            self._check_house_token(house_id)
            try:
                cmd = ControlCommand.from_json(self._read_body())
            except ControlError as exc:
                raise HttpError(422, str(exc))
            if self.svc.supervision.state_of(house_id) is GatewayState.DOWN:
                raise HttpError(409, f"gateway {house_id} is down, refusing control")
            try:
                self.svc.send_control(house_id, cmd)
            except MqttError as exc:
                raise HttpError(503, f"bus unavailable: {exc}")
            return self._send_json({"status": "sent", "house": house_id})
        if path == "/api/alerts":
            self._check_admin()
            try:
                obj = json.loads(self._read_body())
                alert = AlertMessage(
                    channel=AlertChannel(obj.get("channel", "notification")),
                    kind=AlertKind(obj["kind"]),
                    body=obj["body"],
                    house_id=obj.get("house"),
                    created_at=int(self.svc.clock.now()),
                )
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise HttpError(422, f"bad alert body: {exc}")
            if alert.house_id is None:
                records = self.svc.alerts.broadcast(
                    alert, [h.house_id for h in self.svc.config.houses]
                )
            else:
                if self.svc.config.entry(alert.house_id) is None:
                    raise HttpError(404, f"unknown house {alert.house_id!r}")
                records = self.svc.alerts.dispatch(alert)
            self.svc.events.publish("alert", alert.to_dict())
            return self._send_json(
                {"dispatched": len(records), "failed": sum(1 for r in records if not r.ok)}
            )
        raise HttpError(404, "no such endpoint")

    # -- server-sent events --------------------------------------------------

    def _serve_events(self):
        sub = self.svc.events.subscribe()
        try:
            self.send_response(200)
            self.send_header("Content-Type", "text/event-stream")
            self.send_header("Cache-Control", "no-cache")
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(b": stream open\n\n")
            self.wfile.flush()
            while True:
                try:
                    event, data = sub.get(timeout=5.0)
                except queue.Empty:
                    self.wfile.write(b": keepalive\n\n")  # detects dead clients
                    self.wfile.flush()
                    continue
                payload = json.dumps(data)
                self.wfile.write(f"event: {event}\ndata: {payload}\n\n".encode())
                self.wfile.flush()
        except (BrokenPipeError, ConnectionResetError, OSError):
            pass
        finally:
            self.svc.events.unsubscribe(sub)

    # -- static dashboard files ------------------------------------------------

    def _serve_static(self, path: str):
        root = self.svc.config.static_dir
        if not root:
            raise HttpError(404, "no such endpoint")
        base = Path(root).resolve()
        # SPA routes fall back to the index page
        rel = path.lstrip("/")
        candidate = (base / rel).resolve() if rel else base / "index.html"
        if rel and (base not in candidate.parents and candidate != base):
            raise HttpError(404, "no such path")
        if not rel or not candidate.is_file():
            candidate = base / "index.html"
        if not candidate.is_file():
            raise HttpError(404, "dashboard not built")
        body = candidate.read_bytes()
        ctype = mimetypes.guess_type(str(candidate))[0] or "application/octet-stream"
        self.send_response(200)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)
