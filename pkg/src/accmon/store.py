"""Append-only time-series store for telemetry.

On-disk layout (docs/storage.md): one newline-delimited JSON segment per
house per UTC day, `<root>/<house>/<YYYYMMDD>.ndjson`, each line the
telemetry wire object. Appends are flushed and fsynced before returning
(configurable), so a crash loses at most the line being written; reopen
tolerates a torn final line and recovers the longest valid prefix.

The in-memory index (all points per house) is rebuilt on open; at desk
scale (a handful of houses, one point per 30 s) that is a few MB per
simulated month. A real deployment would swap a TSDB behind these same
operations.
"""

from __future__ import annotations

import bisect
import io
import json
import logging
import os
import threading
from pathlib import Path
from typing import Optional

from .analytics import Bucket, bucket_deltas
from .telemetry import SchemaError, TelemetryPoint, decode_telemetry, encode_telemetry

log = logging.getLogger(__name__)

CSV_HEADER = "house,ts,seq,east_wh,eait_wh,sinsts_va,sinsti_va,tariff"


class StoreError(Exception):
    pass


class OutOfOrder(StoreError):
    """Point is older than the last accepted point for the house."""


class MonotonicityViolation(StoreError):
    """An energy register decreased: meter swap or reset, never repaired
    silently; the caller raises a supervision event."""


class UnknownHouse(StoreError):
    pass


class CsvSchemaError(StoreError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _day_name(ts: int) -> str:
    import datetime as dt

    return dt.datetime.fromtimestamp(ts, dt.timezone.utc).strftime("%Y%m%d")


class Store:
    def __init__(self, root: str | os.PathLike, sync: bool = True):
        self.root = Path(root)
        self.sync = sync
        self._lock = threading.RLock()
        self._points: dict[str, list[TelemetryPoint]] = {}
        self._ts: dict[str, list[int]] = {}
        self._files: dict[tuple[str, str], io.BufferedWriter] = {}
        self.recovered_lines = 0  # torn/invalid lines dropped on open
        self.root.mkdir(parents=True, exist_ok=True)
        self._load()

    # -- lifecycle ---------------------------------------------------------

    def _load(self) -> None:
        for house_dir in sorted(p for p in self.root.iterdir() if p.is_dir()):
            for segment in sorted(house_dir.glob("*.ndjson")):
                self._load_segment(segment)

    def _load_segment(self, path: Path) -> None:
        data = path.read_bytes()
        pos = 0
        valid_end = 0
        while pos < len(data):
            nl = data.find(b"\n", pos)
            if nl < 0:
                break  # torn final line: drop it
            line = data[pos:nl]
            pos = nl + 1
            try:
                point = decode_telemetry(line)
            except SchemaError:
                self.recovered_lines += 1
                log.warning("%s: dropping undecodable line, keeping prefix", path)
                break
            try:
                self._index(point)
            except StoreError:
                self.recovered_lines += 1
                continue
            valid_end = pos
        if valid_end != len(data):
            self.recovered_lines += 1
            with open(path, "r+b") as f:
                f.truncate(valid_end)

    def close(self) -> None:
        with self._lock:
            for f in self._files.values():
                try:
                    f.close()
                except OSError:
                    pass
            self._files.clear()

    def __enter__(self) -> "Store":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- writes --------------------------------------------------------------

    def _index(self, point: TelemetryPoint) -> None:
        """Apply ordering/monotonicity rules and insert in memory."""
        points = self._points.setdefault(point.house_id, [])
        ts = self._ts.setdefault(point.house_id, [])
        if points:
            last = points[-1]
            if point.ts < last.ts:
                raise OutOfOrder(f"{point.house_id}: {point.ts} < {last.ts}")
            if point.east_wh < last.east_wh or point.eait_wh < last.eait_wh:
                raise MonotonicityViolation(
                    f"{point.house_id}: energy register decreased at t={point.ts}"
                )
            if point.ts == last.ts:  # last write wins
                points[-1] = point
                return
        points.append(point)
        ts.append(point.ts)

    def append(self, point: TelemetryPoint) -> None:
        """Validate, index and durably persist one point."""
        with self._lock:
            self._index(point)
            f = self._segment_file(point.house_id, point.ts)
            f.write(encode_telemetry(point) + b"\n")
            f.flush()
            if self.sync:
                os.fsync(f.fileno())

    def _segment_file(self, house_id: str, ts: int) -> io.BufferedWriter:
        key = (house_id, _day_name(ts))
        f = self._files.get(key)
        if f is None or f.closed:
            path = self.root / house_id / f"{key[1]}.ndjson"
            path.parent.mkdir(parents=True, exist_ok=True)
            f = open(path, "ab")
            self._files[key] = f
        return f

    # -- reads ---------------------------------------------------------------

    def houses(self) -> list[str]:
        with self._lock:
            return sorted(self._points)

    def _require(self, house_id: str) -> list[TelemetryPoint]:
        points = self._points.get(house_id)
        if points is None:
            raise UnknownHouse(house_id)
        return points

    def query(self, house_id: str, t0: int, t1: int) -> list[TelemetryPoint]:
        """Stored points with t0 <= ts < t1, in order."""
        with self._lock:
            points = self._require(house_id)
            if t0 >= t1:
                return []
            ts = self._ts[house_id]
            lo = bisect.bisect_left(ts, t0)
            hi = bisect.bisect_left(ts, t1)
            return points[lo:hi]

    def last_point(self, house_id: str) -> Optional[TelemetryPoint]:
        with self._lock:
            points = self._points.get(house_id)
            return points[-1] if points else None

    def point_count(self, house_id: Optional[str] = None) -> int:
        with self._lock:
            if house_id is not None:
                return len(self._require(house_id))
            return sum(len(p) for p in self._points.values())

    def downsample(self, house_id: str, t0: int, t1: int, bucket_s: int = 1800) -> list[Bucket]:
        """Register-delta buckets over [t0, t1); see analytics.bucket_deltas."""
        with self._lock:
            return bucket_deltas(self._require(house_id), t0, t1, bucket_s)

    # -- CSV export / import (the open-dataset path) ---------------------------

    def export_csv(
        self, house_id: Optional[str] = None, t0: Optional[int] = None, t1: Optional[int] = None
    ) -> bytes:
        """CSV (UTF-8, LF) of one house or the whole operation.

        All-houses export interleaves rows sorted by (ts, house) so the
        output is deterministic regardless of ingest interleaving.
        """
        with self._lock:
            if house_id is not None:
                rows = list(self._require(house_id))
            else:
                rows = [p for pts in self._points.values() for p in pts]
                rows.sort(key=lambda p: (p.ts, p.house_id))
        if t0 is not None:
            rows = [p for p in rows if p.ts >= t0]
        if t1 is not None:
            rows = [p for p in rows if p.ts < t1]
        out = [CSV_HEADER]
        for p in rows:
            out.append(
                f"{p.house_id},{p.ts},{p.seq},{p.east_wh},{p.eait_wh},"
                f"{p.sinsts_va},{p.sinsti_va},{p.tariff}"
            )
        return ("\n".join(out) + "\n").encode("utf-8")

    def import_csv(self, data: bytes) -> int:
        """Append the rows of an exported CSV; returns the count."""
        count = 0
        for point, _ in iter_csv(data):
            self.append(point)
            count += 1
        return count


def iter_csv(data: bytes):
    """Parse an exported CSV; yields (TelemetryPoint, line_number)."""
    text = data.decode("utf-8")
    lines = text.split("\n")
    if not lines or lines[0].strip() != CSV_HEADER:
        raise CsvSchemaError(f"bad header, expected {CSV_HEADER!r}", 1)
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 8:
            raise CsvSchemaError(f"expected 8 columns, got {len(parts)}", i)
        try:
            obj = {
                "house": parts[0],
                "ts": int(parts[1]),
                "seq": int(parts[2]),
                "east_wh": int(parts[3]),
                "eait_wh": int(parts[4]),
                "sinsts_va": int(parts[5]),
                "sinsti_va": int(parts[6]),
                "tariff": parts[7],
            }
        except ValueError as exc:
            raise CsvSchemaError(str(exc), i) from exc
        try:
            point = decode_telemetry(json.dumps(obj).encode())
        except SchemaError as exc:
            raise CsvSchemaError(str(exc), i) from exc
        yield point, i


def load_csv_points(data: bytes) -> dict[str, list[TelemetryPoint]]:
    """CSV rows grouped per house, in file order (offline analytics path)."""
    per_house: dict[str, list[TelemetryPoint]] = {}
    for point, _ in iter_csv(data):
        per_house.setdefault(point.house_id, []).append(point)
    return per_house
