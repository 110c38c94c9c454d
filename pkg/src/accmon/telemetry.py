"""Telemetry payload schema shared by gateways, store and service.

Wire format (JSON, UTF-8), documented bit-exact in docs/payloads.md:

    {"house": "h1", "ts": 1736121630, "seq": 42, "east_wh": 12345,
     "eait_wh": 0, "sinsts_va": 750, "sinsti_va": 0, "tariff": "BASE"}

Unknown fields are ignored on decode (forward compatibility); missing
required fields raise SchemaError. The meter serial is not carried on
the wire: the house id is the operation-level identity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .tic import MeterReading


class SchemaError(Exception):
    pass


_REQUIRED = ("house", "ts", "seq", "east_wh", "eait_wh", "sinsts_va", "sinsti_va", "tariff")
_INT_FIELDS = ("ts", "seq", "east_wh", "eait_wh", "sinsts_va", "sinsti_va")


@dataclass(frozen=True)
class TelemetryPoint:
    """One gateway sample: timestamp, sequence number and meter reading."""

    house_id: str
    ts: int
    seq: int
    reading: MeterReading

    # flat register accessors (the store and analytics work on these)
    @property
    def east_wh(self) -> int:
        return self.reading.energy_consumed_wh

    @property
    def eait_wh(self) -> int:
        return self.reading.energy_injected_wh

    @property
    def sinsts_va(self) -> int:
        return self.reading.apparent_power_va

    @property
    def sinsti_va(self) -> int:
        return self.reading.injected_apparent_power_va

    @property
    def tariff(self) -> str:
        return self.reading.tariff_label

    def to_dict(self) -> dict:
        return {
            "house": self.house_id,
            "ts": self.ts,
            "seq": self.seq,
            "east_wh": self.east_wh,
            "eait_wh": self.eait_wh,
            "sinsts_va": self.sinsts_va,
            "sinsti_va": self.sinsti_va,
            "tariff": self.tariff,
        }


def encode_telemetry(point: TelemetryPoint) -> bytes:
    return json.dumps(point.to_dict(), separators=(",", ":")).encode("utf-8")


def decode_telemetry(payload: bytes) -> TelemetryPoint:
    try:
        obj = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaError(f"payload is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise SchemaError("payload must be a JSON object")
    missing = [k for k in _REQUIRED if k not in obj]
    if missing:
        raise SchemaError(f"missing fields: {', '.join(missing)}")
    for k in _INT_FIELDS:
        if not isinstance(obj[k], int) or isinstance(obj[k], bool):
            raise SchemaError(f"field {k!r} must be an integer")
        if k != "ts" and obj[k] < 0:
            raise SchemaError(f"field {k!r} must be non-negative")
    if not isinstance(obj["house"], str) or not obj["house"]:
        raise SchemaError("field 'house' must be a non-empty string")
    if not isinstance(obj["tariff"], str):
        raise SchemaError("field 'tariff' must be a string")
    reading = MeterReading(
        meter_id=obj["house"],
        apparent_power_va=obj["sinsts_va"],
        injected_apparent_power_va=obj["sinsti_va"],
        energy_consumed_wh=obj["east_wh"],
        energy_injected_wh=obj["eait_wh"],
        tariff_label=obj["tariff"],
    )
    return TelemetryPoint(house_id=obj["house"], ts=obj["ts"], seq=obj["seq"], reading=reading)
