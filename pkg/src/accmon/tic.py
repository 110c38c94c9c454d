"""TIC frame codec (Linky "Tele-Information Client" serial output).

Wire format (Enedis TIC, standard and historic modes):

    frame  = STX group+ ETX            STX = 0x02, ETX = 0x03
    group  = LF body CR                LF  = 0x0A, CR  = 0x0D

Historic mode body (separator SP = 0x20):

    LABEL SP VALUE SP CHECKSUM

Standard mode body (separator HT = 0x09, optional timestamp field):

    LABEL HT [TIMESTAMP HT] VALUE HT CHECKSUM

The checksum is a single byte: (sum of span bytes & 0x3F) + 0x20, always
in [0x20, 0x5F]. The span differs between the two modes and is the
classic interoperability trap:

  * historic: LABEL + SP + VALUE        (the SP before the checksum is
    excluded)
  * standard: LABEL + HT + [TIMESTAMP + HT] + VALUE + HT (the HT before
    the checksum is included)

Byte-by-byte documentation lives in docs/tic-format.md. Only the label
subset needed by the monitoring stack is interpreted; unknown labels are
preserved on parse and ignored by extract_reading.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

STX = 0x02
ETX = 0x03
LF = 0x0A
CR = 0x0D
SP = 0x20
HT = 0x09

LABEL_CHARS = frozenset(b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789+-")
MAX_LABEL_LEN = 8
MAX_VALUE_LEN = 98
MAX_NUMERIC_DIGITS = 12

# Interpreted label subsets (everything else is carried but not mapped).
STANDARD_LABELS = ("ADSC", "SINSTS", "SINSTI", "EAST", "EAIT", "LTARF", "NGTF")
HISTORIC_LABELS = ("ADCO", "PAPP", "BASE", "HCHC", "HCHP", "PTEC")


class TicError(Exception):
    """Base class for TIC codec errors."""


class FramingError(TicError):
    """Missing STX/ETX/LF/CR or unparseable group structure."""


class ChecksumError(TicError):
    def __init__(self, label: str, offset: int, expected: int, found: int):
        super().__init__(
            f"checksum mismatch on group {label!r} at offset {offset}: "
            f"expected 0x{expected:02X}, found 0x{found:02X}"
        )
        self.label = label
        self.offset = offset
        self.expected = expected
        self.found = found


class BadLabel(TicError):
    pass


class BadValue(TicError):
    pass


class InvalidGroup(TicError):
    """Raised by the serializer when a group violates the character rules."""


class MissingLabel(TicError):
    pass


class NonNumeric(TicError):
    pass


class TicMode(enum.Enum):
    STANDARD = "standard"
    HISTORIC = "historic"

    @property
    def separator(self) -> int:
        return HT if self is TicMode.STANDARD else SP


@dataclass(frozen=True)
class TicGroup:
    """One labelled data group of a frame.

    checksum may be None before serialization; serialize_frame computes
    it. timestamp is only meaningful in standard mode (13 chars, season
    flag + YYMMDDHHMMSS).
    """

    label: str
    value: str
    timestamp: str | None = None
    checksum: int | None = None


@dataclass(frozen=True)
class TicFrame:
    mode: TicMode
    groups: tuple[TicGroup, ...] = field(default_factory=tuple)

    def get(self, label: str) -> str | None:
        for g in self.groups:
            if g.label == label:
                return g.value
        return None


@dataclass(frozen=True)
class MeterReading:
    """Register snapshot extracted from a checksum-valid frame."""

    meter_id: str
    apparent_power_va: int = 0
    injected_apparent_power_va: int = 0
    energy_consumed_wh: int = 0
    energy_injected_wh: int = 0
    tariff_label: str = ""


def compute_checksum(span: bytes) -> int:
    """TIC checksum rule: (sum of span bytes AND 0x3F) + 0x20."""
    if not span:
        raise ValueError("checksum span must be non-empty")
    return (sum(span) & 0x3F) + 0x20


def _checksum_span(mode: TicMode, body: bytes) -> bytes:
    # body is everything between LF and CR; the checksum is its last byte.
    if mode is TicMode.HISTORIC:
        # exclude the SP before the checksum
        return body[:-2]
    # standard: include the HT before the checksum
    return body[:-1]


def _validate_label(label: str) -> None:
    raw = label.encode("ascii", errors="replace")
    if not 1 <= len(raw) <= MAX_LABEL_LEN or any(b not in LABEL_CHARS for b in raw):
        raise BadLabel(f"invalid label {label!r}")


def _validate_value(value: str, label: str) -> None:
    raw = value.encode("ascii", errors="replace")
    if len(raw) > MAX_VALUE_LEN:
        raise BadValue(f"value too long for {label!r} ({len(raw)} bytes)")
    if any(b < 0x20 for b in raw):
        raise BadValue(f"control byte in value of {label!r}")


def _validate_timestamp(ts: str, label: str) -> None:
    if len(ts) != 13 or ts[0] not in "HhEe " or not ts[1:].isdigit():
        raise BadValue(f"invalid timestamp field in {label!r}")


def _parse_group(body: bytes, mode: TicMode, offset: int) -> TicGroup:
    """Decode one group body (bytes between LF and CR, exclusive)."""
    if len(body) < 3:
        raise FramingError(f"group too short at offset {offset}")
    sep = mode.separator
    checksum = body[-1]
    if body[-2] != (SP if mode is TicMode.HISTORIC else HT):
        raise FramingError(f"missing separator before checksum at offset {offset}")

    if mode is TicMode.HISTORIC:
        # LABEL SP VALUE SP CHECKSUM; value may contain SP, so split from
        # both ends rather than on every separator.
        head = body[:-2]
        sp = head.find(bytes([SP]))
        if sp < 0:
            raise FramingError(f"missing separator at offset {offset}")
        label_b, value_b = head[:sp], head[sp + 1 :]
        timestamp = None
    else:
        parts = body[:-2].split(bytes([sep]))
        if len(parts) == 2:
            label_b, value_b = parts
            timestamp = None
        elif len(parts) == 3:
            label_b, ts_b, value_b = parts
            timestamp = ts_b.decode("ascii", errors="replace")
        else:
            raise FramingError(f"bad field count in group at offset {offset}")

    label = label_b.decode("ascii", errors="replace")
    value = value_b.decode("ascii", errors="replace")
    _validate_label(label)
    if timestamp is not None:
        _validate_timestamp(timestamp, label)
    _validate_value(value, label)

    expected = compute_checksum(_checksum_span(mode, body))
    if checksum != expected:
        raise ChecksumError(label, offset, expected, checksum)
    return TicGroup(label=label, value=value, timestamp=timestamp, checksum=checksum)


def decode_frame(raw: bytes, mode: TicMode) -> tuple[TicFrame, bytes]:
    """Decode the first complete frame of raw.

    Returns (frame, remainder). The parser never reads past ETX; any
    trailing bytes are returned unconsumed. A checksum failure on any
    group fails the whole frame (a meter frame is an atomic snapshot).
    """
    if not raw or raw[0] != STX:
        raise FramingError("frame does not start with STX")
    end = raw.find(bytes([ETX]), 1)
    if end < 0:
        raise FramingError("no ETX terminator")
    inner = raw[1:end]
    remainder = raw[end + 1 :]

    groups: list[TicGroup] = []
    pos = 0
    while pos < len(inner):
        if inner[pos] != LF:
            raise FramingError(f"expected LF at offset {pos + 1}")
        cr = inner.find(bytes([CR]), pos + 1)
        if cr < 0:
            raise FramingError("group not terminated by CR")
        groups.append(_parse_group(inner[pos + 1 : cr], mode, pos + 1))
        pos = cr + 1
    if not groups:
        raise FramingError("frame contains no groups")
    return TicFrame(mode=mode, groups=tuple(groups)), remainder


def parse_frame(raw: bytes, mode: TicMode) -> TicFrame:
    """decode_frame without the remainder (trailing bytes stay unread)."""
    return decode_frame(raw, mode)[0]


def serialize_frame(frame: TicFrame) -> bytes:
    """Encode a frame to wire bytes, computing each group's checksum.

    Checksums already present on groups are ignored and recomputed, so
    parse_frame(serialize_frame(f)) always round-trips.
    """
    if not frame.groups:
        raise InvalidGroup("frame must contain at least one group")
    sep = bytes([frame.mode.separator])
    out = bytearray([STX])
    for g in frame.groups:
        try:
            _validate_label(g.label)
            _validate_value(g.value, g.label)
        except (BadLabel, BadValue) as exc:
            raise InvalidGroup(str(exc)) from exc
        if g.timestamp is not None:
            if frame.mode is not TicMode.STANDARD:
                raise InvalidGroup(f"timestamp not allowed in historic group {g.label!r}")
            _validate_timestamp(g.timestamp, g.label)
        body = bytearray(g.label.encode("ascii"))
        body += sep
        if g.timestamp is not None:
            body += g.timestamp.encode("ascii") + sep
        body += g.value.encode("ascii")
        if frame.mode is TicMode.STANDARD:
            span = bytes(body) + sep
            wire = span + bytes([compute_checksum(span)])
        else:
            span = bytes(body)
            wire = span + sep + bytes([compute_checksum(span)])
        out.append(LF)
        out += wire
        out.append(CR)
    out.append(ETX)
    return bytes(out)


def normalize(frame: TicFrame) -> TicFrame:
    """Frame with all checksum fields filled in (for equality checks)."""
    parsed, _ = decode_frame(serialize_frame(frame), frame.mode)
    return parsed


def _parse_int(value: str, label: str) -> int:
    v = value.strip()
    if not v.isdigit() or len(v) > MAX_NUMERIC_DIGITS:
        raise NonNumeric(f"{label} value {value!r} is not a base-10 integer")
    return int(v, 10)


def extract_reading(frame: TicFrame) -> MeterReading:
    """Map the interpreted label subset of a parsed frame to a MeterReading.

    Standard mode: ADSC, SINSTS, SINSTI, EAST, EAIT, LTARF, NGTF.
    Historic mode: ADCO, PAPP, BASE, HCHC, HCHP, PTEC (consumed index is
    BASE, or HCHC+HCHP for peak/off-peak contracts).
    Absent injection labels default to 0: a pure consumer never injects.
    """
    values = {g.label: g.value for g in frame.groups}
    if frame.mode is TicMode.STANDARD:
        meter_id = values.get("ADSC")
        if meter_id is None:
            raise MissingLabel("ADSC (meter id) absent")
        if "EAST" not in values:
            raise MissingLabel("EAST (consumed energy index) absent")
        consumed = _parse_int(values["EAST"], "EAST")
        injected = _parse_int(values["EAIT"], "EAIT") if "EAIT" in values else 0
        apparent = _parse_int(values["SINSTS"], "SINSTS") if "SINSTS" in values else 0
        inj_va = _parse_int(values["SINSTI"], "SINSTI") if "SINSTI" in values else 0
        tariff = values.get("LTARF") or values.get("NGTF") or ""
    else:
        meter_id = values.get("ADCO")
        if meter_id is None:
            raise MissingLabel("ADCO (meter id) absent")
        if "BASE" in values:
            consumed = _parse_int(values["BASE"], "BASE")
        elif "HCHC" in values and "HCHP" in values:
            consumed = _parse_int(values["HCHC"], "HCHC") + _parse_int(values["HCHP"], "HCHP")
        else:
            raise MissingLabel("consumed energy index absent (BASE or HCHC+HCHP)")
        injected = 0
        apparent = _parse_int(values["PAPP"], "PAPP") if "PAPP" in values else 0
        inj_va = 0
        tariff = values.get("PTEC", "").strip(".")
    return MeterReading(
        meter_id=meter_id.strip(),
        apparent_power_va=apparent,
        injected_apparent_power_va=inj_va,
        energy_consumed_wh=consumed,
        energy_injected_wh=injected,
        tariff_label=tariff,
    )


def strip_checksums(frame: TicFrame) -> TicFrame:
    return replace(frame, groups=tuple(replace(g, checksum=None) for g in frame.groups))
