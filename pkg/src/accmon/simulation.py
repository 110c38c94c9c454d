"""Deterministic simulation of a 9-house collective self-consumption fleet.

Default topology mirrors the field operation this stack was built for:
6 producer houses (one of them with a storage battery) and 3 purely
consumer houses. Load, PV and cloud noise are pure functions of
(seed, t), so identical (config, seed, horizon) runs produce
byte-identical TIC emissions and day reports.

Units: power in W, energy registers in integer Wh with a carried
sub-Wh remainder per register (no energy is lost to rounding),
timestamps in Unix seconds UTC. All magnitudes (kWp, battery size,
load shapes) are invented desk-scale defaults; see docs/sim-config.md.
"""

from __future__ import annotations

import datetime as dt
import enum
import json
import math
import zlib
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

from .tic import TicFrame, TicGroup, TicMode, serialize_frame

DAY_S = 86_400
SLOT_S = 600          # day+1 reports use a 10-minute step
SLOTS_PER_DAY = DAY_S // SLOT_S
POWER_FACTOR = 0.95   # fixed VA <-> W conversion used by the meters

# built-in fleet defaults (documented in docs/sim-config.md)
DEFAULT_PV_PEAK_W = 3000
DEFAULT_LOAD_BASE_W = 300
DEFAULT_LOAD_PEAK_W = 2000
DEFAULT_BATTERY = dict(
    capacity_wh=5000, max_charge_w=2000, max_discharge_w=2000, round_trip_efficiency=0.9
)
DEFAULT_LOAD_NOISE_W = 50

_MASK64 = (1 << 64) - 1


class SimulationError(Exception):
    pass


class IncompleteDay(SimulationError):
    """History does not cover the requested civil day at 10-min cadence."""


class HouseRole(enum.Enum):
    CONSUMER = "consumer"
    PRODUCER = "producer"
    PRODUCER_BATTERY = "producer_battery"


@dataclass(frozen=True)
class BatteryParams:
    capacity_wh: int
    max_charge_w: int
    max_discharge_w: int
    round_trip_efficiency: float = 0.9

    def __post_init__(self):
        if self.capacity_wh <= 0 or self.max_charge_w <= 0 or self.max_discharge_w <= 0:
            raise SimulationError("battery parameters must be positive")
        if not 0 < self.round_trip_efficiency <= 1:
            raise SimulationError("round_trip_efficiency must be in (0, 1]")


@dataclass(frozen=True)
class HouseConfig:
    house_id: str
    role: HouseRole
    pv_peak_w: int = 0
    load_base_w: int = DEFAULT_LOAD_BASE_W
    load_peak_w: int = DEFAULT_LOAD_PEAK_W
    battery: Optional[BatteryParams] = None
    seed: int = 0
    load_noise_w: int = DEFAULT_LOAD_NOISE_W  # 0 disables load noise
    clouds: bool = True
    contract: str = "BASE"  # BASE or HPHC, shown as the meter tariff label

    def __post_init__(self):
        if self.role is HouseRole.CONSUMER:
            if self.pv_peak_w != 0 or self.battery is not None:
                raise SimulationError(f"{self.house_id}: consumers have no PV and no battery")
        if self.role is HouseRole.PRODUCER_BATTERY and self.battery is None:
            raise SimulationError(f"{self.house_id}: battery role requires battery params")
        if self.load_base_w <= 0 or self.load_peak_w < self.load_base_w:
            raise SimulationError(f"{self.house_id}: need 0 < load_base_w <= load_peak_w")

    @property
    def meter_id(self) -> str:
        # stable 12-digit Linky-style serial derived from the house id
        return f"02{zlib.crc32(self.house_id.encode()) % 10**10:010d}"


@dataclass(frozen=True)
class MeterState:
    """Meter registers plus battery state; registers are monotone."""

    meter_id: str
    energy_consumed_wh: int = 0
    energy_injected_wh: int = 0
    soc_wh: int = 0
    last_update: int = 0
    # sub-Wh remainders carried between steps so rounding never loses energy
    consumed_frac: float = 0.0
    injected_frac: float = 0.0
    soc_frac: float = 0.0
    last_grid_w: float = 0.0  # last net grid flow, + = injection, - = draw


@dataclass(frozen=True)
class DayPlusOneReport:
    """Nightly per-meter report: 144 register-delta slots at 10-min step."""

    meter_id: str
    house_id: str
    date: dt.date
    slots: tuple[tuple[int, int], ...]  # (consumed_wh_delta, injected_wh_delta)

    def __post_init__(self):
        if len(self.slots) != SLOTS_PER_DAY:
            raise SimulationError(f"expected {SLOTS_PER_DAY} slots, got {len(self.slots)}")

    @property
    def consumed_wh(self) -> int:
        return sum(s[0] for s in self.slots)

    @property
    def injected_wh(self) -> int:
        return sum(s[1] for s in self.slots)

    def to_json(self) -> str:
        return json.dumps(
            {
                "meter_id": self.meter_id,
                "house": self.house_id,
                "date": self.date.isoformat(),
                "slots": [list(s) for s in self.slots],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "DayPlusOneReport":
        obj = json.loads(text)
        return cls(
            meter_id=obj["meter_id"],
            house_id=obj["house"],
            date=dt.date.fromisoformat(obj["date"]),
            slots=tuple((int(c), int(i)) for c, i in obj["slots"]),
        )


def _mix(*keys: int) -> float:
    """splitmix64-style hash of the keys, mapped to [0, 1)."""
    x = 0x9E3779B97F4A7C15
    for k in keys:
        x = (x + (k & _MASK64)) & _MASK64
        x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
        x ^= x >> 31
    return x / 2**64


def _hour_of_day(t: float) -> float:
    return (t % DAY_S) / 3600.0

# morning and evening demand peaks: (window start h, window end h, center, sigma)
_LOAD_PEAKS = ((6.0, 9.0, 7.5, 0.75), (18.0, 22.0, 20.0, 1.2))


def load_power(house: HouseConfig, t: float) -> float:
    """Household demand in W at time t; deterministic in (seed, t)."""
    h = _hour_of_day(t)
    load = float(house.load_base_w)
    amplitude = house.load_peak_w - house.load_base_w
    for w0, w1, center, sigma in _LOAD_PEAKS:
        if w0 <= h < w1:
            load += amplitude * math.exp(-0.5 * ((h - center) / sigma) ** 2)
    if house.load_noise_w:
        load += (2.0 * _mix(house.seed, int(t), 0xA0) - 1.0) * house.load_noise_w
    return max(0.0, load)


def pv_power(house: HouseConfig, t: float) -> float:
    """PV output in W: sin^2 bell over 07-19h solar time, peak at 13h,
    attenuated by a seeded cloud factor in [0.2, 1.0] per 30-min block."""
    if house.pv_peak_w <= 0:
        return 0.0
    h = _hour_of_day(t)
    if not 7.0 <= h < 19.0:
        return 0.0
    power = house.pv_peak_w * math.sin(math.pi * (h - 7.0) / 12.0) ** 2
    if house.clouds:
        block = int(t // 1800)
        power *= 0.2 + 0.8 * _mix(house.seed, block, 0xC1)
    return power


def step_battery(
    state: MeterState, surplus_w: float, dt_s: float, params: BatteryParams
) -> tuple[MeterState, float]:
    """Greedy self-consumption dispatch for one step of dt_s seconds.

    Positive surplus charges the battery (limited by max_charge_w and
    remaining headroom; the round-trip efficiency is applied entirely on
    the charge side), a deficit discharges it (limited by max_discharge_w
    and stored energy). Returns the new state and the residual grid flow
    in W (+ = injection, - = draw). Accounting identity per step:

        surplus*dt = (soc gained)/eta * 3600 + grid_w*dt     (charging)
        surplus*dt = (soc lost)      * 3600 + grid_w*dt      (discharging)
    """
    if dt_s <= 0:
        raise SimulationError("dt must be positive")
    eta = params.round_trip_efficiency
    soc = state.soc_wh + state.soc_frac
    if surplus_w >= 0:
        headroom_wh = params.capacity_wh - soc
        limit_w = headroom_wh * 3600.0 / (dt_s * eta) if headroom_wh > 0 else 0.0
        charge_w = max(0.0, min(surplus_w, params.max_charge_w, limit_w))
        soc += charge_w * dt_s * eta / 3600.0
        grid_w = surplus_w - charge_w
    else:
        deficit_w = -surplus_w
        limit_w = soc * 3600.0 / dt_s if soc > 0 else 0.0
        discharge_w = max(0.0, min(deficit_w, params.max_discharge_w, limit_w))
        soc -= discharge_w * dt_s / 3600.0
        grid_w = surplus_w + discharge_w
    soc = min(max(soc, 0.0), float(params.capacity_wh))
    soc_int = math.floor(soc)
    return replace(state, soc_wh=soc_int, soc_frac=soc - soc_int), grid_w


def step_meter(
    state: MeterState,
    house: HouseConfig,
    t: float,
    dt_s: float,
    extra_load_w: float = 0.0,
) -> MeterState:
    """Advance the meter over [t, t+dt): evaluate powers at t, dispatch
    the battery, integrate the grid flow into the energy registers."""
    if dt_s <= 0:
        raise SimulationError("dt must be positive")
    if t < state.last_update:
        raise SimulationError(f"time went backwards: {t} < {state.last_update}")
    load = load_power(house, t) + extra_load_w
    pv = pv_power(house, t)
    surplus = pv - load
    if house.battery is not None:
        state, grid_w = step_battery(state, surplus, dt_s, house.battery)
    else:
        grid_w = surplus

    consumed = state.energy_consumed_wh + state.consumed_frac
    injected = state.energy_injected_wh + state.injected_frac
    if grid_w >= 0:
        injected += grid_w * dt_s / 3600.0
    else:
        consumed += -grid_w * dt_s / 3600.0
    c_int, i_int = math.floor(consumed), math.floor(injected)
    return replace(
        state,
        energy_consumed_wh=c_int,
        consumed_frac=consumed - c_int,
        energy_injected_wh=i_int,
        injected_frac=injected - i_int,
        last_update=int(t + dt_s),
        last_grid_w=grid_w,
    )


def _fmt_energy(wh: int) -> str:
    return f"{wh:09d}"


def _fmt_va(va: int) -> str:
    return f"{min(va, 99999):05d}"


def _tariff_label(house: HouseConfig, t: float) -> str:
    if house.contract == "HPHC":
        h = _hour_of_day(t)
        return "HC" if (h >= 22.0 or h < 6.0) else "HP"
    return "BASE"


def emit_tic(state: MeterState, house: HouseConfig, mode: TicMode) -> TicFrame:
    """Current registers and instantaneous apparent power as a TIC frame.

    Apparent power is derived from the active grid flow with a fixed
    power factor of 0.95. Consumer meters carry no injection groups.
    """
    draw_w = max(0.0, -state.last_grid_w)
    inject_w = max(0.0, state.last_grid_w)
    sinsts = round(draw_w / POWER_FACTOR)
    sinsti = round(inject_w / POWER_FACTOR)
    producer = house.role is not HouseRole.CONSUMER
    t = state.last_update

    if mode is TicMode.STANDARD:
        groups = [
            TicGroup("ADSC", state.meter_id),
            TicGroup("NGTF", "H PLEINE/CREUSE" if house.contract == "HPHC" else "BASE"),
            TicGroup("LTARF", _tariff_label(house, t)),
            TicGroup("EAST", _fmt_energy(state.energy_consumed_wh)),
            TicGroup("SINSTS", _fmt_va(sinsts)),
        ]
        if producer:
            groups.insert(4, TicGroup("EAIT", _fmt_energy(state.energy_injected_wh)))
            groups.append(TicGroup("SINSTI", _fmt_va(sinsti)))
    else:
        # historic mode carries no injection registers in the supported
        # subset; emitted as a base-contract meter
        groups = [
            TicGroup("ADCO", state.meter_id),
            TicGroup("OPTARIF", "BASE"),
            TicGroup("BASE", _fmt_energy(state.energy_consumed_wh)),
            TicGroup("PTEC", "TH.."),
            TicGroup("PAPP", _fmt_va(sinsts)),
        ]
    return TicFrame(mode=mode, groups=tuple(groups))


def day_plus_one_report(
    history: Sequence[tuple[int, int, int]],
    date: dt.date,
    meter_id: str = "",
    house_id: str = "",
) -> DayPlusOneReport:
    """Build the nightly 144-slot report from (ts, consumed, injected)
    register samples taken at 10-min cadence or faster.

    Slot k covers [midnight + k*600, midnight + (k+1)*600); its delta is
    the difference of boundary register values, where the value at a
    boundary is the latest sample at or before it. Deltas therefore
    telescope: their sum equals the register difference over the day.
    """
    day_start = int(dt.datetime.combine(date, dt.time(), dt.timezone.utc).timestamp())
    day_end = day_start + DAY_S
    samples = sorted(history)
    if not samples or samples[0][0] > day_start or samples[-1][0] < day_end:
        raise IncompleteDay(f"history does not span {date.isoformat()}")
    prev_ts = None
    for ts, _, _ in samples:
        if ts < day_start or ts > day_end:
            prev_ts = ts if ts <= day_start else prev_ts
            continue
        if prev_ts is not None and ts - prev_ts > SLOT_S:
            raise IncompleteDay(f"gap of {ts - prev_ts}s before t={ts}")
        prev_ts = ts

    def boundary(ts_edge: int) -> tuple[int, int]:
        value = None
        for ts, c, i in samples:
            if ts <= ts_edge:
                value = (c, i)
            else:
                break
        assert value is not None  # guaranteed by the span check
        return value

    edges = [boundary(day_start + k * SLOT_S) for k in range(SLOTS_PER_DAY + 1)]
    slots = tuple(
        (edges[k + 1][0] - edges[k][0], edges[k + 1][1] - edges[k][1])
        for k in range(SLOTS_PER_DAY)
    )
    return DayPlusOneReport(meter_id=meter_id, house_id=house_id, date=date, slots=slots)


@dataclass
class Device:
    """Controllable load attached to a house (the gateway's control hook)."""

    name: str
    rated_w: int = 1500
    on: bool = False

    @property
    def demand_w(self) -> float:
        return float(self.rated_w) if self.on else 0.0


class HouseSimulator:
    """Stateful wrapper advancing one house's meter on a fixed step grid.

    Confinement: one stepper per house; not safe for concurrent mutation.
    """

    def __init__(self, config: HouseConfig, start_ts: int, step_s: int = 30):
        if step_s <= 0 or SLOT_S % step_s and step_s % SLOT_S:
            # steps must tile the 10-min report slots one way or the other
            raise SimulationError("step_s must divide or be a multiple of 600")
        self.config = config
        self.step_s = step_s
        self.start_ts = int(start_ts)
        self.state = MeterState(meter_id=config.meter_id, last_update=int(start_ts))
        self.devices: dict[str, Device] = {"heater": Device("heater")}
        # (ts, consumed, injected) register samples for day+1 reporting
        self.register_history: list[tuple[int, int, int]] = [(int(start_ts), 0, 0)]

    def extra_load_w(self) -> float:
        return sum(d.demand_w for d in self.devices.values())

    def set_device(self, name: str, on: Optional[bool] = None, power_w: Optional[int] = None):
        dev = self.devices.setdefault(name, Device(name))
        if power_w is not None:
            dev.rated_w = int(power_w)
        if on is not None:
            dev.on = on

    def advance_to(self, t: float) -> MeterState:
        """Step the meter on the absolute step grid up to (at most) t."""
        target = int(t)
        while self.state.last_update + self.step_s <= target:
            now = self.state.last_update
            self.state = step_meter(
                self.state, self.config, now, self.step_s, self.extra_load_w()
            )
            self.register_history.append(
                (
                    self.state.last_update,
                    self.state.energy_consumed_wh,
                    self.state.energy_injected_wh,
                )
            )
        return self.state

    def read_frame(self, now: float, mode: TicMode = TicMode.STANDARD) -> bytes:
        """What a gateway sees on the TIC socket at time now."""
        self.advance_to(now)
        return serialize_frame(emit_tic(self.state, self.config, mode))

    def day_report(self, date: dt.date) -> DayPlusOneReport:
        return day_plus_one_report(
            self.register_history, date, self.config.meter_id, self.config.house_id
        )


@dataclass
class FleetConfig:
    """Fleet description: the JSON schema is given in docs/sim-config.md."""

    houses: list[HouseConfig]
    seed: int = 1
    start_ts: int = 1736121600  # 2025-01-06T00:00:00Z
    acceleration: float = 60.0
    tic_mode: TicMode = TicMode.STANDARD
    step_s: int = 30

    def house(self, house_id: str) -> HouseConfig:
        for h in self.houses:
            if h.house_id == house_id:
                return h
        raise KeyError(house_id)

    @classmethod
    def default(cls, seed: int = 1, **kw) -> "FleetConfig":
        """The reference 9-house fleet: h1-h5 producers, h6 producer with
        battery, h7-h9 pure consumers."""
        houses = []
        for i in range(1, 10):
            hid = f"h{i}"
            if i <= 5:
                role, pv, battery = HouseRole.PRODUCER, DEFAULT_PV_PEAK_W, None
            elif i == 6:
                role, pv = HouseRole.PRODUCER_BATTERY, DEFAULT_PV_PEAK_W
                battery = BatteryParams(**DEFAULT_BATTERY)
            else:
                role, pv, battery = HouseRole.CONSUMER, 0, None
            houses.append(
                HouseConfig(
                    house_id=hid,
                    role=role,
                    pv_peak_w=pv,
                    battery=battery,
                    seed=seed * 1000 + i,
                )
            )
        return cls(houses=houses, seed=seed, **kw)

    @classmethod
    def from_json(cls, text: str) -> "FleetConfig":
        obj = json.loads(text)
        houses = []
        for h in obj["houses"]:
            battery = BatteryParams(**h["battery"]) if h.get("battery") else None
            houses.append(
                HouseConfig(
                    house_id=h["house_id"],
                    role=HouseRole(h["role"]),
                    pv_peak_w=h.get("pv_peak_w", 0),
                    load_base_w=h.get("load_base_w", DEFAULT_LOAD_BASE_W),
                    load_peak_w=h.get("load_peak_w", DEFAULT_LOAD_PEAK_W),
                    battery=battery,
                    seed=h.get("seed", obj.get("seed", 1)),
                    load_noise_w=h.get("load_noise_w", DEFAULT_LOAD_NOISE_W),
                    clouds=h.get("clouds", True),
                    contract=h.get("contract", "BASE"),
                )
            )
        return cls(
            houses=houses,
            seed=obj.get("seed", 1),
            start_ts=obj.get("start_ts", cls.start_ts),
            acceleration=obj.get("acceleration", 60.0),
            tic_mode=TicMode(obj.get("tic_mode", "standard")),
            step_s=obj.get("step_s", 30),
        )

    def to_json(self) -> str:
        houses = []
        for h in self.houses:
            entry: dict = {
                "house_id": h.house_id,
                "role": h.role.value,
                "pv_peak_w": h.pv_peak_w,
                "load_base_w": h.load_base_w,
                "load_peak_w": h.load_peak_w,
                "seed": h.seed,
                "load_noise_w": h.load_noise_w,
                "clouds": h.clouds,
                "contract": h.contract,
            }
            if h.battery:
                entry["battery"] = {
                    "capacity_wh": h.battery.capacity_wh,
                    "max_charge_w": h.battery.max_charge_w,
                    "max_discharge_w": h.battery.max_discharge_w,
                    "round_trip_efficiency": h.battery.round_trip_efficiency,
                }
            houses.append(entry)
        return json.dumps(
            {
                "seed": self.seed,
                "start_ts": self.start_ts,
                "acceleration": self.acceleration,
                "tic_mode": self.tic_mode.value,
                "step_s": self.step_s,
                "houses": houses,
            },
            indent=2,
        )
