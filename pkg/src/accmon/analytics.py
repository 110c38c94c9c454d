"""Energy accounting for a collective self-consumption operation.

Rates over a period of T uniform samples:

    self-consumption = sum_t min(load(t), prod(t)) / sum_t prod(t)
    self-sufficiency = sum_t min(load(t), prod(t)) / sum_t load(t)

Both share the min-sum numerator, so SC * sum(prod) == SS * sum(load)
always holds exactly. load/prod are grid-side net flows, post-battery,
because that is what the meter sees: a household battery's self-use is
invisible to these rates by construction.

A zero denominator is a first-class UndefinedRate, surfaced downstream
as "n/a", never as 0 or NaN. The sampling step cancels in the ratios,
so samples only need a uniform grid; non-uniform telemetry is resampled
to a bucket grid first (see rates_from_buckets).

Allocation math (distribution keys, corrected indexes) runs on exact
rationals (fractions.Fraction) so conservation checks hold to 0 Wh.
"""

from __future__ import annotations

import bisect
import datetime as dt
import enum
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Optional, Sequence
from zoneinfo import ZoneInfo

from .simulation import SLOT_S, DayPlusOneReport


class AnalyticsError(Exception):
    pass


class UndefinedRate(AnalyticsError):
    """Denominator of a rate is zero (no production / no consumption)."""


@dataclass(frozen=True)
class PowerSample:
    t: int
    load_w: float
    prod_w: float

    def __post_init__(self):
        if self.load_w < 0 or self.prod_w < 0:
            raise AnalyticsError("power samples must be non-negative")


class RateScale(enum.Enum):
    INSTANT = "instant"
    THIRTY_MIN = "30min"
    PERIOD = "period"


@dataclass(frozen=True)
class RateReport:
    scale: RateScale
    window: tuple[int, int]
    self_consumption: Optional[float]  # None = undefined ("n/a")
    self_sufficiency: Optional[float]
    samples_used: int

    def to_dict(self) -> dict:
        return {
            "scale": self.scale.value,
            "from": self.window[0],
            "to": self.window[1],
            "self_consumption": self.self_consumption,
            "self_sufficiency": self.self_sufficiency,
            "samples_used": self.samples_used,
        }


def rate_components(samples: Sequence[PowerSample]) -> tuple[Fraction, Fraction, Fraction]:
    """Exact (min_sum, load_sum, prod_sum) over the samples.

    Computed as rationals (floats convert exactly) so that the shared
    numerator identity SC * prod_sum == SS * load_sum holds with zero
    error, not merely to float precision.
    """
    if not samples:
        raise AnalyticsError("empty sample set")
    min_sum = load_sum = prod_sum = Fraction(0)
    for s in samples:
        load, prod = Fraction(s.load_w), Fraction(s.prod_w)
        min_sum += min(load, prod)
        load_sum += load
        prod_sum += prod
    return min_sum, load_sum, prod_sum


def self_consumption(samples: Sequence[PowerSample]) -> float:
    """Share of local production consumed locally over the period."""
    min_sum, _, prod_sum = rate_components(samples)
    if prod_sum == 0:
        raise UndefinedRate("no production over the period")
    return float(min_sum / prod_sum)


def self_sufficiency(samples: Sequence[PowerSample]) -> float:
    """Share of local consumption covered by local production."""
    min_sum, load_sum, _ = rate_components(samples)
    if load_sum == 0:
        raise UndefinedRate("no consumption over the period")
    return float(min_sum / load_sum)


def period_rates(samples: Sequence[PowerSample]) -> tuple[Optional[float], Optional[float]]:
    """(self-consumption, self-sufficiency) in one pass; None = undefined."""
    min_sum, load_sum, prod_sum = rate_components(samples)
    sc = float(min_sum / prod_sum) if prod_sum else None
    ss = float(min_sum / load_sum) if load_sum else None
    return sc, ss


def instantaneous_rates(load_w: float, prod_w: float) -> tuple[Optional[float], Optional[float]]:
    """Single-sample rates; None for a zero denominator."""
    if load_w < 0 or prod_w < 0:
        raise AnalyticsError("power must be non-negative")
    shared = min(load_w, prod_w)
    sc = shared / prod_w if prod_w > 0 else None
    ss = shared / load_w if load_w > 0 else None
    return sc, ss


def aggregate_fleet(per_house: Mapping[str, PowerSample]) -> PowerSample:
    """Operation-level sample: sum of grid draws and grid injections."""
    if not per_house:
        raise AnalyticsError("no houses to aggregate")
    times = {s.t for s in per_house.values()}
    if len(times) != 1:
        raise AnalyticsError(f"samples span several timestamps: {sorted(times)}")
    return PowerSample(
        t=times.pop(),
        load_w=sum(s.load_w for s in per_house.values()),
        prod_w=sum(s.prod_w for s in per_house.values()),
    )


def active_power_from_indexes(points: Sequence) -> list[PowerSample]:
    """Reconstruct active power between consecutive telemetry points.

    Between points k and k+1: W = delta_Wh * 3600 / delta_s, computed
    separately for the draw (consumed) and injection registers. The
    sample carries the interval's end timestamp. Points need strictly
    increasing timestamps and expose ts / east_wh / eait_wh attributes.
    """
    if len(points) < 2:
        raise AnalyticsError("need at least two points")
    out = []
    for a, b in zip(points, points[1:]):
        dt_s = b.ts - a.ts
        if dt_s <= 0:
            raise AnalyticsError("timestamps must be strictly increasing")
        draw = (b.east_wh - a.east_wh) * 3600.0 / dt_s
        inject = (b.eait_wh - a.eait_wh) * 3600.0 / dt_s
        out.append(PowerSample(t=b.ts, load_w=draw, prod_w=inject))
    return out


# -- distribution keys -------------------------------------------------------


class KeyKind(enum.Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"


@dataclass(frozen=True)
class DistributionKey:
    kind: KeyKind
    proportions: Optional[dict[str, float]] = None  # static only, sums to 1

    def __post_init__(self):
        if self.kind is KeyKind.STATIC:
            if not self.proportions:
                raise AnalyticsError("static key needs proportions")
            if any(v < 0 for v in self.proportions.values()):
                raise AnalyticsError("proportions must be non-negative")
            total = sum(self.proportions.values())
            if abs(total - 1.0) > 1e-9:
                raise AnalyticsError(f"proportions sum to {total}, expected 1")
        elif self.proportions is not None:
            raise AnalyticsError("dynamic key takes no proportions")


@dataclass(frozen=True)
class AllocationResult:
    """Split of one interval's production among consumers (exact Wh).

    Invariants: allocated_i <= consumption_i; sum(allocated) + surplus
    equals production; allocated_i + residual_draw_i = consumption_i.
    Values are Fractions so those identities hold with 0 Wh error.
    """

    interval: tuple[int, int]
    allocated_wh: dict[str, Fraction]
    surplus_wh: Fraction
    residual_draw_wh: dict[str, Fraction]

    @property
    def total_allocated_wh(self) -> Fraction:
        return sum(self.allocated_wh.values(), Fraction(0))


def allocate_static(
    key: DistributionKey,
    prod_wh,
    consumption_wh: Mapping[str, object],
    interval: tuple[int, int] = (0, 0),
) -> AllocationResult:
    """Fixed-proportion key: allocated_i = min(k_i * prod, consumption_i).

    The unused part of any consumer's share is NOT redistributed; it
    becomes grid surplus. Proportions are normalized exactly so shares
    sum to the production.
    """
    if key.kind is not KeyKind.STATIC:
        raise AnalyticsError("allocate_static requires a static key")
    prod = Fraction(prod_wh)
    if prod < 0:
        raise AnalyticsError("production must be non-negative")
    props = {h: Fraction(v) for h, v in (key.proportions or {}).items()}
    total_prop = sum(props.values(), Fraction(0))
    allocated: dict[str, Fraction] = {}
    residual: dict[str, Fraction] = {}
    for house, cons_in in consumption_wh.items():
        cons = Fraction(cons_in)
        if cons < 0:
            raise AnalyticsError(f"negative consumption for {house}")
        share = prod * props.get(house, Fraction(0)) / total_prop if total_prop else Fraction(0)
        allocated[house] = min(share, cons)
        residual[house] = cons - allocated[house]
    surplus = prod - sum(allocated.values(), Fraction(0))
    return AllocationResult(interval, allocated, surplus, residual)


def allocate_dynamic(
    prod_wh,
    consumption_wh: Mapping[str, object],
    interval: tuple[int, int] = (0, 0),
) -> AllocationResult:
    """Consumption-proportional key with surplus redistribution.

    Iterative water-filling: each round splits the remaining production
    proportionally to the remaining unmet consumption, capped at each
    consumer's need; repeats until the production is exhausted or all
    needs are met (at most N rounds for N consumers). Exact arithmetic
    guarantees total allocated == min(prod, sum(consumption)).
    """
    remaining = Fraction(prod_wh)
    if remaining < 0:
        raise AnalyticsError("production must be non-negative")
    need: dict[str, Fraction] = {}
    for house, cons_in in consumption_wh.items():
        cons = Fraction(cons_in)
        if cons < 0:
            raise AnalyticsError(f"negative consumption for {house}")
        need[house] = cons
    allocated = {h: Fraction(0) for h in need}

    for _ in range(max(len(need), 1)):
        unmet = {h: need[h] - allocated[h] for h in need if need[h] > allocated[h]}
        total_unmet = sum(unmet.values(), Fraction(0))
        if remaining <= 0 or total_unmet <= 0:
            break
        pool = remaining
        for house, gap in unmet.items():
            give = min(pool * gap / total_unmet, gap)
            allocated[house] += give
            remaining -= give

    residual = {h: need[h] - allocated[h] for h in need}
    return AllocationResult(interval, allocated, remaining, residual)


def allocate(key: DistributionKey, prod_wh, consumption_wh, interval=(0, 0)) -> AllocationResult:
    if key.kind is KeyKind.STATIC:
        return allocate_static(key, prod_wh, consumption_wh, interval)
    return allocate_dynamic(prod_wh, consumption_wh, interval)


@dataclass(frozen=True)
class MonthlyAllocation:
    """Corrected indexes for a month of day+1 reports.

    Per house: self_consumed is billed by the producers' legal entity,
    residual by the regular supplier. Producer injections are attributed
    pro-rata of each slot's contribution.
    """

    days: tuple[dt.date, ...]
    self_consumed_wh: dict[str, Fraction]
    residual_wh: dict[str, Fraction]
    consumption_wh: dict[str, int]
    injected_wh: dict[str, int]
    attributed_self_consumed_wh: dict[str, Fraction]  # per producer
    surplus_wh: Fraction

    def to_dict(self) -> dict:
        return {
            "days": [d.isoformat() for d in self.days],
            "per_consumer": {
                h: {
                    "consumption_wh": self.consumption_wh[h],
                    "self_consumed_wh": float(self.self_consumed_wh[h]),
                    "residual_wh": float(self.residual_wh[h]),
                }
                for h in self.consumption_wh
            },
            "per_producer": {
                h: {
                    "injected_wh": self.injected_wh[h],
                    "attributed_self_consumed_wh": float(self.attributed_self_consumed_wh[h]),
                }
                for h in self.injected_wh
                if self.injected_wh[h] > 0
            },
            "surplus_wh": float(self.surplus_wh),
        }


def corrected_indexes(
    key: DistributionKey, reports: Mapping[str, Sequence[DayPlusOneReport]]
) -> MonthlyAllocation:
    """Run the allocation per 10-min slot over a month of reports.

    Every house's grid draw takes part as consumption (producers too:
    they draw when their panels fall short); production is the sum of
    injections. Conservation per slot and over the month is exact.
    """
    if not reports:
        raise AnalyticsError("no reports")
    day_sets = {tuple(sorted(r.date for r in rs)) for rs in reports.values()}
    if len(day_sets) != 1:
        raise AnalyticsError("all houses must report the same days")
    days = day_sets.pop()
    if len(set(days)) != len(days):
        raise AnalyticsError("duplicate day in reports")

    by_house = {h: {r.date: r for r in rs} for h, rs in reports.items()}
    houses = sorted(reports)
    self_consumed = {h: Fraction(0) for h in houses}
    residual = {h: Fraction(0) for h in houses}
    consumption = {h: 0 for h in houses}
    injected = {h: 0 for h in houses}
    attributed = {h: Fraction(0) for h in houses}
    surplus = Fraction(0)

    for day in days:
        for slot in range(len(by_house[houses[0]][day].slots)):
            cons = {h: by_house[h][day].slots[slot][0] for h in houses}
            inj = {h: by_house[h][day].slots[slot][1] for h in houses}
            prod = sum(inj.values())
            day_start = int(dt.datetime.combine(day, dt.time(), dt.timezone.utc).timestamp())
            interval = (day_start + slot * SLOT_S, day_start + (slot + 1) * SLOT_S)
            result = allocate(key, prod, cons, interval)
            slot_allocated = result.total_allocated_wh
            for h in houses:
                self_consumed[h] += result.allocated_wh[h]
                residual[h] += result.residual_draw_wh[h]
                consumption[h] += cons[h]
                injected[h] += inj[h]
                if prod > 0 and inj[h] > 0:
                    attributed[h] += slot_allocated * Fraction(inj[h], prod)
            surplus += result.surplus_wh

    return MonthlyAllocation(
        days=tuple(days),
        self_consumed_wh=self_consumed,
        residual_wh=residual,
        consumption_wh=consumption,
        injected_wh=injected,
        attributed_self_consumed_wh=attributed,
        surplus_wh=surplus,
    )


# -- tariffs and cost ---------------------------------------------------------


MILLICENTS_PER_EUR = 100_000  # monetary math in integer millicents


class TariffKind(enum.Enum):
    BASE = "base"
    HPHC = "hphc"


def _parse_hhmm(text: str) -> int:
    h, m = text.split(":")
    v = int(h) * 3600 + int(m) * 60
    if not 0 <= v <= 86400:
        raise AnalyticsError(f"bad time of day {text!r}")
    return v


@dataclass(frozen=True)
class TariffSchedule:
    kind: TariffKind
    price_base_eur_per_kwh: float = 0.0
    price_hp_eur_per_kwh: float = 0.0
    price_hc_eur_per_kwh: float = 0.0
    hc_windows: tuple[tuple[int, int], ...] = field(default_factory=tuple)  # local seconds
    timezone: str = "Europe/Paris"

    def __post_init__(self):
        prices = (
            [self.price_base_eur_per_kwh]
            if self.kind is TariffKind.BASE
            else [self.price_hp_eur_per_kwh, self.price_hc_eur_per_kwh]
        )
        if any(p <= 0 for p in prices):
            raise AnalyticsError("tariff prices must be positive")
        spans = sorted(self.hc_windows)
        for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
            if b0 < a1:
                raise AnalyticsError("HC windows overlap")
        for a0, a1 in spans:
            if a0 >= a1:
                raise AnalyticsError("HC window start must precede end")

    @classmethod
    def base(cls, price: float) -> "TariffSchedule":
        return cls(kind=TariffKind.BASE, price_base_eur_per_kwh=price)

    @classmethod
    def hphc(cls, hp: float, hc: float, windows: Sequence[str] = ("22:00-24:00", "00:00-06:00"),
             timezone: str = "Europe/Paris") -> "TariffSchedule":
        """Windows as "HH:MM-HH:MM" local-time strings; a window wrapping
        midnight must be given as the two non-wrapping halves."""
        spans = []
        for w in windows:
            lo, hi = w.split("-")
            spans.append((_parse_hhmm(lo), _parse_hhmm(hi)))
        return cls(
            kind=TariffKind.HPHC,
            price_hp_eur_per_kwh=hp,
            price_hc_eur_per_kwh=hc,
            hc_windows=tuple(spans),
            timezone=timezone,
        )

    def is_off_peak(self, ts: int) -> bool:
        if self.kind is TariffKind.BASE:
            return False
        local = dt.datetime.fromtimestamp(ts, ZoneInfo(self.timezone))
        second = local.hour * 3600 + local.minute * 60 + local.second
        return any(lo <= second < hi for lo, hi in self.hc_windows)

    def price_millicents_per_kwh(self, ts: int) -> int:
        if self.kind is TariffKind.BASE:
            eur = self.price_base_eur_per_kwh
        else:
            eur = self.price_hc_eur_per_kwh if self.is_off_peak(ts) else self.price_hp_eur_per_kwh
        return round(eur * MILLICENTS_PER_EUR)

    @property
    def contract_label(self) -> str:
        return "BASE" if self.kind is TariffKind.BASE else "HPHC"


def cost(buckets: Sequence, tariff: TariffSchedule) -> float:
    """Cost in EUR of the consumed energy in the buckets.

    Each bucket's price band is resolved from its start instant in local
    time; config validation guarantees bucket widths divide the HC window
    boundaries so no bucket straddles a band change. Internally integer
    millicents: sum(consumed_wh * price_mc_per_kwh), converted once.
    """
    total_mc_wh = 0  # millicents * Wh / kWh, i.e. numerator before /1000
    for b in buckets:
        consumed = getattr(b, "consumed_wh")
        if consumed < 0:
            raise AnalyticsError("negative bucket energy")
        total_mc_wh += consumed * tariff.price_millicents_per_kwh(getattr(b, "start"))
    return total_mc_wh / 1000 / MILLICENTS_PER_EUR


# -- prediction ---------------------------------------------------------------


def predict_day_consumption(
    history: Sequence[Sequence[int]],
    today_so_far_wh: float,
    now_tod_s: int,
    slot_s: int = SLOT_S,
) -> float:
    """Estimate the day's total consumption in Wh.

    history: per past day, the consumed-Wh deltas on a fixed slot grid
    (a day+1 report's consumed column works directly). Prediction =
    today's consumption so far + the mean, over the past days, of the
    consumption between this time of day and midnight. Within the
    current slot the remainder is taken pro-rata.
    """
    if not history:
        raise AnalyticsError("need at least one complete past day")
    if not 0 <= now_tod_s <= 86400:
        raise AnalyticsError("now_tod_s must be within a day")
    remainders = []
    for day in history:
        if len(day) * slot_s != 86400:
            raise AnalyticsError("history days must tile a full day")
        idx = min(now_tod_s // slot_s, len(day) - 1)
        frac_elapsed = (now_tod_s - idx * slot_s) / slot_s
        remainder = day[idx] * (1.0 - frac_elapsed) + sum(day[idx + 1 :])
        remainders.append(remainder)
    return today_so_far_wh + sum(remainders) / len(remainders)


# -- resampling glue (shared by the service API and the offline CLI) ----------


@dataclass(frozen=True)
class Bucket:
    """Aggregate of one bucket-aligned window of telemetry."""

    start: int
    consumed_wh: int
    injected_wh: int
    mean_apparent_va: float
    sample_count: int


def bucket_deltas(points: Sequence, t0: int, t1: int, bucket_s: int = 1800) -> list[Bucket]:
    """Downsample telemetry points to register-delta buckets.

    Bucket starts are aligned to multiples of bucket_s. A bucket's energy
    delta is the difference of boundary register values; the value at a
    boundary is the latest point at or before it (registers are
    cumulative, so a sample exactly on an edge closes the bucket ending
    there, and a sample exactly at t1 closes the final bucket). Deltas
    telescope, so their sum over the window equals the total register
    delta between the first and last boundary points; empty buckets
    carry zero deltas and sample_count 0. Points expose ts / east_wh /
    eait_wh / sinsts_va / sinsti_va.
    """
    if t0 >= t1:
        raise AnalyticsError("empty window")
    if bucket_s <= 0 or 3600 % bucket_s:
        raise AnalyticsError("bucket_s must divide 3600")
    window = [p for p in points if t0 <= p.ts <= t1]  # t1 point closes the window
    window.sort(key=lambda p: p.ts)
    ts_list = [p.ts for p in window]

    def boundary(edge: int) -> tuple[int, int]:
        if not window:
            return (0, 0)
        i = bisect.bisect_right(ts_list, edge)
        p = window[0] if i == 0 else window[i - 1]
        return (p.east_wh, p.eait_wh)

    out = []
    start = t0 - (t0 % bucket_s)
    while start < t1:
        end = start + bucket_s
        c0, i0 = boundary(start)
        c1, i1 = boundary(end)
        lo = bisect.bisect_left(ts_list, start)
        hi = bisect.bisect_left(ts_list, min(end, t1))  # counts stay in [t0, t1)
        n = max(0, hi - lo)
        mean_va = (
            sum(p.sinsts_va + p.sinsti_va for p in window[lo:hi]) / n if n else 0.0
        )
        out.append(
            Bucket(
                start=start,
                consumed_wh=c1 - c0,
                injected_wh=i1 - i0,
                mean_apparent_va=mean_va,
                sample_count=n,
            )
        )
        start = end
    return out


def rates_from_buckets(
    per_house_buckets: Mapping[str, Sequence[Bucket]],
    scale: RateScale,
    window: tuple[int, int],
) -> RateReport:
    """Operation rates from per-house bucket lists on one shared grid.

    Each bucket index becomes one uniform sample: load = sum of consumed
    deltas, prod = sum of injected deltas (Wh per bucket; the uniform
    step cancels in the rate ratios).
    """
    lists = list(per_house_buckets.values())
    if not lists:
        raise AnalyticsError("no houses")
    n = {len(b) for b in lists}
    if len(n) != 1:
        raise AnalyticsError("bucket grids differ between houses")
    samples = []
    for k in range(n.pop()):
        starts = {b[k].start for b in lists}
        if len(starts) != 1:
            raise AnalyticsError("bucket grids are misaligned")
        samples.append(
            PowerSample(
                t=starts.pop(),
                load_w=float(sum(b[k].consumed_wh for b in lists)),
                prod_w=float(sum(b[k].injected_wh for b in lists)),
            )
        )
    sc, ss = period_rates(samples)
    return RateReport(
        scale=scale,
        window=window,
        self_consumption=sc,
        self_sufficiency=ss,
        samples_used=len(samples),
    )
