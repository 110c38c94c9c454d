"""Rate formulas, aggregation, active power, cost, prediction, buckets."""

import random
from dataclasses import dataclass

import pytest

from accmon.analytics import (
    AnalyticsError,
    Bucket,
    PowerSample,
    RateScale,
    TariffSchedule,
    UndefinedRate,
    active_power_from_indexes,
    aggregate_fleet,
    bucket_deltas,
    cost,
    instantaneous_rates,
    predict_day_consumption,
    rates_from_buckets,
    self_consumption,
    self_sufficiency,
)


def samples(pairs):
    return [PowerSample(t=k * 1800, load_w=l, prod_w=p) for k, (l, p) in enumerate(pairs)]


def oracle_rates(pairs):
    """Brute-force per-sample min-sum evaluation, kept deliberately dumb."""
    num = 0.0
    load_sum = 0.0
    prod_sum = 0.0
    for load, prod in pairs:
        num += load if load < prod else prod
        load_sum += load
        prod_sum += prod
    sc = num / prod_sum if prod_sum else None
    ss = num / load_sum if load_sum else None
    return sc, ss


class TestRates:
    def test_hand_evaluated_example(self):
        pairs = [(5, 10), (10, 5)]
        assert self_consumption(samples(pairs)) == pytest.approx(2 / 3, rel=1e-12)
        assert self_sufficiency(samples(pairs)) == pytest.approx(2 / 3, rel=1e-12)

    def test_full_selfconsumption_when_load_dominates(self):
        pairs = [(10, 3), (8, 8), (20, 0.5)]
        assert self_consumption(samples(pairs)) == 1.0

    def test_full_sufficiency_when_prod_dominates(self):
        pairs = [(3, 10), (8, 8), (0.5, 20)]
        assert self_sufficiency(samples(pairs)) == 1.0

    def test_zero_production_undefined(self):
        with pytest.raises(UndefinedRate):
            self_consumption(samples([(5, 0), (3, 0)]))

    def test_zero_load_undefined(self):
        with pytest.raises(UndefinedRate):
            self_sufficiency(samples([(0, 5), (0, 3)]))

    def test_against_bruteforce_oracle(self):
        rng = random.Random(101)
        for _ in range(1000):
            pairs = [
                (rng.uniform(0, 5000), rng.uniform(0, 5000))
                for _ in range(rng.randint(1, 50))
            ]
            want_sc, want_ss = oracle_rates(pairs)
            got_sc = self_consumption(samples(pairs))
            got_ss = self_sufficiency(samples(pairs))
            assert got_sc == pytest.approx(want_sc, rel=1e-12)
            assert got_ss == pytest.approx(want_ss, rel=1e-12)
            assert 0 <= got_sc <= 1 and 0 <= got_ss <= 1

    def test_shared_numerator_identity_exact(self):
        from accmon.analytics import rate_components

        rng = random.Random(55)
        for _ in range(300):
            pairs = [(rng.uniform(0, 100), rng.uniform(0, 100)) for _ in range(10)]
            s = samples(pairs)
            num, load, prod = rate_components(s)
            sc, ss = num / prod, num / load
            assert sc * prod == ss * load  # exact rationals, zero error

    def test_instantaneous(self):
        assert instantaneous_rates(1000, 1000) == (1.0, 1.0)
        sc, ss = instantaneous_rates(0, 500)
        assert sc == 0.0 and ss is None
        sc, ss = instantaneous_rates(800, 500)
        assert sc == 1.0 and ss == pytest.approx(0.625)

    def test_period_rate_is_not_mean_of_bucket_rates(self):
        # the period rate runs the equation on the concatenated samples;
        # averaging per-bucket rates gives a different (wrong) number
        first = [(10.0, 2.0)]   # bucket 1: sc = 1.0
        second = [(1.0, 10.0)]  # bucket 2: sc = 0.1
        combined = samples(first + second)
        period = self_consumption(combined)
        mean_of_rates = (self_consumption(samples(first)) + self_consumption(samples(second))) / 2
        assert period == pytest.approx((2 + 1) / 12)
        assert period != pytest.approx(mean_of_rates)


class TestAggregation:
    def test_single_consumer(self):
        agg = aggregate_fleet({"h7": PowerSample(0, 500.0, 0.0)})
        assert (agg.load_w, agg.prod_w) == (500.0, 0.0)

    def test_balanced_pair_instantaneous_unity(self):
        agg = aggregate_fleet(
            {"h1": PowerSample(0, 0.0, 300.0), "h7": PowerSample(0, 300.0, 0.0)}
        )
        assert agg.load_w - agg.prod_w == 0
        assert instantaneous_rates(agg.load_w, agg.prod_w) == (1.0, 1.0)

    def test_nine_house_sum_matches_bruteforce(self):
        rng = random.Random(77)
        per_house = {
            f"h{i}": PowerSample(60, rng.uniform(0, 2000), rng.uniform(0, 3000))
            for i in range(1, 10)
        }
        agg = aggregate_fleet(per_house)
        assert agg.load_w == pytest.approx(sum(s.load_w for s in per_house.values()))
        assert agg.prod_w == pytest.approx(sum(s.prod_w for s in per_house.values()))

    def test_mixed_timestamps_rejected(self):
        with pytest.raises(AnalyticsError):
            aggregate_fleet({"a": PowerSample(0, 1, 1), "b": PowerSample(30, 1, 1)})


@dataclass
class FakePoint:
    ts: int
    east_wh: int
    eait_wh: int
    sinsts_va: int = 0
    sinsti_va: int = 0


class TestActivePower:
    def test_unit_arithmetic(self):
        pts = [FakePoint(0, 100, 0), FakePoint(30, 105, 0)]
        (s,) = active_power_from_indexes(pts)
        assert s.load_w == pytest.approx(600.0)  # 5 Wh over 30 s
        assert s.prod_w == 0.0

    def test_flat_registers_zero_power(self):
        pts = [FakePoint(0, 100, 50), FakePoint(30, 100, 50)]
        (s,) = active_power_from_indexes(pts)
        assert s.load_w == 0.0 and s.prod_w == 0.0

    def test_reconstruction_error_below_quantization(self):
        # simulate a constant 750 W draw sampled through integer Wh registers
        pts = []
        acc = 0.0
        for k in range(0, 2881):
            ts = k * 30
            acc = 750 * ts / 3600
            pts.append(FakePoint(ts, int(acc), 0))
        series = active_power_from_indexes(pts)
        quant = 3600 / 30  # one register count per interval, in W
        errors = [abs(s.load_w - 750.0) for s in series]
        assert sum(errors) / len(errors) < quant


class TestCost:
    def bucket(self, start, wh):
        return Bucket(start=start, consumed_wh=wh, injected_wh=0, mean_apparent_va=0, sample_count=1)

    def test_base_price(self):
        tariff = TariffSchedule.base(0.20)
        assert cost([self.bucket(0, 10_000)], tariff) == pytest.approx(2.00)

    def test_zero_consumption(self):
        assert cost([], TariffSchedule.base(0.20)) == 0.0
        assert cost([self.bucket(0, 0)], TariffSchedule.base(0.20)) == 0.0

    def test_hphc_split_hand_computed(self):
        # UTC timezone keeps the window arithmetic readable in the test
        tariff = TariffSchedule.hphc(
            0.27, 0.2068, windows=("22:00-24:00", "00:00-06:00"), timezone="UTC"
        )
        day = 1736121600  # 2025-01-06T00:00:00Z
        buckets = [
            self.bucket(day + 3 * 3600, 2000),   # 03:00 off-peak
            self.bucket(day + 12 * 3600, 3000),  # 12:00 peak
            self.bucket(day + 22 * 3600, 1000),  # 22:00 off-peak
        ]
        want = 2.0 * 0.2068 + 3.0 * 0.27 + 1.0 * 0.2068
        assert cost(buckets, tariff) == pytest.approx(want, abs=1e-9)

    def test_off_peak_resolution(self):
        tariff = TariffSchedule.hphc(0.27, 0.21, windows=("22:00-24:00", "00:00-06:00"),
                                     timezone="UTC")
        day = 1736121600
        assert tariff.is_off_peak(day)                   # midnight
        assert tariff.is_off_peak(day + 5 * 3600 + 3599)  # 05:59:59
        assert not tariff.is_off_peak(day + 6 * 3600)     # 06:00
        assert not tariff.is_off_peak(day + 21 * 3600)
        assert tariff.is_off_peak(day + 22 * 3600)

    def test_overlapping_windows_rejected(self):
        with pytest.raises(AnalyticsError):
            TariffSchedule.hphc(0.27, 0.21, windows=("01:00-03:00", "02:00-04:00"))


class TestPrediction:
    def flat_day(self, wh_per_slot=100):
        return [wh_per_slot] * 144

    def test_midnight_is_mean_of_past_days(self):
        history = [self.flat_day(100), self.flat_day(120)]
        got = predict_day_consumption(history, today_so_far_wh=0, now_tod_s=0)
        assert got == pytest.approx((14400 + 17280) / 2)

    def test_end_of_day_is_today_so_far(self):
        history = [self.flat_day()] * 3
        got = predict_day_consumption(history, today_so_far_wh=15000, now_tod_s=86399)
        assert got == pytest.approx(15000, abs=1)

    def test_stationary_profile_error_under_5_percent(self):
        from accmon.simulation import HouseConfig, HouseRole, load_power

        house = HouseConfig(house_id="c", role=HouseRole.CONSUMER, load_base_w=300,
                            load_peak_w=1800, seed=1, load_noise_w=0)
        day0 = 1736121600
        profile = []
        for k in range(144):
            wh = sum(load_power(house, day0 + k * 600 + i * 60) * 60 for i in range(10)) / 3600
            profile.append(wh)
        total = sum(profile)
        history = [profile] * 7
        for now_slot in (0, 36, 72, 108, 143):
            so_far = sum(profile[:now_slot])
            got = predict_day_consumption(history, so_far, now_slot * 600)
            assert abs(got - total) / total < 0.05

    def test_empty_history_rejected(self):
        with pytest.raises(AnalyticsError):
            predict_day_consumption([], 0, 0)


class TestBucketDeltas:
    def mkpoints(self, t0, n, step, power_w):
        pts = []
        for k in range(n):
            ts = t0 + k * step
            east = int(power_w * k * step / 3600)
            pts.append(FakePoint(ts, east, 0, sinsts_va=int(power_w / 0.95), sinsti_va=0))
        return pts

    def test_constant_600w_buckets(self):
        t0 = 1736121600
        pts = self.mkpoints(t0, 2 * 3600 // 30 + 1, 30, 600)
        buckets = bucket_deltas(pts, t0, t0 + 7200, bucket_s=1800)
        assert [b.consumed_wh for b in buckets] == [300, 300, 300, 300]

    def test_conservation_telescopes(self):
        rng = random.Random(5)
        t0 = 1736121600
        pts = []
        east = 0
        for k in range(200):
            east += rng.randrange(0, 50)
            pts.append(FakePoint(t0 + k * 30 + rng.randrange(0, 5), east, 0))
        t1 = t0 + 200 * 30
        buckets = bucket_deltas(pts, t0, t1, bucket_s=1800)
        window = [p for p in pts if t0 <= p.ts <= t1]
        assert sum(b.consumed_wh for b in buckets) == window[-1].east_wh - window[0].east_wh

    def test_900_vs_1800_same_hourly_totals(self):
        rng = random.Random(9)
        t0 = 1736121600
        pts = []
        east = eait = 0
        for k in range(480):
            east += rng.randrange(0, 20)
            eait += rng.randrange(0, 12)
            pts.append(FakePoint(t0 + k * 30, east, eait))
        t1 = t0 + 4 * 3600
        b900 = bucket_deltas(pts, t0, t1, bucket_s=900)
        b1800 = bucket_deltas(pts, t0, t1, bucket_s=1800)
        for hour in range(4):
            fine = b900[hour * 4 : hour * 4 + 4]
            coarse = b1800[hour * 2 : hour * 2 + 2]
            assert sum(b.consumed_wh for b in fine) == sum(b.consumed_wh for b in coarse)
            assert sum(b.injected_wh for b in fine) == sum(b.injected_wh for b in coarse)

    def test_empty_buckets_zeroed(self):
        t0 = 1736121600
        pts = [FakePoint(t0 + 10, 100, 0), FakePoint(t0 + 40, 110, 0)]
        buckets = bucket_deltas(pts, t0, t0 + 5400, bucket_s=1800)
        assert buckets[0].sample_count == 2
        assert buckets[1].sample_count == 0 and buckets[1].consumed_wh == 0
        assert buckets[2].sample_count == 0

    def test_invalid_bucket_width(self):
        with pytest.raises(AnalyticsError):
            bucket_deltas([], 0, 3600, bucket_s=1700)

    def test_rates_from_buckets_matches_direct_equation(self):
        rng = random.Random(31)
        t0 = 1736121600
        per_house = {}
        for hid in ("h1", "h7"):
            pts = []
            east = eait = 0
            for k in range(120):
                east += rng.randrange(0, 30)
                if hid == "h1":
                    eait += rng.randrange(0, 40)
                pts.append(FakePoint(t0 + k * 30, east, eait))
            per_house[hid] = bucket_deltas(pts, t0, t0 + 3600, bucket_s=1800)
        report = rates_from_buckets(per_house, RateScale.PERIOD, (t0, t0 + 3600))
        pairs = []
        for k in range(2):
            load = sum(per_house[h][k].consumed_wh for h in per_house)
            prod = sum(per_house[h][k].injected_wh for h in per_house)
            pairs.append((load, prod))
        want_sc, want_ss = oracle_rates(pairs)
        assert report.self_consumption == pytest.approx(want_sc, rel=1e-12)
        assert report.self_sufficiency == pytest.approx(want_ss, rel=1e-12)
