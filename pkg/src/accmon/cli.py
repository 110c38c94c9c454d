"""accmon command line: run and compose the whole stack.

Subcommands: simulate (fleet -> broker -> gateways -> collector),
broker / serve / gateway (standalone components), rates and allocate
(offline analytics over exported data), replay (republish a dataset).

Exit codes: 0 ok, 1 runtime failure, 2 usage. Every option can also be
given through an ACC_-prefixed environment variable (flags win over the
environment, which wins over config files); see docs/cli.md.
"""

from __future__ import annotations

import datetime as dt
import json
import logging
import signal
import sys
import threading
import time
from pathlib import Path

import click

from .analytics import DistributionKey, KeyKind, RateScale, bucket_deltas, rates_from_buckets
from .clock import Clock, SimClock
from .gateway import ControlAction, Gateway, GatewayConfig, RecordedTicSource
from .mqtt import Broker, BrokerLimits, MqttClient
from .service import ApiServer, HouseEntry, Service, ServiceConfig
from .simulation import DayPlusOneReport, FleetConfig, HouseSimulator
from .store import Store, load_csv_points
from .telemetry import TelemetryPoint, decode_telemetry, encode_telemetry
from .tic import TicMode, extract_reading, parse_frame

log = logging.getLogger(__name__)


def _parse_when(value: str) -> int:
    """Accepts Unix seconds or ISO-8601 (naive = UTC)."""
    try:
        return int(value)
    except ValueError:
        parsed = dt.datetime.fromisoformat(value)
        if parsed.tzinfo is None:
            parsed = parsed.replace(tzinfo=dt.timezone.utc)
        return int(parsed.timestamp())


def _parse_duration(value: str) -> int:
    units = {"s": 1, "m": 60, "h": 3600, "d": 86400}
    v = value.strip().lower()
    if v and v[-1] in units:
        return int(float(v[:-1]) * units[v[-1]])
    return int(v)


def _addr(value: str) -> tuple[str, int]:
    host, _, port = value.rpartition(":")
    if not host or not port.isdigit():
        raise click.BadParameter(f"expected HOST:PORT, got {value!r}")
    return host, int(port)


def _load_fleet(config_path, seed, start, acceleration) -> FleetConfig:
    from dataclasses import replace

    if config_path:
        fleet = FleetConfig.from_json(Path(config_path).read_text())
        if seed is not None:
            # reseed coherently, same derivation as the default factory
            fleet.houses = [
                replace(h, seed=seed * 1000 + i + 1) for i, h in enumerate(fleet.houses)
            ]
            fleet.seed = seed
    else:
        fleet = FleetConfig.default(seed=seed if seed is not None else 1)
    if start is not None:
        fleet.start_ts = _parse_when(start)
    if acceleration is not None:
        fleet.acceleration = acceleration
    return fleet


@click.group(context_settings={"auto_envvar_prefix": "ACC", "help_option_names": ["-h", "--help"]})
@click.option("-v", "--verbose", is_flag=True, help="debug logging")
def main(verbose):
    """Desk-scale collective self-consumption monitoring stack."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
    )


@main.command()
@click.option("--config", type=click.Path(exists=True), help="fleet config JSON")
@click.option("--seed", type=int, help="override the fleet seed")
@click.option("--start", help="simulation start (Unix seconds or ISO-8601)")
@click.option("--duration", default="24h", show_default=True, help="simulated horizon")
@click.option("--acceleration", type=float, default=0.0, show_default=True,
              help="simulated/wall pacing ratio; 0 = unpaced (as fast as possible)")
@click.option("--broker", "broker_addr", help="use an external broker HOST:PORT")
@click.option("--export", "export_path", type=click.Path(), help="write the telemetry CSV here")
@click.option("--reports-dir", type=click.Path(), help="write day+1 reports (JSON) here")
@click.option("--store-dir", type=click.Path(), help="keep the telemetry store (default: temp)")
def simulate(config, seed, start, duration, acceleration, broker_addr, export_path,
             reports_dir, store_dir):
    """Run the simulated fleet and collect its telemetry."""
    fleet = _load_fleet(config, seed, start, acceleration)
    horizon_s = _parse_duration(duration)
    t_end = fleet.start_ts + horizon_s
    import tempfile

    store_path = store_dir or tempfile.mkdtemp(prefix="accmon-sim-")
    store = Store(store_path, sync=False)
    sims = {h.house_id: HouseSimulator(h, fleet.start_ts, fleet.step_s) for h in fleet.houses}

    if fleet.acceleration <= 0 and broker_addr is None:
        # unpaced: step the fleet directly, no bus in the loop
        _simulate_offline(fleet, sims, store, t_end)
    else:
        if fleet.acceleration <= 0:
            fleet.acceleration = 500.0  # pacing floor when a live bus is involved
        _simulate_networked(fleet, sims, store, t_end, broker_addr)

    click.echo(f"stored {store.point_count()} telemetry points in {store_path}")
    if export_path:
        Path(export_path).write_bytes(store.export_csv())
        click.echo(f"exported CSV to {export_path}")
    if reports_dir:
        out = Path(reports_dir)
        out.mkdir(parents=True, exist_ok=True)
        n = 0
        for hid, sim in sims.items():
            date = dt.datetime.fromtimestamp(fleet.start_ts, dt.timezone.utc).date()
            while True:
                day_end = int(
                    dt.datetime.combine(date, dt.time(), dt.timezone.utc).timestamp()
                ) + 86400
                if day_end > t_end:
                    break
                report = sim.day_report(date)
                (out / f"{hid}_{date.isoformat()}.json").write_text(report.to_json() + "\n")
                date += dt.timedelta(days=1)
                n += 1
        click.echo(f"wrote {n} day reports to {reports_dir}")
    store.close()


def _simulate_offline(fleet: FleetConfig, sims, store: Store, t_end: int) -> None:
    period = 30  # gateway refresh cadence
    seq = {hid: 0 for hid in sims}
    t = fleet.start_ts + period
    while t <= t_end:
        for hid, sim in sims.items():
            raw = sim.read_frame(t, fleet.tic_mode)
            reading = extract_reading(parse_frame(raw, fleet.tic_mode))
            seq[hid] += 1
            store.append(TelemetryPoint(house_id=hid, ts=t, seq=seq[hid], reading=reading))
        t += period
    for sim in sims.values():
        sim.advance_to(t_end)  # complete register history for day reports


def _simulate_networked(fleet, sims, store, t_end, broker_addr) -> None:
    clock = SimClock(fleet.start_ts, fleet.acceleration)
    own_broker = None
    if broker_addr:
        host, port = _addr(broker_addr)
    else:
        own_broker = Broker(port=0)
        own_broker.start()
        host, port = own_broker.host, own_broker.port

    collector = MqttClient(host, port, "sim-collector",
                           on_message=lambda t_, p: _collect(store, p))
    collector.connect()
    collector.subscribe("acc/+/telemetry")

    gateways = []
    for hid, sim in sims.items():
        cfg = GatewayConfig(house_id=hid, broker_host=host, broker_port=port,
                            refresh_period_s=30, tic_mode=fleet.tic_mode)
        gw = Gateway(
            cfg,
            tic_source=(lambda s: lambda now: s.read_frame(now, fleet.tic_mode))(sim),
            control_hook=(lambda s: lambda cmd: _apply_control(s, cmd))(sim),
            clock=clock,
        )
        gateways.append(gw.start())
    try:
        while clock.now() < t_end:
            time.sleep(0.05)
        # let in-flight publishes drain
        time.sleep(0.3)
    finally:
        for gw in gateways:
            gw.stop()
        collector.close()
        if own_broker:
            own_broker.stop()


def _collect(store: Store, payload: bytes) -> None:
    try:
        store.append(decode_telemetry(payload))
    except Exception as exc:
        log.warning("collector dropped a point: %s", exc)


def _apply_control(sim: HouseSimulator, cmd) -> None:
    on = (True if cmd.action is ControlAction.ON
          else False if cmd.action is ControlAction.OFF else None)
    sim.set_device(cmd.device, on=on, power_w=cmd.value_w)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=1883, show_default=True, type=int)
@click.option("--max-clients", default=128, show_default=True, type=int)
@click.option("--max-packet-kib", default=64, show_default=True, type=int)
def broker(host, port, max_clients, max_packet_kib):
    """Run the MQTT-subset broker standalone."""
    b = Broker(host=host, port=port,
               limits=BrokerLimits(max_packet_bytes=max_packet_kib * 1024,
                                   max_clients=max_clients))
    try:
        b.start()
    except OSError as exc:
        raise click.ClickException(f"cannot listen on {host}:{port}: {exc}")
    click.echo(f"broker listening on {host}:{b.port}")
    _wait_for_interrupt()
    b.stop()


@main.command()
@click.option("--config", type=click.Path(exists=True), help="service config JSON")
@click.option("--fleet", "fleet_path", type=click.Path(exists=True),
              help="derive the house list from a fleet config")
@click.option("--broker", "broker_addr", default="127.0.0.1:1883", show_default=True)
@click.option("--listen", default="127.0.0.1:8080", show_default=True)
@click.option("--store-dir", default="./accmon-store", show_default=True, type=click.Path())
@click.option("--static-dir", type=click.Path(), help="serve the dashboard from this directory")
def serve(config, fleet_path, broker_addr, listen, store_dir, static_dir):
    """Run the operation backend (ingest + supervision + HTTP API)."""
    if config:
        cfg = ServiceConfig.from_json(Path(config).read_text())
    else:
        houses = []
        if fleet_path:
            fleet = FleetConfig.from_json(Path(fleet_path).read_text())
            houses = [HouseEntry(house_id=h.house_id, role=h.role.value) for h in fleet.houses]
        else:
            houses = [HouseEntry(house_id=f"h{i}") for i in range(1, 10)]
        cfg = ServiceConfig(houses=houses)
    cfg.broker_host, cfg.broker_port = _addr(broker_addr)
    cfg.listen_host, cfg.listen_port = _addr(listen)
    if static_dir:
        cfg.static_dir = static_dir
    store = Store(store_dir, sync=cfg.store_sync)
    svc = Service(cfg, store)
    svc.start()
    try:
        api = ApiServer(svc).start()
    except OSError as exc:
        svc.stop()
        raise click.ClickException(f"cannot listen on {cfg.listen_host}:{cfg.listen_port}: {exc}")
    click.echo(f"service on {api.base_url} (broker {cfg.broker_host}:{cfg.broker_port})")
    _wait_for_interrupt()
    api.stop()
    svc.stop()
    store.close()


@main.command()
@click.option("--house", required=True, help="house id, e.g. h3")
@click.option("--broker", "broker_addr", default="127.0.0.1:1883", show_default=True)
@click.option("--fleet", "fleet_path", type=click.Path(exists=True),
              help="simulate this fleet's house as the TIC source")
@click.option("--capture", type=click.Path(exists=True),
              help="replay recorded TIC frames instead of simulating")
@click.option("--refresh", default=30, show_default=True, type=int)
@click.option("--acceleration", default=1.0, show_default=True, type=float)
@click.option("--token", default="", help="credentials token")
def gateway(house, broker_addr, fleet_path, capture, refresh, acceleration, token):
    """Run a single gateway standalone."""
    host, port = _addr(broker_addr)
    fleet = (FleetConfig.from_json(Path(fleet_path).read_text())
             if fleet_path else FleetConfig.default())
    clock: Clock = SimClock(fleet.start_ts, acceleration) if acceleration != 1.0 else Clock()
    start_ts = fleet.start_ts if acceleration != 1.0 else int(time.time())
    if capture:
        source = RecordedTicSource(Path(capture).read_bytes())
        hook = None
    else:
        try:
            house_cfg = fleet.house(house)
        except KeyError:
            raise click.ClickException(f"house {house!r} not in fleet config")
        sim = HouseSimulator(house_cfg, start_ts, fleet.step_s)
        source = lambda now: sim.read_frame(now, fleet.tic_mode)  # noqa: E731
        hook = lambda cmd: _apply_control(sim, cmd)  # noqa: E731
    cfg = GatewayConfig(house_id=house, broker_host=host, broker_port=port,
                        refresh_period_s=refresh, tic_mode=fleet.tic_mode, credentials=token)
    gw = Gateway(cfg, tic_source=source, control_hook=hook, clock=clock).start()
    click.echo(f"gateway {house} publishing to {host}:{port} every {refresh}s")
    _wait_for_interrupt()
    gw.stop()


@main.command()
@click.argument("csv_file", type=click.Path(exists=True))
@click.option("--from", "t0", help="window start (Unix or ISO-8601)")
@click.option("--to", "t1", help="window end")
@click.option("--scale", default="period", show_default=True,
              type=click.Choice(["30min", "period"]))
@click.option("--bucket", default=1800, show_default=True, type=int)
@click.option("--json", "as_json", is_flag=True, help="machine-readable output")
def rates(csv_file, t0, t1, scale, bucket, as_json):
    """Self-consumption / self-sufficiency over an exported dataset."""
    per_house_points = load_csv_points(Path(csv_file).read_bytes())
    if not per_house_points:
        raise click.ClickException("dataset is empty")
    all_ts = [p.ts for pts in per_house_points.values() for p in pts]
    w0 = _parse_when(t0) if t0 else min(all_ts)
    w1 = _parse_when(t1) if t1 else max(all_ts)
    if w0 >= w1:
        raise click.ClickException("need from < to")
    per_house = {
        hid: bucket_deltas(points, w0, w1, bucket)
        for hid, points in per_house_points.items()
    }
    rate_scale = RateScale.PERIOD if scale == "period" else RateScale.THIRTY_MIN
    report = rates_from_buckets(per_house, rate_scale, (w0, w1))
    if as_json:
        click.echo(json.dumps(report.to_dict()))
        return
    sc = "n/a" if report.self_consumption is None else f"{report.self_consumption:.4f}"
    ss = "n/a" if report.self_sufficiency is None else f"{report.self_sufficiency:.4f}"
    click.echo(f"window [{w0}, {w1}) at {bucket}s buckets over {len(per_house)} houses")
    click.echo(f"self-consumption: {sc}")
    click.echo(f"self-sufficiency: {ss}")


@main.command()
@click.argument("reports_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--key", default="dynamic", show_default=True,
              help="'dynamic' or 'static:<proportions.json>'")
@click.option("--json", "as_json", is_flag=True)
def allocate(reports_dir, key, as_json):
    """Monthly corrected indexes from a directory of day+1 reports."""
    from .analytics import corrected_indexes

    reports: dict[str, list[DayPlusOneReport]] = {}
    for path in sorted(Path(reports_dir).glob("*.json")):
        report = DayPlusOneReport.from_json(path.read_text())
        reports.setdefault(report.house_id, []).append(report)
    if not reports:
        raise click.ClickException(f"no report JSON files in {reports_dir}")
    if key == "dynamic":
        dist_key = DistributionKey(kind=KeyKind.DYNAMIC)
    elif key.startswith("static:"):
        props = json.loads(Path(key.split(":", 1)[1]).read_text())
        dist_key = DistributionKey(kind=KeyKind.STATIC, proportions=props)
    else:
        raise click.BadParameter("key must be 'dynamic' or 'static:<file>'")
    try:
        monthly = corrected_indexes(dist_key, reports)
    except Exception as exc:
        raise click.ClickException(str(exc))
    result = monthly.to_dict()
    if as_json:
        click.echo(json.dumps(result))
        return
    click.echo(f"days: {result['days'][0]} .. {result['days'][-1]}")
    for house, row in sorted(result["per_consumer"].items()):
        click.echo(
            f"  {house}: consumed {row['consumption_wh']} Wh, "
            f"locally supplied {row['self_consumed_wh']:.1f} Wh, "
            f"supplier-billed {row['residual_wh']:.1f} Wh"
        )
    click.echo(f"surplus to grid: {result['surplus_wh']:.1f} Wh")


@main.command()
@click.argument("csv_file", type=click.Path(exists=True))
@click.option("--broker", "broker_addr", default="127.0.0.1:1883", show_default=True)
@click.option("--speed", default=60.0, show_default=True, type=float,
              help="replay speed factor over recorded time")
@click.option("--loop", is_flag=True, help="restart from the top when done")
def replay(csv_file, broker_addr, speed, loop):
    """Republish a recorded dataset onto the bus (dashboard demos)."""
    host, port = _addr(broker_addr)
    per_house = load_csv_points(Path(csv_file).read_bytes())
    points = sorted(
        (p for pts in per_house.values() for p in pts), key=lambda p: (p.ts, p.house_id)
    )
    if not points:
        raise click.ClickException("dataset is empty")
    client = MqttClient(host, port, "replay")
    try:
        client.connect()
    except Exception as exc:
        raise click.ClickException(f"cannot reach broker {host}:{port}: {exc}")
    click.echo(f"replaying {len(points)} points at {speed}x")
    try:
        while True:
            t_origin = points[0].ts
            wall_origin = time.time()
            for p in points:
                delay = (p.ts - t_origin) / speed - (time.time() - wall_origin)
                if delay > 0:
                    time.sleep(delay)
                client.publish(f"acc/{p.house_id}/telemetry", encode_telemetry(p))
            if not loop:
                break
    except KeyboardInterrupt:
        pass
    finally:
        client.close()


def _wait_for_interrupt() -> None:
    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *a: stop.set())
    signal.signal(signal.SIGTERM, lambda *a: stop.set())
    while not stop.wait(0.5):
        pass


if __name__ == "__main__":
    sys.exit(main())
