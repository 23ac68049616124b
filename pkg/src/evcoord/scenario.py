"""Scenario configuration, seeded generation and the CSV file formats."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from . import grid
from .coordination import System
from .flex import EVSession, StationFleet, compute_flexibility

HORIZON = 24
NEAR_BUSES = (3, 4, 19, 23)
FAR_BUSES = (7, 22, 25, 33)

# reference fleet blocks: (start hour, end hour, count)
REFERENCE_BLOCKS = {
    "CS1": [(6, 22, 30)],
    "CS2": [(6, 22, 20)],
    "CS3": [(4, 14, 15), (14, 23, 15)],
    "CS4": [(2, 8, 10), (8, 14, 10), (14, 20, 10), (20, 23, 10)],
}
REFERENCE_BATTERY = {"CS1": (100.0, 30.0), "CS2": (150.0, 45.0), "CS3": (200.0, 60.0), "CS4": (200.0, 60.0)}
REFERENCE_PV_PEAK = {"CS1": 60.0, "CS2": 80.0, "CS3": 100.0, "CS4": 100.0}

STATION_FIELDS = [
    "station_id", "bus", "battery_capacity_kwh", "p_b_chg_max_kw", "p_b_dis_max_kw", "eta_c", "eta_d",
    "soc_b_min", "soc_b_max", "c_batt", "c_dissat", "p_g_min_kw", "p_g_max_kw", "n_chargers",
]
FLEET_FIELDS = [
    "id", "station", "t_arrive", "t_depart", "soc_init", "soc_req", "soc_min", "soc_max", "capacity_kwh", "p_chg_kw",
]


class ConfigError(ValueError):
    pass


@dataclass
class FleetGenSpec:
    """Arrival/departure blocks for one station; hours are clock hours 0..24."""

    station_id: str
    blocks: list
    soc_init: float = 0.2
    soc_req: float = 0.5
    soc_min: float = 0.1
    soc_max: float = 0.9
    capacity_kwh: float = 40.0
    p_chg_kw: float = 6.6

    def __post_init__(self):
        for start, end, count in self.blocks:
            if not (0 <= start < end <= HORIZON) or count < 0:
                raise ConfigError(f"{self.station_id}: block ({start}, {end}, {count}) outside the day")

    @property
    def count(self) -> int:
        return sum(int(c) for _, _, c in self.blocks)


@dataclass
class StationSpec:
    """Station data apart from the PV profile, which is generated or read."""

    station_id: str
    bus: int
    battery_capacity_kwh: float
    p_b_max_kw: float
    pv_peak_kw: float
    n_chargers: int = 20


@dataclass
class ScenarioConfig:
    path: Path | None = None
    seed: int = 1
    horizon: int = HORIZON
    dt_hours: float = 1.0
    files: dict = field(default_factory=dict)
    w: float = 0.01
    v2g: bool = True
    rho: float = 0.01
    delta: float = 1e-3
    max_iter: int = 200
    load_profile: list | None = None
    s_base_kva: float = 1000.0
    v_base_kv: float = 12.66
    slack_bus: int = 1
    generator: str | None = None
    placement: str = "near"

    def resolve(self, key: str) -> Path | None:
        name = self.files.get(key)
        if not name:
            return None
        p = Path(name)
        if not p.is_absolute() and self.path is not None:
            p = self.path.parent / p
        return p

    def to_dict(self) -> dict:
        out = {
            "seed": self.seed,
            "horizon": {"slots": self.horizon, "dt_hours": self.dt_hours},
            "flex": {"w": self.w, "v2g": self.v2g},
            "coordination": {"rho": self.rho, "delta": self.delta, "max_iter": self.max_iter},
            "network": {"s_base_kva": self.s_base_kva, "v_base_kv": self.v_base_kv, "slack_bus": self.slack_bus},
        }
        if self.load_profile is not None:
            out["network"]["load_profile"] = [float(x) for x in self.load_profile]
        if self.files:
            out["files"] = dict(self.files)
        if self.generator:
            out["generator"] = {"kind": self.generator, "placement": self.placement}
        return out


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from None
    return config_from_dict(raw, path)


def config_from_dict(raw: dict, path: Path | None = None) -> ScenarioConfig:
    known = {"seed", "horizon", "flex", "coordination", "network", "files", "generator"}
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"unknown config keys: {sorted(extra)}")
    hz, fx, co, nw = raw.get("horizon", {}), raw.get("flex", {}), raw.get("coordination", {}), raw.get("network", {})
    gen = raw.get("generator", {})
    cfg = ScenarioConfig(
        path=path,
        seed=int(raw.get("seed", 1)),
        horizon=int(hz.get("slots", HORIZON)),
        dt_hours=float(hz.get("dt_hours", 1.0)),
        files=dict(raw.get("files", {})),
        w=float(fx.get("w", 0.01)),
        v2g=bool(fx.get("v2g", True)),
        rho=float(co.get("rho", 0.01)),
        delta=float(co.get("delta", 1e-3)),
        max_iter=int(co.get("max_iter", 200)),
        load_profile=nw.get("load_profile"),
        s_base_kva=float(nw.get("s_base_kva", 1000.0)),
        v_base_kv=float(nw.get("v_base_kv", 12.66)),
        slack_bus=int(nw.get("slack_bus", 1)),
        generator=gen.get("kind"),
        placement=gen.get("placement", "near"),
    )
    if cfg.horizon < 1 or cfg.dt_hours <= 0:
        raise ConfigError("horizon must have at least one slot of positive length")
    if cfg.w < 0 or cfg.rho <= 0 or cfg.delta <= 0 or cfg.max_iter < 1:
        raise ConfigError("need w >= 0, rho > 0, delta > 0, max_iter >= 1")
    if cfg.generator not in (None, "reference", "null"):
        raise ConfigError(f"unknown generator kind {cfg.generator!r}")
    if cfg.generator is None:
        for key in ("stations", "fleet", "prices"):
            p = cfg.resolve(key)
            if p is None:
                raise ConfigError(f"config needs files.{key} or a [generator] table")
            if not p.exists():
                raise ConfigError(f"referenced file {p} does not exist")
    for key in ("network_bus", "network_line"):
        p = cfg.resolve(key)
        if p is not None and not p.exists():
            raise ConfigError(f"referenced file {p} does not exist")
    if cfg.placement not in ("near", "far"):
        raise ConfigError("generator placement must be 'near' or 'far'")
    return cfg


# --- generators -----------------------------------------------------------


def reference_specs(placement: str = "near") -> tuple[list[StationSpec], list[FleetGenSpec]]:
    buses = NEAR_BUSES if placement == "near" else FAR_BUSES
    stations, fleets = [], []
    for k, sid in enumerate(REFERENCE_BLOCKS):
        cap, pmax = REFERENCE_BATTERY[sid]
        stations.append(StationSpec(sid, buses[k], cap, pmax, REFERENCE_PV_PEAK[sid]))
        fleets.append(FleetGenSpec(sid, [list(b) for b in REFERENCE_BLOCKS[sid]]))
    return stations, fleets


def price_profile(horizon: int = HORIZON, low: float = 0.05, high: float = 0.20) -> np.ndarray:
    """Two-peak diurnal buy price (morning and evening), scaled into ``[low, high]``."""
    h = np.arange(horizon) * 24.0 / horizon
    shape = 0.8 * np.exp(-((h - 8.0) ** 2) / (2 * 2.0**2)) + np.exp(-((h - 18.5) ** 2) / (2 * 2.0**2))
    shape = (shape - shape.min()) / (shape.max() - shape.min())
    return np.round(low + (high - low) * shape, 4)


def load_shape(horizon: int = HORIZON) -> np.ndarray:
    """Diurnal base-load multiplier on the nominal feeder load, peaking at 0.6."""
    h = np.arange(horizon) * 24.0 / horizon
    shape = 0.35 + 0.15 * np.exp(-((h - 9.0) ** 2) / 8.0) + 0.25 * np.exp(-((h - 19.0) ** 2) / 6.0)
    return np.round(shape / shape.max() * 0.6, 4)


def generate_pv_profiles(stations, seed: int, horizon: int = HORIZON, sunrise: float = 6.0, sunset: float = 19.0) -> dict:
    """Bell-shaped daytime PV per station with seeded cloud attenuation."""
    rng = np.random.default_rng([seed, 7])
    h = np.arange(horizon) * 24.0 / horizon
    noon = 0.5 * (sunrise + sunset)
    bell = np.exp(-((h - noon) ** 2) / (2 * ((sunset - sunrise) / 5.0) ** 2))
    bell[(h < sunrise) | (h >= sunset)] = 0.0
    out = {}
    for s in stations:
        cloud = rng.uniform(0.75, 1.0, size=horizon)
        out[s.station_id] = np.round(s.pv_peak_kw * bell * cloud, 3)
    return out


def generate_fleet(spec: FleetGenSpec, rng: np.random.Generator, horizon: int = HORIZON) -> list[EVSession]:
    """Arrivals early in each block, departures late, with enough dwell to charge."""
    need_h = (spec.soc_req - spec.soc_init) * spec.capacity_kwh / spec.p_chg_kw
    min_dwell = max(1, math.ceil(need_h - 1e-9))
    out = []
    for start, end, count in spec.blocks:
        span = end - start
        if span < min_dwell:
            raise ConfigError(f"{spec.station_id}: block {start}-{end} is shorter than the charging need")
        slack = max(span // 3, 0)
        for _ in range(int(count)):
            a = int(rng.integers(start, start + min(slack, span - min_dwell) + 1))
            d_lo = max(a + min_dwell, end - slack)
            d = int(rng.integers(d_lo, end + 1))
            k = len(out) + 1
            out.append(
                EVSession(
                    id=f"{spec.station_id}-EV{k:02d}",
                    t_arrive=a + 1,
                    t_depart=min(d + 1, horizon),
                    soc_init=spec.soc_init,
                    soc_req=spec.soc_req,
                    soc_min=spec.soc_min,
                    soc_max=spec.soc_max,
                    capacity_kwh=spec.capacity_kwh,
                    p_chg_kw=spec.p_chg_kw,
                    station=spec.station_id,
                )
            )
    return out


@dataclass(eq=False)
class Scenario:
    config: ScenarioConfig
    stations: list
    fleets: dict
    price_buy: np.ndarray
    price_sell: np.ndarray
    loss_price: np.ndarray
    bus_records: list
    line_records: list

    def network(self) -> grid.NetworkModel:
        cfg = self.config
        return grid.build_network(
            self.bus_records,
            self.line_records,
            {s.station_id: s.bus for s in self.stations},
            self.price_buy,
            self.price_sell,
            loss_price=self.loss_price,
            load_profile=cfg.load_profile,
            s_base_kva=cfg.s_base_kva,
            v_base_kv=cfg.v_base_kv,
            slack_bus=cfg.slack_bus,
            station_p_bounds_kw={s.station_id: (s.p_g_min_kw, s.p_g_max_kw) for s in self.stations},
            dt_hours=cfg.dt_hours,
        )

    def regions(self, w: float | None = None) -> dict:
        w = self.config.w if w is None else w
        return {sid: compute_flexibility(f, w=w) for sid, f in self.fleets.items()}

    def system(self, w: float | None = None) -> System:
        return System(self.stations, self.regions(w), self.network(), dict(self.fleets))


def _station_params(spec: StationSpec, pv) -> "StationParams":
    from .station import StationParams

    return StationParams(
        station_id=spec.station_id,
        bus=spec.bus,
        battery_capacity_kwh=spec.battery_capacity_kwh,
        p_b_chg_max_kw=spec.p_b_max_kw,
        p_b_dis_max_kw=spec.p_b_max_kw,
        pv_profile_kw=pv,
    )


def reference_scenario(seed: int = 1, placement: str = "near", config: ScenarioConfig | None = None) -> Scenario:
    """In-memory reference setup: four stations on the 33-bus feeder."""
    cfg = config or ScenarioConfig(seed=seed, generator="reference", placement=placement)
    if cfg.load_profile is None:
        cfg.load_profile = [float(x) for x in load_shape(cfg.horizon)]
    specs, fleet_specs = reference_specs(placement)
    pv = generate_pv_profiles(specs, seed, cfg.horizon)
    rng = np.random.default_rng([seed, 11])
    fleets = {}
    n_chg = {s.station_id: s.n_chargers for s in specs}
    for fs in fleet_specs:
        fleets[fs.station_id] = StationFleet(
            fs.station_id, tuple(generate_fleet(fs, rng, cfg.horizon)), n_chg[fs.station_id], cfg.horizon, cfg.dt_hours, cfg.v2g
        )
    stations = [_station_params(s, pv[s.station_id]) for s in specs]
    buy = price_profile(cfg.horizon)
    bus, line = _network_tables(cfg)
    return Scenario(cfg, stations, fleets, buy, np.full(cfg.horizon, 0.01), buy.copy(), bus, line)


def null_scenario(config: ScenarioConfig | None = None) -> Scenario:
    """One station, no vehicles, no PV, no base load."""
    cfg = config or ScenarioConfig(generator="null")
    cfg.load_profile = [0.0] * cfg.horizon
    spec = StationSpec("CS1", 2, 100.0, 30.0, 0.0)
    stations = [_station_params(spec, np.zeros(cfg.horizon))]
    fleets = {"CS1": StationFleet("CS1", (), 20, cfg.horizon, cfg.dt_hours, cfg.v2g)}
    buy = price_profile(cfg.horizon)
    bus, line = _network_tables(cfg)
    return Scenario(cfg, stations, fleets, buy, np.full(cfg.horizon, 0.01), buy.copy(), bus, line)


def _network_tables(cfg: ScenarioConfig):
    pb, pl = cfg.resolve("network_bus"), cfg.resolve("network_line")
    if pb is not None and pl is not None:
        return grid.read_table(pb), grid.read_table(pl)
    return grid.ieee33_tables()


def load_scenario(cfg: ScenarioConfig | str | os.PathLike, seed: int | None = None) -> Scenario:
    """Materialize a scenario from a config; ``seed`` overrides the generator seed."""
    if not isinstance(cfg, ScenarioConfig):
        cfg = load_config(cfg)
    if seed is not None:
        cfg.seed = int(seed)
    if cfg.generator == "reference":
        return reference_scenario(cfg.seed, cfg.placement, cfg)
    if cfg.generator == "null":
        return null_scenario(cfg)
    stations, n_chg = read_stations(cfg.resolve("stations"))
    sessions = read_fleet(cfg.resolve("fleet"))
    buy, sell, loss = read_prices(cfg.resolve("prices"))
    if len(buy) != cfg.horizon:
        raise ConfigError(f"price file has {len(buy)} slots, horizon is {cfg.horizon}")
    fleets = {}
    for s in stations:
        if s.horizon != cfg.horizon:
            raise ConfigError(f"station {s.station_id}: PV profile has {s.horizon} slots, horizon is {cfg.horizon}")
        mine = tuple(ev for ev in sessions if ev.station == s.station_id)
        fleets[s.station_id] = StationFleet(s.station_id, mine, n_chg[s.station_id], cfg.horizon, cfg.dt_hours, cfg.v2g)
    orphans = {ev.station for ev in sessions} - set(fleets)
    if orphans:
        raise ConfigError(f"fleet references unknown stations {sorted(orphans)}")
    bus, line = _network_tables(cfg)
    return Scenario(cfg, stations, fleets, buy, sell, loss, bus, line)


# --- file formats ---------------------------------------------------------


def fmt(x) -> str:
    """Shortest round-tripping text for numbers; ints stay ints."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if x == 0.0:
            return "0.0"
        return repr(x)
    return str(x)


def write_csv(path, header, rows):
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    for row in rows:
        wr.writerow([fmt(v) for v in row])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def read_rows(path) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
    except FileNotFoundError:
        raise ConfigError(f"file {path} not found") from None


def write_stations(path, stations, fleets):
    T = stations[0].horizon if stations else 0
    header = STATION_FIELDS + [f"pv_{t}" for t in range(1, T + 1)]
    rows = []
    for s in stations:
        row = [getattr(s, f) for f in STATION_FIELDS[:-1]] + [fleets[s.station_id].n_chargers]
        rows.append(row + list(s.pv_profile_kw))
    write_csv(path, header, rows)


def read_stations(path):
    from .station import StationParams

    out, n_chg = [], {}
    for rec in read_rows(path):
        try:
            pv_keys = sorted((k for k in rec if k.startswith("pv_")), key=lambda k: int(k[3:]))
            kw = {f: float(rec[f]) for f in STATION_FIELDS[2:-1]}
            s = StationParams(
                station_id=rec["station_id"],
                bus=int(rec["bus"]),
                pv_profile_kw=np.array([float(rec[k]) for k in pv_keys]),
                **kw,
            )
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"station file {path}: bad record ({exc})") from None
        out.append(s)
        n_chg[s.station_id] = int(rec.get("n_chargers") or 20)
    if len({s.station_id for s in out}) != len(out):
        raise ConfigError(f"station file {path}: duplicate station ids")
    return out, n_chg


def write_fleet(path, fleets):
    rows = []
    for f in fleets.values():
        for ev in f.sessions:
            rows.append([getattr(ev, k) for k in FLEET_FIELDS])
    write_csv(path, FLEET_FIELDS, rows)


def read_fleet(path) -> list[EVSession]:
    out = []
    for rec in read_rows(path):
        try:
            out.append(
                EVSession(
                    id=rec["id"],
                    station=rec["station"],
                    t_arrive=int(rec["t_arrive"]),
                    t_depart=int(rec["t_depart"]),
                    **{k: float(rec[k]) for k in FLEET_FIELDS[4:]},
                )
            )
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"fleet file {path}: bad record ({exc})") from None
    return out


def write_prices(path, buy, sell, loss):
    rows = [[t + 1, buy[t], sell[t], loss[t]] for t in range(len(buy))]
    write_csv(path, ["t", "price_buy", "price_sell", "loss_price"], rows)


def read_prices(path):
    recs = read_rows(path)
    try:
        recs.sort(key=lambda r: int(r["t"]))
        buy = np.array([float(r["price_buy"]) for r in recs])
        sell = np.array([float(r["price_sell"]) for r in recs])
        loss = np.array([float(r.get("loss_price") or r["price_buy"]) for r in recs])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"price file {path}: bad record ({exc})") from None
    return buy, sell, loss


def write_table(path, records):
    header = list(records[0])
    write_csv(path, header, [[r[h] for h in header] for r in records])


def save_scenario(scn: Scenario, out_dir) -> Path:
    """Write every input file plus a config that references them."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_stations(out / "stations.csv", scn.stations, scn.fleets)
    write_fleet(out / "fleet.csv", scn.fleets)
    write_prices(out / "prices.csv", scn.price_buy, scn.price_sell, scn.loss_price)
    write_table(out / "network_bus.csv", scn.bus_records)
    write_table(out / "network_line.csv", scn.line_records)
    cfg = ScenarioConfig(
        seed=scn.config.seed,
        horizon=scn.config.horizon,
        dt_hours=scn.config.dt_hours,
        w=scn.config.w,
        v2g=scn.config.v2g,
        rho=scn.config.rho,
        delta=scn.config.delta,
        max_iter=scn.config.max_iter,
        load_profile=scn.config.load_profile,
        s_base_kva=scn.config.s_base_kva,
        v_base_kv=scn.config.v_base_kv,
        slack_bus=scn.config.slack_bus,
        files={
            "stations": "stations.csv",
            "fleet": "fleet.csv",
            "prices": "prices.csv",
            "network_bus": "network_bus.csv",
            "network_line": "network_line.csv",
        },
    )
    path = out / "scenario.toml"
    with open(path, "wb") as fh:
        tomli_w.dump(cfg.to_dict(), fh)
    return path


def generate_reference_scenario(seed: int = 1, out_dir=None, placement: str = "near"):
    """Reference four-station scenario; written to ``out_dir`` when given."""
    scn = reference_scenario(seed, placement)
    if out_dir is None:
        return scn.config, scn
    path = save_scenario(scn, out_dir)
    return load_config(path), scn
