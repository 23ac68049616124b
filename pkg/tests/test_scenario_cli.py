import csv
import json
from pathlib import Path

import numpy as np
import pytest

from evcoord import cli, scenario
from evcoord.flex import compute_flexibility


def files(d: Path) -> dict:
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def ref_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("ref")
    assert cli.main(["generate", "--seed", "1", "--out-dir", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def null_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("null")
    assert cli.main(["generate", "--null", "--out-dir", str(d)]) == 0
    return d


def test_reference_fleet_ratios():
    scn = scenario.reference_scenario(1)
    f = scn.fleets
    assert len(f["CS1"].sessions) == 30
    assert len(f["CS1"].sessions) / f["CS1"].n_chargers == 1.5
    assert len(f["CS4"].sessions) / f["CS4"].n_chargers == 2.0
    assert [len(f[s].sessions) for s in ("CS2", "CS3")] == [20, 30]


def test_reference_constants():
    scn = scenario.reference_scenario(1)
    caps = [s.battery_capacity_kwh for s in scn.stations]
    assert caps == [100.0, 150.0, 200.0, 200.0]
    assert [s.p_b_chg_max_kw for s in scn.stations] == [30.0, 45.0, 60.0, 60.0]
    ev = scn.fleets["CS2"].sessions[0]
    assert (ev.capacity_kwh, ev.soc_init, ev.soc_req, ev.p_chg_kw) == (40.0, 0.2, 0.5, 6.6)
    assert np.all(scn.price_sell == 0.01)
    assert scn.price_buy.min() == pytest.approx(0.05) and scn.price_buy.max() == pytest.approx(0.20)


def test_fleet_windows_follow_blocks():
    scn = scenario.reference_scenario(3)
    cs3 = scn.fleets["CS3"].sessions
    # slot t covers clock hour t-1
    assert all(5 <= ev.t_arrive and ev.t_depart <= 15 for ev in cs3[:15])
    assert all(15 <= ev.t_arrive and ev.t_depart <= 24 for ev in cs3[15:])


def test_pv_profiles():
    specs, _ = scenario.reference_specs()
    a = scenario.generate_pv_profiles(specs, 5)
    b = scenario.generate_pv_profiles(specs, 5)
    c = scenario.generate_pv_profiles(specs, 6)
    for s in specs:
        assert a[s.station_id][0] == 0.0
        assert a[s.station_id].max() <= s.pv_peak_kw
        assert a[s.station_id].max() > 0.5 * s.pv_peak_kw
        assert np.array_equal(a[s.station_id], b[s.station_id])
    assert not np.array_equal(a["CS1"], c["CS1"])


def test_block_validation():
    with pytest.raises(scenario.ConfigError):
        scenario.FleetGenSpec("X", [(20, 26, 3)])
    with pytest.raises(scenario.ConfigError):
        scenario.generate_fleet(scenario.FleetGenSpec("X", [(3, 4, 2)]), np.random.default_rng(0))


def test_generate_is_byte_identical(tmp_path, ref_dir):
    assert cli.main(["generate", "--seed", "1", "--out-dir", str(tmp_path)]) == 0
    assert files(tmp_path) == files(ref_dir)


def test_files_round_trip(ref_dir):
    mem = scenario.reference_scenario(1)
    disk = scenario.load_scenario(ref_dir / "scenario.toml")
    assert [s.station_id for s in disk.stations] == [s.station_id for s in mem.stations]
    for a, b in zip(mem.stations, disk.stations):
        assert a.bus == b.bus and a.c_batt == b.c_batt and a.p_g_max_kw == b.p_g_max_kw
        assert np.array_equal(a.pv_profile_kw, b.pv_profile_kw)
    for sid in mem.fleets:
        assert mem.fleets[sid].sessions == disk.fleets[sid].sessions
        assert mem.fleets[sid].n_chargers == disk.fleets[sid].n_chargers
    assert np.array_equal(mem.price_buy, disk.price_buy)
    assert disk.config.load_profile == mem.config.load_profile
    na, nb = mem.network(), disk.network()
    assert np.array_equal(na.r, nb.r) and np.array_equal(na.p_load, nb.p_load)


def test_resave_is_byte_identical(tmp_path, ref_dir):
    scenario.save_scenario(scenario.load_scenario(ref_dir / "scenario.toml"), tmp_path)
    assert files(tmp_path) == files(ref_dir)


def test_generator_config(tmp_path):
    p = tmp_path / "gen.toml"
    p.write_text('seed = 4\n[generator]\nkind = "reference"\nplacement = "far"\n')
    scn = scenario.load_scenario(p)
    assert [s.bus for s in scn.stations] == list(scenario.FAR_BUSES)
    again = scenario.load_scenario(p, seed=4)
    assert again.fleets["CS1"].sessions == scn.fleets["CS1"].sessions
    other = scenario.load_scenario(p, seed=5)
    assert other.fleets["CS1"].sessions != scn.fleets["CS1"].sessions


@pytest.mark.parametrize(
    "text",
    [
        "bogus = 1\n",
        "[files]\nstations = 'missing.csv'\nfleet = 'f.csv'\nprices = 'p.csv'\n",
        "[generator]\nkind = 'other'\n",
        "[coordination]\nrho = -1.0\n[generator]\nkind = 'null'\n",
        "seed = [\n",
        "[flex]\nw = 0.1\n",
    ],
)
def test_bad_config_is_usage_error(tmp_path, capsys, text):
    p = tmp_path / "bad.toml"
    p.write_text(text)
    code = cli.main(["flex", "--config", str(p), "--out-dir", str(tmp_path / "o")])
    assert code == cli.EXIT_USAGE
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["exit_code"] == 2 and err["message"]


def test_missing_config_flag(capsys):
    assert cli.main(["coordinate"]) == cli.EXIT_USAGE
    assert json.loads(capsys.readouterr().err)["error"] == "CommandError"


def test_bad_flag_value(ref_dir, tmp_path):
    assert cli.main(["coordinate", "--config", str(ref_dir / "scenario.toml"), "--rho", "0", "--out-dir", str(tmp_path)]) == 2


def test_flex_width_ordering(ref_dir, tmp_path):
    cfg = str(ref_dir / "scenario.toml")
    assert cli.main(["flex", "--config", cfg, "--w", "0", "--out-dir", str(tmp_path / "w0")]) == 0
    assert cli.main(["flex", "--config", cfg, "--w", "0.01", "--out-dir", str(tmp_path / "w1")]) == 0
    a = json.loads((tmp_path / "w0" / "flex_summary.json").read_text())["stations"]
    b = json.loads((tmp_path / "w1" / "flex_summary.json").read_text())["stations"]
    for sid in a:
        assert b[sid]["total_width_kw"] <= a[sid]["total_width_kw"] + 1e-6
        env = rows(tmp_path / "w1" / f"envelope_{sid}.csv")
        assert len(env) == 24
        assert all(float(r["lower_kw"]) <= float(r["upper_kw"]) + 1e-9 for r in env)


def test_disaggregate_command(ref_dir, tmp_path):
    scn = scenario.load_scenario(ref_dir / "scenario.toml")
    reg = compute_flexibility(scn.fleets["CS2"], w=0.01)
    traj = 0.5 * (reg.lower_kw + reg.upper_kw)
    path = tmp_path / "traj.csv"
    scenario.write_csv(path, ["t", "p_kw"], [[t + 1, traj[t]] for t in range(24)])
    out = tmp_path / "o"
    assert cli.main(["disaggregate", "--config", str(ref_dir / "scenario.toml"), "--station", "CS2", "--trajectory", str(path), "--out-dir", str(out)]) == 0
    viol = json.loads((out / "violations_CS2.json").read_text())
    assert viol["ok"] and viol["max_violation"] <= 1e-6
    disp = rows(out / "dispatch_CS2.csv")
    assert len(disp) == 20 * 24


def test_disaggregate_rejects_out_of_region(ref_dir, tmp_path, capsys):
    path = tmp_path / "traj.csv"
    scenario.write_csv(path, ["t", "p_kw"], [[t + 1, 1e4] for t in range(24)])
    code = cli.main(["disaggregate", "--config", str(ref_dir / "scenario.toml"), "--station", "CS2", "--trajectory", str(path), "--out-dir", str(tmp_path)])
    assert code == cli.EXIT_USAGE
    assert json.loads(capsys.readouterr().err)["error"] == "OutOfRegionError"


def test_coordinate_null_scenario(null_dir, tmp_path):
    assert cli.main(["coordinate", "--config", str(null_dir / "scenario.toml"), "--out-dir", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["converged"]
    assert abs(summary["settlement"]["total"]) <= 1e-3
    settle = {(r["entity"], r["term"]): float(r["value"]) for r in rows(tmp_path / "settlement.csv")}
    assert settle[("CS1", "C_g")] == -settle[("DSO", "C_g[CS1]")]


def test_coordinate_non_convergence_exit_code(ref_dir, tmp_path, capsys):
    code = cli.main(["coordinate", "--config", str(ref_dir / "scenario.toml"), "--max-iter", "2", "--out-dir", str(tmp_path)])
    assert code == cli.EXIT_NOT_CONVERGED
    assert json.loads(capsys.readouterr().err)["exit_code"] == 3
    assert len(rows(tmp_path / "trace.csv")) == 2


@pytest.fixture(scope="module")
def compare_dir(ref_dir, tmp_path_factory):
    d = tmp_path_factory.mktemp("cmp")
    assert cli.main(["compare", "--config", str(ref_dir / "scenario.toml"), "--out-dir", str(d), "--figures"]) == 0
    return d


def test_compare_table(compare_dir):
    table = rows(compare_dir / "comparison.csv")
    assert list(table[0]) == ["entity", "term", "baseline", "proposed", "reduction"]
    total = next(r for r in table if r["entity"] == "system" and r["term"] == "total")
    b, p = float(total["baseline"]), float(total["proposed"])
    assert float(total["reduction"]) == pytest.approx((b - p) / b)
    assert float(total["reduction"]) > 0
    summary = json.loads((compare_dir / "summary.json").read_text())
    assert summary["reduction"] == pytest.approx(float(total["reduction"]))
    for name in ("costs.png", "losses.png"):
        assert (compare_dir / name).read_bytes()[:4] == b"\x89PNG"


def test_compare_is_byte_identical(ref_dir, compare_dir, tmp_path):
    assert cli.main(["compare", "--config", str(ref_dir / "scenario.toml"), "--out-dir", str(tmp_path), "--figures"]) == 0
    assert files(tmp_path) == files(compare_dir)


def test_coordinate_then_audit(ref_dir, tmp_path):
    cfg = str(ref_dir / "scenario.toml")
    out = tmp_path / "run"
    assert cli.main(["coordinate", "--config", cfg, "--out-dir", str(out), "--figures"]) == 0
    for name in ("trace.csv", "settlement.csv", "prices.csv", "losses.csv", "decisions.csv", "dispatch_CS1.csv", "residuals.png"):
        assert (out / name).exists()
    assert cli.main(["audit", "--config", cfg, "--state-dir", str(out / "state"), "--out-dir", str(tmp_path / "a")]) == 0
    audit = json.loads((tmp_path / "a" / "audit.json").read_text())
    assert audit["ok"]
    assert audit["max_gap"] <= 1e-6


def test_audit_flags_tampered_state(ref_dir, tmp_path):
    cfg = str(ref_dir / "scenario.toml")
    out = tmp_path / "run"
    assert cli.main(["centralized", "--config", cfg, "--out-dir", str(out)]) == 0
    bus = out / "state" / "state_bus.csv"
    recs = rows(bus)
    recs[0 if recs[0]["bus"] != "1" else 1]["v_pu2"] = "0.5"
    scenario.write_table(bus, recs)
    assert cli.main(["audit", "--config", cfg, "--state-dir", str(out / "state"), "--out-dir", str(tmp_path / "a")]) == 0
    assert not json.loads((tmp_path / "a" / "audit.json").read_text())["ok"]
