"""CSV/JSON artifacts for flexibility, coordination and settlement results."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import grid
from .coordination import SettlementReport
from .flex import EVDispatch, FlexibilityRegion, ViolationReport
from .scenario import ConfigError, read_rows, write_csv


def write_json(path, payload):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialize {type(x).__name__}")


def write_envelope(path, region: FlexibilityRegion):
    rows = [[t + 1, lo, hi, hi - lo] for t, (lo, hi) in enumerate(zip(region.lower_kw, region.upper_kw))]
    write_csv(path, ["t", "lower_kw", "upper_kw", "width_kw"], rows)


def read_envelope(path) -> tuple[np.ndarray, np.ndarray]:
    recs = sorted(read_rows(path), key=lambda r: int(r["t"]))
    return np.array([float(r["lower_kw"]) for r in recs]), np.array([float(r["upper_kw"]) for r in recs])


def read_trajectory(path) -> np.ndarray:
    """Aggregate trajectory file with columns ``t, p_kw``."""
    try:
        recs = sorted(read_rows(path), key=lambda r: int(r["t"]))
        return np.array([float(r["p_kw"]) for r in recs])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"trajectory file {path}: bad record ({exc})") from None


def write_dispatch(path, dispatch: EVDispatch):
    rows = []
    for v, ev in enumerate(dispatch.session_ids):
        for t in range(dispatch.power.shape[1]):
            rows.append([ev, t + 1, dispatch.power[v, t], dispatch.status[v, t], dispatch.soc[v, t]])
    write_csv(path, ["ev", "t", "power_kw", "status", "soc"], rows)


def violation_payload(report: ViolationReport) -> dict:
    return {"max_violation": report.max_violation, "ok": report.ok, "tol": report.tol, "families": dict(report.families)}


def settlement_rows(rep: SettlementReport) -> list:
    rows = []
    for sid, c in rep.stations.items():
        rows += [(sid, "C_g", c.C_g), (sid, "C_b", c.C_b), (sid, "C_ev", c.C_ev), (sid, "C_i", c.total)]
    rows += [("DSO", "C_bus1", rep.C_bus1), ("DSO", "C_loss", rep.C_loss)]
    rows += [("DSO", f"C_g[{sid}]", v) for sid, v in rep.dso_C_g.items()]
    rows += [("DSO", "C_dso", rep.C_dso), ("system", "total", rep.total)]
    return rows


def write_settlement(path, rep: SettlementReport):
    write_csv(path, ["entity", "term", "value"], settlement_rows(rep))


def write_comparison(path, baseline: SettlementReport, proposed: SettlementReport, zero_tol: float = 1e-6):
    """Side-by-side settlement; the reduction is left empty for terms that are zero ($) in the baseline."""
    rows = []
    for (ent, term, b), (_, _, p) in zip(settlement_rows(baseline), settlement_rows(proposed)):
        red = (b - p) / abs(b) if abs(b) > zero_tol else ""
        rows.append([ent, term, b, p, red])
    write_csv(path, ["entity", "term", "baseline", "proposed", "reduction"], rows)


def write_trace(path, trace, station_ids):
    header = ["k", "r", "s", "C_dso"] + [f"C_{sid}" for sid in station_ids]
    rows = [[st.k, st.residual, st.schedule_residual, st.dso_cost["C_dso"]] + [st.station_cost[s] for s in station_ids] for st in trace]
    write_csv(path, header, rows)


def write_prices(path, prices: dict):
    sids = list(prices)
    T = len(next(iter(prices.values()))) if prices else 0
    write_csv(path, ["t"] + sids, [[t + 1] + [prices[s][t] for s in sids] for t in range(T)])


def write_losses(path, state: grid.NetworkState, net: grid.NetworkModel):
    loss = grid.line_losses_kw(state, net)
    rows = []
    for k in range(net.n_line):
        a, b = net.bus_ids[net.line_from[k]], net.bus_ids[net.line_to[k]]
        rows.append([a, b, float(np.sum(loss[:, k]) * net.dt_hours)] + list(loss[:, k]))
    write_csv(path, ["from_bus", "to_bus", "energy_kwh"] + [f"t{t}" for t in range(1, net.horizon + 1)], rows)


def write_decisions(path, decisions: dict, stations):
    pv = {s.station_id: s.pv_profile_kw for s in stations}
    rows = []
    for sid, d in decisions.items():
        for t in range(len(d.p_d_kw)):
            rows.append([sid, t + 1, d.p_d_kw[t], d.p_g_kw[t], pv[sid][t], d.p_b_dis_kw[t], d.p_b_chg_kw[t], d.soc_b[t]])
    write_csv(path, ["station", "t", "p_d_kw", "p_g_kw", "pv_kw", "p_dis_kw", "p_chg_kw", "soc_b"], rows)


def write_state(out_dir, state: grid.NetworkState, net: grid.NetworkModel):
    out = Path(out_dir)
    T = state.horizon
    bus = [[t + 1, net.bus_ids[j], state.p[t, j], state.q[t, j], state.v[t, j]] for t in range(T) for j in range(net.n_bus)]
    write_csv(out / "state_bus.csv", ["t", "bus", "p_pu", "q_pu", "v_pu2"], bus)
    line = [
        [t + 1, net.bus_ids[net.line_from[k]], net.bus_ids[net.line_to[k]], state.P[t, k], state.Q[t, k], state.l[t, k]]
        for t in range(T)
        for k in range(net.n_line)
    ]
    write_csv(out / "state_line.csv", ["t", "from_bus", "to_bus", "P_pu", "Q_pu", "l_pu2"], line)
    write_csv(out / "state_slack.csv", ["t", "p1_buy_pu", "p1_sell_pu"], [[t + 1, state.p1_buy[t], state.p1_sell[t]] for t in range(T)])


def read_state(state_dir, net: grid.NetworkModel) -> grid.NetworkState:
    """Rebuild a saved operating point in ``net``'s bus and line order."""
    d = Path(state_dir)
    T, n, m = net.horizon, net.n_bus, net.n_line
    p, q, v = np.full((T, n), np.nan), np.full((T, n), np.nan), np.full((T, n), np.nan)
    P, Q, l = np.full((T, m), np.nan), np.full((T, m), np.nan), np.full((T, m), np.nan)
    lines = {(int(net.bus_ids[a]), int(net.bus_ids[b])): k for k, (a, b) in enumerate(zip(net.line_from, net.line_to))}
    try:
        for r in read_rows(d / "state_bus.csv"):
            t, j = int(r["t"]) - 1, net.bus_index(int(r["bus"]))
            p[t, j], q[t, j], v[t, j] = float(r["p_pu"]), float(r["q_pu"]), float(r["v_pu2"])
        for r in read_rows(d / "state_line.csv"):
            t, k = int(r["t"]) - 1, lines[(int(r["from_bus"]), int(r["to_bus"]))]
            P[t, k], Q[t, k], l[t, k] = float(r["P_pu"]), float(r["Q_pu"]), float(r["l_pu2"])
        slack = sorted(read_rows(d / "state_slack.csv"), key=lambda r: int(r["t"]))
        pb = np.array([float(r["p1_buy_pu"]) for r in slack])
        ps = np.array([float(r["p1_sell_pu"]) for r in slack])
    except (KeyError, ValueError, IndexError) as exc:
        raise ConfigError(f"saved state in {d} does not match the network ({exc})") from None
    if np.isnan(p).any() or np.isnan(P).any() or pb.size != T:
        raise ConfigError(f"saved state in {d} is incomplete for a {T}-slot horizon")
    return grid.NetworkState(p, q, v, P, Q, l, pb, ps, net.line_from.copy(), net.s_base_kva)


def audit_payload(state: grid.NetworkState, net: grid.NetworkModel, tol: float = 1e-6) -> dict:
    gap = grid.socp_gap(state)
    limits = grid.audit_limits(state, net)
    worst = int(np.argmax(np.abs(gap))) if gap.size else 0
    t, k = divmod(worst, max(net.n_line, 1))
    return {
        "max_gap": float(np.max(np.abs(gap))) if gap.size else 0.0,
        "worst_gap_slot": t + 1,
        "worst_gap_line": [int(net.bus_ids[net.line_from[k]]), int(net.bus_ids[net.line_to[k]])] if gap.size else [],
        "limit_violation": limits,
        "v_min_pu": float(np.sqrt(state.v.min())),
        "v_max_pu": float(np.sqrt(state.v.max())),
        "energy_residual": float(np.max(np.abs(grid.energy_residual(state, net)))),
        "ok": bool((not gap.size or np.max(np.abs(gap)) <= tol) and all(x <= tol for x in limits.values())),
        "tol": tol,
    }


def settlement_payload(rep: SettlementReport) -> dict:
    return {"label": rep.label, "total": rep.total, "C_dso": rep.C_dso, "money_imbalance": rep.money_imbalance(),
            "stations": {sid: {"C_g": c.C_g, "C_b": c.C_b, "C_ev": c.C_ev, "C_i": c.total} for sid, c in rep.stations.items()},
            "C_bus1": rep.C_bus1, "C_loss": rep.C_loss}

