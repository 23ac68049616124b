"""Price-based coordination between charging stations and the network operator.

Includes the iterative protocol, the centralized reference problem whose
coupling duals are the locational prices, and the uniform-price baseline.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import conic, grid
from .flex import EVDispatch, FlexibilityRegion, StationFleet, disaggregate
from .station import (
    StationAgent,
    StationCosts,
    StationDecision,
    StationParams,
    add_station_constraints,
    cost_trading_baseline,
    decision_from,
    local_cost_vector,
    solve_station_baseline,
    station_costs,
)

log = logging.getLogger(__name__)


class NotConverged(RuntimeError):
    pass


@dataclass(eq=False)
class System:
    """Everything the second stage needs: stations, their regions, the feeder."""

    stations: list
    regions: dict
    net: grid.NetworkModel
    fleets: dict = field(default_factory=dict)

    @property
    def ids(self) -> list:
        return [s.station_id for s in self.stations]

    @property
    def dt(self) -> float:
        return self.net.dt_hours

    @property
    def horizon(self) -> int:
        return self.net.horizon


@dataclass
class CoordinationState:
    k: int
    prices: dict
    requests_kw: dict
    schedules_kw: dict
    residual: float
    station_cost: dict
    dso_cost: dict
    schedule_residual: float = math.nan


@dataclass
class SettlementReport:
    stations: dict
    C_bus1: float
    C_loss: float
    dso_C_g: dict
    label: str = ""

    @property
    def station_total(self) -> float:
        return sum(c.total for c in self.stations.values())

    @property
    def C_dso(self) -> float:
        return self.C_bus1 + self.C_loss + sum(self.dso_C_g.values())

    @property
    def total(self) -> float:
        return self.station_total + self.C_dso

    def money_imbalance(self) -> float:
        return sum(c.C_g for c in self.stations.values()) + sum(self.dso_C_g.values())


@dataclass(eq=False)
class CoordinationResult:
    trace: list
    settlement: SettlementReport
    dispatches: dict
    decisions: dict
    state: grid.NetworkState
    prices: dict
    converged: bool

    @property
    def iterations(self) -> int:
        return len(self.trace)


def price_update(prices, p_g, p_n, rho: float) -> np.ndarray:
    """Raise the price where the station asks for more than the schedule."""
    return np.asarray(prices, dtype=float) + rho * (np.asarray(p_g, dtype=float) - np.asarray(p_n, dtype=float))


def residual(new, old) -> float:
    """Euclidean norm of the price change over all stations and slots."""
    if isinstance(new, dict):
        keys = sorted(new)
        a = np.concatenate([np.ravel(new[k]) for k in keys]) if keys else np.zeros(0)
        b = np.concatenate([np.ravel(old[k]) for k in keys]) if keys else np.zeros(0)
    else:
        a, b = np.ravel(np.asarray(new, dtype=float)), np.ravel(np.asarray(old, dtype=float))
    if a.shape != b.shape:
        raise ValueError("price arrays differ in shape")
    return float(np.linalg.norm(a - b))


def schedule_residual(new: dict, old: dict, rho: float) -> float:
    """``rho`` times the norm of the schedule change between iterations."""
    return rho * residual(new, old)


def _map(fn, items, workers):
    if workers and workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


def _dso_costs(state, net, schedules, prices):
    c_bus1 = grid.cost_bus1(state, net.price_buy, net.price_sell, net.dt_hours)
    c_loss = grid.cost_loss(state, net, net.dt_hours)
    c_g = {sid: float(np.sum(schedules[sid] * prices[sid]) * net.dt_hours) for sid in schedules}
    return {"C_bus1": c_bus1, "C_loss": c_loss, "C_dso": c_bus1 + c_loss - sum(c_g.values())}


def _dispatch(system: System, decisions: dict) -> dict:
    out = {}
    for sid, dec in decisions.items():
        region = system.regions[sid]
        if region.upper_schedules is None or region.fleet is None:
            continue
        traj = np.clip(dec.p_d_kw, region.lower_kw, region.upper_kw)
        out[sid] = disaggregate(region, traj)
    return out


def run_coordination(
    system: System,
    rho: float = 0.01,
    delta: float = 1e-3,
    max_iter: int = 200,
    workers: int = 1,
    init_prices: dict | None = None,
    init_schedules: dict | None = None,
    callback=None,
    check_schedules: bool = True,
) -> CoordinationResult:
    """Iterate station solves, the network solve and the price update.

    Stops once the price change norm is at most ``delta``.  With
    ``check_schedules`` the schedule change (scaled by ``rho``) must also be
    below ``delta``; the price change alone can stall near zero while the
    schedules are still drifting.  A run that hits ``max_iter`` comes back
    with ``converged=False``.
    """
    if rho <= 0 or delta <= 0:
        raise ValueError("rho and delta must be positive")
    T, dt = system.horizon, system.dt
    agents = {s.station_id: StationAgent(s, system.regions[s.station_id], dt) for s in system.stations}
    dso = grid.DSOAgent(system.net)
    lam = {sid: np.zeros(T) if init_prices is None else np.asarray(init_prices[sid], float) for sid in agents}
    p_n = {sid: np.zeros(T) if init_schedules is None else np.asarray(init_schedules[sid], float) for sid in agents}
    trace = []
    converged = False
    decisions = {}
    state = None
    for k in range(max_iter):
        sids = list(agents)
        decs = _map(lambda sid: agents[sid].solve(lam[sid], p_n[sid], rho), sids, workers)
        decisions = dict(zip(sids, decs))
        p_g = {sid: d.p_g_kw for sid, d in decisions.items()}
        state, p_n_new = dso.solve(p_g, lam, rho)
        lam_new = {sid: price_update(lam[sid], p_g[sid], p_n_new[sid], rho) for sid in sids}
        r = residual(lam_new, lam)
        s_r = schedule_residual(p_n_new, p_n, rho)
        st_cost = {sid: agents[sid].costs(decisions[sid], lam[sid]).total for sid in sids}
        trace.append(
            CoordinationState(
                k=k + 1,
                prices=lam_new,
                requests_kw=p_g,
                schedules_kw=p_n_new,
                residual=r,
                station_cost=st_cost,
                dso_cost=_dso_costs(state, system.net, p_n_new, lam),
                schedule_residual=s_r,
            )
        )
        if callback is not None:
            callback(trace[-1])
        lam, p_n = lam_new, p_n_new
        if r <= delta and (s_r <= delta or not check_schedules):
            converged = True
            break
    if not converged:
        last = trace[-1]
        log.warning(
            "coordination stopped after %d iterations: price residual %.3g, schedule residual %.3g, delta %.3g",
            max_iter, last.residual, last.schedule_residual, delta,
        )
    if state is None:
        state, _ = dso.solve({}, {}, rho)
    settle = _settle(system, decisions, state, lam, "proposed")
    return CoordinationResult(trace, settle, _dispatch(system, decisions), decisions, state, lam, converged)


def _settle(system: System, decisions: dict, state, prices: dict, label: str) -> SettlementReport:
    net, dt = system.net, system.dt
    stations = {}
    for s in system.stations:
        sid = s.station_id
        stations[sid] = station_costs(s, system.regions[sid], decisions[sid], prices[sid], dt)
    return SettlementReport(
        stations=stations,
        C_bus1=grid.cost_bus1(state, net.price_buy, net.price_sell, dt),
        C_loss=grid.cost_loss(state, net, dt),
        dso_C_g={sid: -c.C_g for sid, c in stations.items()},
        label=label,
    )


@dataclass(eq=False)
class CentralizedResult:
    settlement: SettlementReport
    state: grid.NetworkState
    prices: dict
    decisions: dict
    objective: float


def solve_centralized(system: System, tol: float = 1e-10) -> CentralizedResult:
    """Joint convex problem over all stations and the network.

    The locational prices are the duals of the station/bus coupling rows.
    """
    net, dt = system.net, system.dt
    S = net.s_base_kva
    b = conic.ProgramBuilder("centralized")
    st_ids = {s.station_id: add_station_constraints(b, s, system.regions[s.station_id], dt) for s in system.stations}
    n_ids = grid.add_network_constraints(b, net)
    couple = {}
    for sid, ids in st_ids.items():
        rows = []
        for t in range(system.horizon):
            g = conic.LinExpr({int(ids["p_g"][t]): 1.0, int(n_ids["p_n"][sid][t]): -S})
            rows.append(b.add_eq(g, 0.0, name=f"couple[{sid},{t + 1}]"))
        couple[sid] = rows
    prog = b.build()
    q = grid.network_cost_vector(prog.n, n_ids, net)
    const = 0.0
    for s in system.stations:
        qs, cs = local_cost_vector(prog.n, st_ids[s.station_id], s, system.regions[s.station_id], dt)
        q += qs
        const += cs
    prog = prog.with_objective(conic.Objective(sp.csc_matrix((prog.n, prog.n)), q, const))
    sol = conic.solve(prog, tol=tol)
    if not sol.optimal:
        raise grid.NetworkInfeasible(f"centralized problem is {sol.status}")
    decisions = {sid: decision_from(sol.x, ids) for sid, ids in st_ids.items()}
    prices = {sid: np.array([sol.dual(c) for c in rows]) / dt for sid, rows in couple.items()}
    state = grid.state_from(sol.x, n_ids, net)
    settle = _settle(system, decisions, state, prices, "centralized")
    return CentralizedResult(settle, state, prices, decisions, sol.objective_value)


@dataclass(eq=False)
class BaselineResult:
    settlement: SettlementReport
    state: grid.NetworkState
    decisions: dict
    dispatches: dict


def run_baseline(system: System) -> BaselineResult:
    """Stations trade alone at uniform prices; the operator then clears the flows."""
    net, dt = system.net, system.dt
    decisions = {
        s.station_id: solve_station_baseline(s, system.regions[s.station_id], net.price_buy, net.price_sell, dt)
        for s in system.stations
    }
    injections = {sid: d.p_g_kw for sid, d in decisions.items()}
    state, _ = grid.DSOAgent(net, fixed_injections_kw=injections).solve_fixed()
    stations = {}
    for s in system.stations:
        sid = s.station_id
        d = decisions[sid]
        base = station_costs(s, system.regions[sid], d, np.zeros(system.horizon), dt)
        base.C_g = cost_trading_baseline(d.p_buy_kw, d.p_sell_kw, net.price_buy, net.price_sell, dt)
        stations[sid] = base
    settle = SettlementReport(
        stations=stations,
        C_bus1=grid.cost_bus1(state, net.price_buy, net.price_sell, dt),
        C_loss=grid.cost_loss(state, net, dt),
        dso_C_g={sid: -c.C_g for sid, c in stations.items()},
        label="baseline",
    )
    return BaselineResult(settle, state, decisions, _dispatch(system, decisions))


def reduction(baseline: SettlementReport, proposed: SettlementReport) -> float:
    """Relative total-cost saving of ``proposed`` over ``baseline``."""
    if baseline.total == 0:
        return 0.0
    return (baseline.total - proposed.total) / abs(baseline.total)
