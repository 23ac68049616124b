"""Charging-station agent: battery/PV model, cost terms and local subproblems."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import conic
from .flex import FlexibilityRegion


class StationInfeasible(RuntimeError):
    def __init__(self, station_id, slot, detail):
        where = f" at slot {slot}" if slot else ""
        super().__init__(f"station {station_id} subproblem infeasible{where}: {detail}")
        self.station_id = station_id
        self.slot = slot


@dataclass(frozen=True, eq=False)
class StationParams:
    station_id: str
    bus: int
    battery_capacity_kwh: float
    p_b_chg_max_kw: float
    p_b_dis_max_kw: float
    eta_c: float = 0.95
    eta_d: float = 0.95
    soc_b_min: float = 0.1
    soc_b_max: float = 0.9
    c_batt: float = 0.1
    c_dissat: float = 0.1
    p_g_min_kw: float = -300.0
    p_g_max_kw: float = 300.0
    pv_profile_kw: np.ndarray = field(default_factory=lambda: np.zeros(24))

    def __post_init__(self):
        object.__setattr__(self, "pv_profile_kw", np.asarray(self.pv_profile_kw, dtype=float))
        if not (0 < self.eta_c <= 1 and 0 < self.eta_d <= 1):
            raise ValueError(f"station {self.station_id}: efficiencies must lie in (0, 1]")
        if not self.soc_b_min < self.soc_b_max:
            raise ValueError(f"station {self.station_id}: soc_b_min must be below soc_b_max")
        if not self.p_g_min_kw <= 0 <= self.p_g_max_kw:
            raise ValueError(f"station {self.station_id}: trading limits must bracket zero")
        if self.battery_capacity_kwh <= 0:
            raise ValueError(f"station {self.station_id}: battery capacity must be positive")

    @property
    def horizon(self) -> int:
        return len(self.pv_profile_kw)


@dataclass(frozen=True, eq=False)
class StationDecision:
    p_d_kw: np.ndarray
    p_g_kw: np.ndarray
    p_b_dis_kw: np.ndarray
    p_b_chg_kw: np.ndarray
    soc_b: np.ndarray
    p_buy_kw: np.ndarray | None = None
    p_sell_kw: np.ndarray | None = None

    def balance_residual(self, pv_kw) -> float:
        r = self.p_d_kw - self.p_g_kw - np.asarray(pv_kw) - self.p_b_dis_kw + self.p_b_chg_kw
        return float(np.max(np.abs(r))) if r.size else 0.0


def battery_step(soc: float, p_dis_kw: float, p_chg_kw: float, params: StationParams, dt: float = 1.0) -> float:
    E = params.battery_capacity_kwh
    return soc - p_dis_kw * dt / (params.eta_d * E) + p_chg_kw * dt * params.eta_c / E


def cost_ev(p_d, upper_kw, c_dissat: float, dt: float = 1.0) -> float:
    """Dissatisfaction cost of delivering less than the upper envelope."""
    return float(c_dissat * np.sum(np.asarray(upper_kw) - np.asarray(p_d)) * dt)


def cost_battery(p_dis, p_chg, c_batt: float, dt: float = 1.0) -> float:
    return float(c_batt * np.sum(np.asarray(p_dis) + np.asarray(p_chg)) * dt)


def cost_trading(p_g, prices, dt: float = 1.0) -> float:
    """Payment at the locational price; negative means net revenue."""
    return float(np.sum(np.asarray(p_g) * np.asarray(prices)) * dt)


def cost_trading_baseline(p_buy, p_sell, price_buy, price_sell, dt: float = 1.0) -> float:
    return float(np.sum(np.asarray(p_buy) * np.asarray(price_buy) - np.asarray(p_sell) * np.asarray(price_sell)) * dt)


@dataclass
class StationCosts:
    C_g: float
    C_b: float
    C_ev: float

    @property
    def total(self) -> float:
        return self.C_g + self.C_b + self.C_ev


def station_costs(params: StationParams, region: FlexibilityRegion, dec: StationDecision, prices, dt: float = 1.0) -> StationCosts:
    return StationCosts(
        C_g=cost_trading(dec.p_g_kw, prices, dt),
        C_b=cost_battery(dec.p_b_dis_kw, dec.p_b_chg_kw, params.c_batt, dt),
        C_ev=cost_ev(dec.p_d_kw, region.upper_kw, params.c_dissat, dt),
    )


def add_station_constraints(b: conic.ProgramBuilder, params: StationParams, region: FlexibilityRegion, dt: float, split_trades: bool = False):
    """Declare one station's variables and physical constraints on ``b``.

    Returns a dict of variable-id arrays.  The battery SOC recursion wraps
    from the last slot to the first, so together with ``soc[1] == soc[T]``
    the last slot cannot create energy.
    """
    T = params.horizon
    if len(region.upper_kw) != T:
        raise ValueError(f"station {params.station_id}: region has {len(region.upper_kw)} slots, PV profile {T}")
    sid = params.station_id
    p_d = b.vars(f"p_d[{sid}]", T, lower=region.lower_kw, upper=region.upper_kw)
    p_g = b.vars(f"p_g[{sid}]", T, lower=params.p_g_min_kw, upper=params.p_g_max_kw)
    dis = b.vars(f"p_dis[{sid}]", T, lower=0.0, upper=params.p_b_dis_max_kw)
    chg = b.vars(f"p_chg[{sid}]", T, lower=0.0, upper=params.p_b_chg_max_kw)
    soc = b.vars(f"soc_b[{sid}]", T, lower=params.soc_b_min, upper=params.soc_b_max)
    ids = {k: np.array([v.id for v in vs]) for k, vs in dict(p_d=p_d, p_g=p_g, dis=dis, chg=chg, soc=soc).items()}
    pv = params.pv_profile_kw
    for t in range(T):
        b.add_eq(p_d[t] - p_g[t] - dis[t] + chg[t], pv[t], name=f"balance[{sid},{t + 1}]")
    E = params.battery_capacity_kwh
    for t in range(T):
        nxt = soc[(t + 1) % T]
        b.add_eq(nxt - soc[t] + (dt / (params.eta_d * E)) * dis[t] - (dt * params.eta_c / E) * chg[t], 0.0)
    b.add_eq(soc[0] - soc[T - 1], 0.0, name=f"cyclic[{sid}]")
    if split_trades:
        buy = b.vars(f"p_buy[{sid}]", T, lower=0.0, upper=params.p_g_max_kw)
        sell = b.vars(f"p_sell[{sid}]", T, lower=0.0, upper=-params.p_g_min_kw)
        for t in range(T):
            b.add_eq(p_g[t] - buy[t] + sell[t], 0.0)
        ids["buy"] = np.array([v.id for v in buy])
        ids["sell"] = np.array([v.id for v in sell])
    return ids


def local_cost_vector(n: int, ids, params: StationParams, region: FlexibilityRegion, dt: float):
    """Linear coefficients and constant of ``C_b + C_ev`` over ``n`` variables."""
    q = np.zeros(n)
    q[ids["dis"]] += params.c_batt * dt
    q[ids["chg"]] += params.c_batt * dt
    q[ids["p_d"]] -= params.c_dissat * dt
    const = params.c_dissat * dt * float(np.sum(region.upper_kw))
    return q, const


def decision_from(x: np.ndarray, ids) -> StationDecision:
    return StationDecision(
        p_d_kw=x[ids["p_d"]],
        p_g_kw=x[ids["p_g"]],
        p_b_dis_kw=x[ids["dis"]],
        p_b_chg_kw=x[ids["chg"]],
        soc_b=x[ids["soc"]],
        p_buy_kw=x[ids["buy"]] if "buy" in ids else None,
        p_sell_kw=x[ids["sell"]] if "sell" in ids else None,
    )


class StationAgent:
    """Keeps one station's constraint set compiled across coordination rounds."""

    def __init__(self, params: StationParams, region: FlexibilityRegion, dt: float = 1.0, tol: float = 1e-9):
        self.params = params
        self.region = region
        self.dt = dt
        self.tol = tol
        b = conic.ProgramBuilder(f"station[{params.station_id}]")
        self.ids = add_station_constraints(b, params, region, dt)
        self.program = b.build()
        self._q0, self._c0 = local_cost_vector(self.program.n, self.ids, params, region, dt)

    def solve(self, prices, schedule, rho: float) -> StationDecision:
        """Augmented local problem for one coordination round."""
        if rho <= 0:
            raise ValueError("rho must be positive")
        T = self.params.horizon
        prices = np.asarray(prices, dtype=float)
        schedule = np.asarray(schedule, dtype=float)
        if prices.shape != (T,) or schedule.shape != (T,):
            raise ValueError(f"prices and schedule must have {T} slots")
        n = self.program.n
        g = self.ids["p_g"]
        q = self._q0.copy()
        q[g] += prices * self.dt - rho * schedule
        diag = np.zeros(n)
        diag[g] = rho
        const = self._c0 + 0.5 * rho * float(schedule @ schedule)
        obj = conic.Objective(sp.diags(diag, format="csc"), q, const)
        sol = conic.solve(self.program.with_objective(obj), tol=self.tol)
        if not sol.optimal:
            raise _infeasibility(self.params, self.region, sol.status)
        return decision_from(sol.x, self.ids)

    def objective(self, dec: StationDecision, prices, schedule, rho: float) -> float:
        c = station_costs(self.params, self.region, dec, prices, self.dt)
        return c.total + 0.5 * rho * float(np.sum((dec.p_g_kw - np.asarray(schedule)) ** 2))

    def costs(self, dec: StationDecision, prices) -> StationCosts:
        return station_costs(self.params, self.region, dec, prices, self.dt)


def _infeasibility(params: StationParams, region: FlexibilityRegion, status: str) -> StationInfeasible:
    pv = params.pv_profile_kw
    for t in range(params.horizon):
        most = params.p_g_max_kw + pv[t] + params.p_b_dis_max_kw
        least = params.p_g_min_kw + pv[t] - params.p_b_chg_max_kw
        if region.lower_kw[t] > most + 1e-9:
            return StationInfeasible(params.station_id, t + 1, f"lower EV band {region.lower_kw[t]:g} kW exceeds supply {most:g} kW")
        if region.upper_kw[t] < least - 1e-9:
            return StationInfeasible(params.station_id, t + 1, f"PV surplus cannot be absorbed (upper band {region.upper_kw[t]:g} kW)")
    return StationInfeasible(params.station_id, None, f"solver status {status}")


def solve_station_subproblem(params: StationParams, region: FlexibilityRegion, prices, dso_schedule, rho: float, dt: float = 1.0) -> StationDecision:
    return StationAgent(params, region, dt).solve(prices, dso_schedule, rho)


def solve_station_baseline(params: StationParams, region: FlexibilityRegion, price_buy, price_sell, dt: float = 1.0, tol: float = 1e-9) -> StationDecision:
    """Stand-alone station trading only with the utility at uniform prices."""
    b = conic.ProgramBuilder(f"baseline[{params.station_id}]")
    ids = add_station_constraints(b, params, region, dt, split_trades=True)
    prog = b.build()
    q, const = local_cost_vector(prog.n, ids, params, region, dt)
    q[ids["buy"]] += np.asarray(price_buy, dtype=float) * dt
    q[ids["sell"]] -= np.asarray(price_sell, dtype=float) * dt
    obj = conic.Objective(sp.csc_matrix((prog.n, prog.n)), q, const)
    sol = conic.solve(prog.with_objective(obj), tol=tol)
    if not sol.optimal:
        raise _infeasibility(params, region, sol.status)
    return decision_from(sol.x, ids)
