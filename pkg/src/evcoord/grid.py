"""Radial branch-flow network model with the second-order cone relaxation.

Power quantities are per-unit on ``s_base_kva`` inside the model; bus power
``p_j`` is consumption-positive.  ``v`` and ``l`` are squared voltage and
squared current magnitudes.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import scipy.sparse as sp

from . import conic


class NetworkConfigError(ValueError):
    pass


class RadialityError(NetworkConfigError):
    pass


class NetworkInfeasible(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class NetworkModel:
    bus_ids: np.ndarray
    line_from: np.ndarray
    line_to: np.ndarray
    r: np.ndarray
    x: np.ndarray
    l_max: np.ndarray
    v_min: np.ndarray
    v_max: np.ndarray
    p_load: np.ndarray
    q_load: np.ndarray
    p_min: np.ndarray
    p_max: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray
    station_map: dict
    station_bounds: dict
    price_buy: np.ndarray
    price_sell: np.ndarray
    loss_price: np.ndarray
    s_base_kva: float = 1000.0
    v_base_kv: float = 12.66
    v_slack: float = 1.0
    dt_hours: float = 1.0

    @property
    def n_bus(self) -> int:
        return len(self.bus_ids)

    @property
    def n_line(self) -> int:
        return len(self.line_from)

    @property
    def horizon(self) -> int:
        return len(self.price_buy)

    def bus_index(self, bus_id) -> int:
        hits = np.flatnonzero(self.bus_ids == int(bus_id))
        if not hits.size:
            raise KeyError(f"unknown bus {bus_id}")
        return int(hits[0])

    def station_bus_index(self) -> dict:
        return {sid: self.bus_index(b) for sid, b in self.station_map.items()}

    def children(self) -> list[list[int]]:
        out = [[] for _ in range(self.n_bus)]
        for k, f in enumerate(self.line_from):
            out[f].append(k)
        return out

    def parent_line(self) -> np.ndarray:
        par = np.full(self.n_bus, -1)
        par[self.line_to] = np.arange(self.n_line)
        return par


@dataclass(frozen=True, eq=False)
class NetworkState:
    """Per-slot network operating point, all in per-unit."""

    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    l: np.ndarray
    p1_buy: np.ndarray
    p1_sell: np.ndarray
    line_from: np.ndarray
    s_base_kva: float = 1000.0
    schedules_kw: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return self.p.shape[0]


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def ieee33_tables() -> tuple[list[dict], list[dict]]:
    """Bundled Baran-Wu 33-bus feeder (12.66 kV)."""
    data = resources.files("evcoord") / "data"
    with resources.as_file(data / "ieee33_bus.csv") as b, resources.as_file(data / "ieee33_line.csv") as ln:
        return read_table(b), read_table(ln)


def _f(rec, key, default=None):
    val = rec.get(key, "")
    if val is None or str(val).strip() == "":
        if default is None:
            raise NetworkConfigError(f"missing field {key!r} in record {rec}")
        return default
    return float(val)


def build_network(
    bus_records,
    line_records,
    station_map: dict,
    price_buy,
    price_sell,
    loss_price=None,
    load_profile=None,
    s_base_kva: float = 1000.0,
    v_base_kv: float = 12.66,
    slack_bus: int = 1,
    v_slack: float = 1.0,
    station_p_bounds_kw: dict | None = None,
    dt_hours: float = 1.0,
) -> NetworkModel:
    """Validate a radial feeder and convert it to per-unit.

    ``load_profile`` scales the nominal bus loads slot by slot (length T).
    Buses hosting a station carry only the station's active injection; their
    reactive base load is kept.
    """
    price_buy = np.asarray(price_buy, dtype=float)
    price_sell = np.asarray(price_sell, dtype=float)
    T = price_buy.size
    if price_sell.shape != price_buy.shape:
        raise NetworkConfigError("buy and sell price profiles differ in length")
    if np.any(price_sell >= price_buy):
        raise NetworkConfigError("sell price must be strictly below buy price in every slot")
    loss_price = price_buy.copy() if loss_price is None else np.asarray(loss_price, dtype=float)
    shape = np.ones(T) if load_profile is None else np.asarray(load_profile, dtype=float)
    if shape.size != T or loss_price.size != T:
        raise NetworkConfigError("load and loss-price profiles must match the price horizon")

    ids = [int(_f(b, "index")) for b in bus_records]
    if len(set(ids)) != len(ids):
        raise NetworkConfigError("duplicate bus index")
    pos = {b: k for k, b in enumerate(ids)}
    n = len(ids)
    if slack_bus not in pos:
        raise NetworkConfigError(f"slack bus {slack_bus} not in bus list")

    adj = defaultdict(list)
    seen_pairs = set()
    raw = []
    for rec in line_records:
        a, c = int(_f(rec, "from")), int(_f(rec, "to"))
        if a not in pos or c not in pos:
            raise NetworkConfigError(f"line {a}-{c} references an unknown bus")
        if a == c:
            raise NetworkConfigError(f"line {a}-{c} is a self loop")
        key = frozenset((a, c))
        if key in seen_pairs:
            raise NetworkConfigError(f"duplicate line {a}-{c}")
        seen_pairs.add(key)
        r, xx = _f(rec, "r_ohm"), _f(rec, "x_ohm")
        if r <= 0 or xx <= 0:
            raise NetworkConfigError(f"line {a}-{c} needs positive r and x")
        rating = _f(rec, "rating_a", math.inf)
        k = len(raw)
        raw.append((a, c, r, xx, rating))
        adj[a].append((c, k))
        adj[c].append((a, k))

    # orient every line away from the slack; a revisit means a loop
    parent_of = {slack_bus: None}
    order, oriented = [slack_bus], {}
    head = 0
    while head < len(order):
        u = order[head]
        head += 1
        for w, k in adj[u]:
            if k in oriented:
                continue
            if w in parent_of:
                raise RadialityError(f"network contains a loop through line {raw[k][0]}-{raw[k][1]}")
            parent_of[w] = u
            oriented[k] = (u, w)
            order.append(w)
    if len(order) != n:
        missing = sorted(set(ids) - set(order))
        raise RadialityError(f"buses not connected to the slack: {missing[:5]}")
    if len(raw) != n - 1:
        raise RadialityError("network is not a tree")

    z_base = v_base_kv**2 * 1000.0 / s_base_kva
    i_base = s_base_kva / (math.sqrt(3) * v_base_kv)
    k_order = sorted(oriented, key=lambda k: order.index(oriented[k][1]))
    line_from = np.array([pos[oriented[k][0]] for k in k_order], dtype=int)
    line_to = np.array([pos[oriented[k][1]] for k in k_order], dtype=int)
    r = np.array([raw[k][2] for k in k_order]) / z_base
    xx = np.array([raw[k][3] for k in k_order]) / z_base
    l_max = np.array([(raw[k][4] / i_base) ** 2 for k in k_order])

    p_nom = np.array([_f(b, "p_load_kw", 0.0) for b in bus_records]) / s_base_kva
    q_nom = np.array([_f(b, "q_load_kvar", 0.0) for b in bus_records]) / s_base_kva
    v_min = np.array([_f(b, "v_min_pu", 0.94) for b in bus_records]) ** 2
    v_max = np.array([_f(b, "v_max_pu", 1.06) for b in bus_records]) ** 2
    slack = pos[slack_bus]
    v_min[slack] = v_max[slack] = v_slack**2

    for sid, bus in station_map.items():
        if int(bus) not in pos:
            raise NetworkConfigError(f"station {sid} mapped to unknown bus {bus}")
        if int(bus) == slack_bus:
            raise NetworkConfigError(f"station {sid} cannot sit on the slack bus")
    station_buses = {pos[int(b)] for b in station_map.values()}
    p_load = np.outer(shape, p_nom)
    q_load = np.outer(shape, q_nom)
    p_min = np.full(n, -math.inf)
    p_max = np.full(n, math.inf)
    for j in station_buses:
        p_load[:, j] = 0.0
    station_bounds = {}
    if station_p_bounds_kw:
        agg_lo, agg_hi = defaultdict(float), defaultdict(float)
        for sid, (lo, hi) in station_p_bounds_kw.items():
            j = pos[int(station_map[sid])]
            station_bounds[sid] = (lo / s_base_kva, hi / s_base_kva)
            agg_lo[j] += lo / s_base_kva
            agg_hi[j] += hi / s_base_kva
        for j in agg_lo:
            p_min[j], p_max[j] = agg_lo[j], agg_hi[j]
    q_min = np.full(n, -math.inf)
    q_max = np.full(n, math.inf)

    # put the slack first so index 0 is always the root
    perm = np.array([slack] + [k for k in range(n) if k != slack])
    inv = np.empty(n, dtype=int)
    inv[perm] = np.arange(n)
    return NetworkModel(
        bus_ids=np.array(ids)[perm],
        line_from=inv[line_from],
        line_to=inv[line_to],
        r=r,
        x=xx,
        l_max=l_max,
        v_min=v_min[perm],
        v_max=v_max[perm],
        p_load=p_load[:, perm],
        q_load=q_load[:, perm],
        p_min=p_min[perm],
        p_max=p_max[perm],
        q_min=q_min[perm],
        q_max=q_max[perm],
        station_map={sid: int(b) for sid, b in station_map.items()},
        station_bounds=station_bounds,
        price_buy=price_buy,
        price_sell=price_sell,
        loss_price=loss_price,
        s_base_kva=float(s_base_kva),
        v_base_kv=float(v_base_kv),
        v_slack=float(v_slack),
        dt_hours=float(dt_hours),
    )


def add_network_constraints(b: conic.ProgramBuilder, net: NetworkModel, fixed_injections_kw: dict | None = None):
    """Branch-flow equations with relaxed current definition, all slots.

    Returns a dict of variable-id arrays; ``p_n`` maps station id to a
    ``(T,)`` id array of its per-unit bus injection.
    """
    T, n, m = net.horizon, net.n_bus, net.n_line
    children = net.children()
    parent = net.parent_line()
    sbi = net.station_bus_index()
    at_bus = defaultdict(list)
    for sid, j in sbi.items():
        at_bus[j].append(sid)
    S = net.s_base_kva
    ids = {k: np.zeros((T, size), dtype=int) for k, size in (("v", n), ("P", m), ("Q", m), ("l", m))}
    ids.update(p1b=np.zeros(T, dtype=int), p1s=np.zeros(T, dtype=int), q1=np.zeros(T, dtype=int))
    ids["p_n"] = {sid: np.zeros(T, dtype=int) for sid in sbi}
    for t in range(T):
        v = b.vars(f"v[{t + 1}]", n, lower=net.v_min, upper=net.v_max)
        P = b.vars(f"P[{t + 1}]", m)
        Q = b.vars(f"Q[{t + 1}]", m)
        l = b.vars(f"l[{t + 1}]", m, lower=0.0, upper=net.l_max)
        p1b = b.var(f"p1_buy[{t + 1}]", lower=0.0)
        p1s = b.var(f"p1_sell[{t + 1}]", lower=0.0)
        q1 = b.var(f"q1[{t + 1}]", lower=net.q_min[0], upper=net.q_max[0])
        pn = {}
        for sid in sbi:
            j = sbi[sid]
            if fixed_injections_kw is not None:
                val = float(fixed_injections_kw[sid][t]) / S
                pn[sid] = b.var(f"p_n[{sid},{t + 1}]", lower=val, upper=val)
            else:
                lo, hi = net.station_bounds.get(sid, (-math.inf, math.inf))
                pn[sid] = b.var(f"p_n[{sid},{t + 1}]", lower=lo, upper=hi)
        for j in range(n):
            out_p = conic.lin_sum(P[k] for k in children[j])
            out_q = conic.lin_sum(Q[k] for k in children[j])
            if j == 0:
                b.add_eq(p1b - p1s - out_p, 0.0, name=f"slack_p[{t + 1}]")
                b.add_eq(q1 + out_q, 0.0)
                continue
            k = parent[j]
            if at_bus[j]:
                p_j = conic.lin_sum(pn[sid] for sid in at_bus[j])
            else:
                p_j = net.p_load[t, j]
            b.add_eq(P[k] - net.r[k] * l[k] - out_p - p_j, 0.0, name=f"p_bal[{j},{t + 1}]")
            b.add_eq(Q[k] - net.x[k] * l[k] - out_q - net.q_load[t, j], 0.0)
            f = net.line_from[k]
            b.add_eq(
                v[j] - v[f] + 2 * (net.r[k] * P[k] + net.x[k] * Q[k]) - (net.r[k] ** 2 + net.x[k] ** 2) * l[k], 0.0
            )
            b.add_rotated_cone(l[k], v[f], [P[k], Q[k]])
        ids["v"][t] = [z.id for z in v]
        ids["P"][t] = [z.id for z in P]
        ids["Q"][t] = [z.id for z in Q]
        ids["l"][t] = [z.id for z in l]
        ids["p1b"][t], ids["p1s"][t], ids["q1"][t] = p1b.id, p1s.id, q1.id
        for sid in sbi:
            ids["p_n"][sid][t] = pn[sid].id
    return ids


def network_cost_vector(nvar: int, ids, net: NetworkModel) -> np.ndarray:
    """Linear coefficients of ``C_bus1 + C_loss`` in dollars."""
    q = np.zeros(nvar)
    k = net.s_base_kva * net.dt_hours
    q[ids["p1b"]] += net.price_buy * k
    q[ids["p1s"]] -= net.price_sell * k
    q[ids["l"]] += np.outer(net.loss_price, net.r) * k
    return q


def state_from(x: np.ndarray, ids, net: NetworkModel) -> NetworkState:
    T, n = net.horizon, net.n_bus
    S = net.s_base_kva
    sbi = net.station_bus_index()
    p = net.p_load.copy()
    for j in set(sbi.values()):
        p[:, j] = 0.0
    sched = {}
    for sid, j in sbi.items():
        val = x[ids["p_n"][sid]]
        p[:, j] += val
        sched[sid] = val * S
    p[:, 0] = -(x[ids["p1b"]] - x[ids["p1s"]])
    q = net.q_load.copy()
    q[:, 0] = x[ids["q1"]]
    return NetworkState(
        p=p,
        q=q,
        v=x[ids["v"]],
        P=x[ids["P"]],
        Q=x[ids["Q"]],
        l=x[ids["l"]],
        p1_buy=x[ids["p1b"]],
        p1_sell=x[ids["p1s"]],
        line_from=net.line_from.copy(),
        s_base_kva=S,
        schedules_kw=sched,
    )


class DSOAgent:
    """Network operator; constraint set compiled once and reused."""

    def __init__(self, net: NetworkModel, tol: float = 1e-10, fixed_injections_kw: dict | None = None):
        self.net = net
        self.tol = tol
        b = conic.ProgramBuilder("dso")
        self.ids = add_network_constraints(b, net, fixed_injections_kw)
        self.program = b.build()
        self._q0 = network_cost_vector(self.program.n, self.ids, net)

    def solve(self, requests_kw: dict, prices: dict, rho: float):
        """Augmented network problem; returns the state and per-station schedules (kW)."""
        if rho <= 0:
            raise ValueError("rho must be positive")
        net, S, dt = self.net, self.net.s_base_kva, self.net.dt_hours
        n = self.program.n
        q = self._q0.copy()
        diag = np.zeros(n)
        const = 0.0
        for sid, idx in self.ids["p_n"].items():
            lam = np.asarray(prices[sid], dtype=float)
            pg = np.asarray(requests_kw[sid], dtype=float)
            # -lam * S p dt + rho/2 (pg - S p)^2
            q[idx] += -lam * S * dt - rho * S * pg
            diag[idx] = rho * S * S
            const += 0.5 * rho * float(pg @ pg)
        obj = conic.Objective(sp.diags(diag, format="csc"), q, const)
        return self._finish(conic.solve(self.program.with_objective(obj), tol=self.tol))

    def solve_fixed(self):
        """Minimum ``C_bus1 + C_loss`` with the injections fixed at construction."""
        obj = conic.Objective(sp.csc_matrix((self.program.n, self.program.n)), self._q0, 0.0)
        return self._finish(conic.solve(self.program.with_objective(obj), tol=self.tol))

    def _finish(self, sol):
        if not sol.optimal:
            raise NetworkInfeasible(f"network subproblem is {sol.status}; {_binding_hint(self.net)}")
        state = state_from(sol.x, self.ids, self.net)
        return state, state.schedules_kw


def _binding_hint(net: NetworkModel) -> str:
    return f"check voltage bounds [{math.sqrt(net.v_min[1:].min()):.3f}, {math.sqrt(net.v_max[1:].max()):.3f}] p.u. against the load level"


def dso_subproblem(net: NetworkModel, station_requests: dict, prices: dict, rho: float):
    return DSOAgent(net).solve(station_requests, prices, rho)


def cost_bus1(state: NetworkState, price_buy, price_sell, dt: float = 1.0) -> float:
    k = state.s_base_kva * dt
    return float(np.sum(state.p1_buy * np.asarray(price_buy) - state.p1_sell * np.asarray(price_sell)) * k)


def line_losses_kw(state: NetworkState, net: NetworkModel) -> np.ndarray:
    """``(T, n_line)`` resistive losses in kW."""
    return state.l * net.r[None, :] * state.s_base_kva


def cost_loss(state: NetworkState, net: NetworkModel, dt: float = 1.0) -> float:
    return float(np.sum(line_losses_kw(state, net) * net.loss_price[:, None]) * dt)


def socp_gap(state: NetworkState) -> np.ndarray:
    """``l - (P^2 + Q^2) / v_from`` per slot and line."""
    v_from = state.v[:, state.line_from]
    return state.l - (state.P**2 + state.Q**2) / v_from


def energy_residual(state: NetworkState, net: NetworkModel) -> np.ndarray:
    """Per-slot ``sum_j p_j + losses`` (zero when power is conserved)."""
    return state.p.sum(axis=1) + (state.l * net.r[None, :]).sum(axis=1)


def audit_limits(state: NetworkState | None, net: NetworkModel) -> dict:
    """Max bound violation per family (p, q, l, v); an empty state gives ``{}``."""
    if state is None or state.p.size == 0:
        return {}

    def over(x, lo, hi):
        with np.errstate(invalid="ignore"):
            a = np.nanmax(np.where(np.isfinite(lo), lo - x, -np.inf))
            c = np.nanmax(np.where(np.isfinite(hi), x - hi, -np.inf))
        return float(max(0.0, a, c))

    return {
        "p": over(state.p, net.p_min[None, :], net.p_max[None, :]),
        "q": over(state.q, net.q_min[None, :], net.q_max[None, :]),
        "l": over(state.l, np.zeros_like(net.l_max)[None, :], net.l_max[None, :]),
        "v": over(state.v, net.v_min[None, :], net.v_max[None, :]),
    }
