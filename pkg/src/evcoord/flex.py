"""Aggregate EV power flexibility of a charging station and its disaggregation.

Slots are 1-based.  A session is present in slots ``t_arrive <= t < t_depart``;
``soc[t]`` is the state of charge at the start of slot ``t`` so the departure
SOC is ``soc[t_depart]``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import conic


class UnservableSession(ValueError):
    """A reservation that cannot be met even by charging at full power."""

    def __init__(self, session_id, reason):
        super().__init__(f"session {session_id}: {reason}")
        self.session_id = session_id


class FlexibilityError(RuntimeError):
    pass


class OutOfRegionError(ValueError):
    def __init__(self, slot, value, lower, upper):
        super().__init__(f"trajectory leaves the flexibility region at slot {slot}: {value:g} not in [{lower:g}, {upper:g}]")
        self.slot = slot


@dataclass(frozen=True)
class EVSession:
    id: str
    t_arrive: int
    t_depart: int
    soc_init: float
    soc_req: float
    soc_min: float = 0.1
    soc_max: float = 0.9
    capacity_kwh: float = 40.0
    p_chg_kw: float = 6.6
    station: str = ""

    @property
    def required_kwh(self) -> float:
        return (self.soc_req - self.soc_init) * self.capacity_kwh

    def check(self, dt_hours: float = 1.0, horizon: int | None = None):
        if not self.t_arrive < self.t_depart:
            raise UnservableSession(self.id, f"arrival slot {self.t_arrive} is not before departure slot {self.t_depart}")
        if horizon is not None and not (1 <= self.t_arrive and self.t_depart <= horizon):
            raise UnservableSession(self.id, f"slots [{self.t_arrive}, {self.t_depart}] outside horizon 1..{horizon}")
        if not self.soc_min <= self.soc_init <= self.soc_max:
            raise UnservableSession(self.id, "initial SOC outside [soc_min, soc_max]")
        if not self.soc_min <= self.soc_req <= self.soc_max:
            raise UnservableSession(self.id, "required SOC outside [soc_min, soc_max]")
        if self.capacity_kwh <= 0 or self.p_chg_kw < 0:
            raise UnservableSession(self.id, "capacity must be positive and charger power nonnegative")
        reachable = self.p_chg_kw * dt_hours * (self.t_depart - self.t_arrive)
        if self.required_kwh > reachable + 1e-9:
            raise UnservableSession(
                self.id, f"needs {self.required_kwh:g} kWh but at most {reachable:g} kWh can be delivered"
            )


@dataclass(frozen=True)
class StationFleet:
    station_id: str
    sessions: tuple = ()
    n_chargers: int = 20
    horizon: int = 24
    dt_hours: float = 1.0
    v2g: bool = True

    def __post_init__(self):
        object.__setattr__(self, "sessions", tuple(self.sessions))
        for s in self.sessions:
            s.check(self.dt_hours, self.horizon)

    def presence_matrix(self) -> np.ndarray:
        """``(n_ev, T)`` array of ``s^p_v(t)``; column ``k`` is slot ``k + 1``."""
        slots = np.arange(1, self.horizon + 1)
        return np.array([[presence(s, t) for t in slots] for s in self.sessions], dtype=float).reshape(
            len(self.sessions), self.horizon
        )


def presence(session: EVSession, t: int) -> int:
    """1 while the vehicle is plugged in, i.e. ``t_arrive <= t < t_depart``."""
    return int(session.t_arrive <= t < session.t_depart)


@dataclass(frozen=True)
class BoundarySchedules:
    """Per-EV witness schedules, arrays of shape ``(n_ev, T)``."""

    power: np.ndarray
    status: np.ndarray
    soc: np.ndarray


@dataclass(frozen=True, eq=False)
class FlexibilityRegion:
    lower_kw: np.ndarray
    upper_kw: np.ndarray
    upper_schedules: BoundarySchedules | None = None
    lower_schedules: BoundarySchedules | None = None
    fleet: StationFleet | None = None
    objective: float = math.nan

    @property
    def width(self) -> np.ndarray:
        return self.upper_kw - self.lower_kw

    def total_width(self) -> float:
        return float(np.sum(self.width))


@dataclass(frozen=True, eq=False)
class EVDispatch:
    power: np.ndarray
    status: np.ndarray
    soc: np.ndarray
    alpha: np.ndarray | None = None
    aggregate_kw: np.ndarray | None = None
    session_ids: tuple = ()


@dataclass
class ViolationReport:
    families: dict = field(default_factory=dict)
    tol: float = 1e-6

    @property
    def max_violation(self) -> float:
        return max(self.families.values(), default=0.0)

    @property
    def ok(self) -> bool:
        return self.max_violation <= self.tol

    def __str__(self):
        rows = ", ".join(f"{k}={v:.3g}" for k, v in self.families.items())
        return f"{'OK' if self.ok else 'VIOLATED'} (max {self.max_violation:.3g}): {rows}"


@dataclass(frozen=True)
class _Layout:
    """Variable ids of the flexibility program, each ``(n_ev, T)`` or ``(T,)``."""

    p_hat: np.ndarray
    s_hat: np.ndarray
    soc_hat: np.ndarray
    p_chk: np.ndarray
    s_chk: np.ndarray
    soc_chk: np.ndarray
    agg_hat: np.ndarray
    agg_chk: np.ndarray


def _layout(n_ev: int, T: int) -> _Layout:
    fam = 3 * n_ev * T

    def block(start):
        ids = start + np.arange(3 * n_ev * T).reshape(n_ev, 3, T)
        return ids[:, 0, :], ids[:, 1, :], ids[:, 2, :]

    ph, sh, ch = block(0)
    pc, sc, cc = block(fam)
    return _Layout(ph, sh, ch, pc, sc, cc, 2 * fam + np.arange(T), 2 * fam + T + np.arange(T))


def build_flex_program(fleet: StationFleet, w: float = 0.01, per_ev_order: bool = True) -> conic.ConicProgram:
    """Assemble the max-width program for both boundary families.

    With ``per_ev_order`` every vehicle's upper-boundary power is kept above its
    lower-boundary power slot by slot, which makes any convex combination of
    the two witnesses satisfy the SOC requirements.
    """
    if w < 0:
        raise ValueError("w must be nonnegative")
    T, dt = fleet.horizon, fleet.dt_hours
    sp_mat = fleet.presence_matrix()
    b = conic.ProgramBuilder(f"flex[{fleet.station_id}]")
    fams = {}
    for tag in ("hat", "chk"):
        p, s, soc = [], [], []
        for v, ev in enumerate(fleet.sessions):
            lo_p = 0.0 if not fleet.v2g else -math.inf
            p.append(b.vars(f"p_{tag}[{ev.id}]", T, lower=lo_p))
            s.append(b.vars(f"s_{tag}[{ev.id}]", T, lower=0.0, upper=sp_mat[v]))
            soc.append(b.vars(f"soc_{tag}[{ev.id}]", T, lower=ev.soc_min, upper=ev.soc_max))
        fams[tag] = (p, s, soc)
    agg = {tag: b.vars(f"p_d_{tag}", T) for tag in ("hat", "chk")}

    for tag in ("hat", "chk"):
        p, s, soc = fams[tag]
        for t in range(T):
            b.add_eq(agg[tag][t] - conic.lin_sum(p[v][t] for v in range(len(p))), 0.0, name=f"agg_{tag}[{t + 1}]")
        for v, ev in enumerate(fleet.sessions):
            for t in range(T):
                b.add_le(p[v][t] - ev.p_chg_kw * s[v][t], 0.0)
                b.add_le(-p[v][t] - ev.p_chg_kw * s[v][t], 0.0)
            b.add_eq(soc[v][ev.t_arrive - 1], ev.soc_init, name=f"soc_init_{tag}[{ev.id}]")
            b.add_ge(soc[v][ev.t_depart - 1], ev.soc_req)
            for t in range(T - 1):
                b.add_eq(soc[v][t + 1] - soc[v][t] - (dt / ev.capacity_kwh) * p[v][t], 0.0)
        for t in range(T):
            b.add_le(conic.lin_sum(s[v][t] for v in range(len(s))), fleet.n_chargers)

    p_hat, s_hat, _ = fams["hat"]
    p_chk, s_chk, _ = fams["chk"]
    for t in range(T):
        b.add_ge(agg["hat"][t] - agg["chk"][t], 0.0)
    for v in range(len(fleet.sessions)):
        for t in range(T):
            b.add_eq(s_hat[v][t] - s_chk[v][t], 0.0)
            if per_ev_order:
                b.add_ge(p_hat[v][t] - p_chk[v][t], 0.0)

    for t in range(T):
        gap = agg["hat"][t] - agg["chk"][t]
        b.add_linear_objective(-gap)
        b.add_square(w, gap)
    return b.build()


def compute_flexibility(fleet: StationFleet, w: float = 0.01, per_ev_order: bool = True, tol: float = 1e-9) -> FlexibilityRegion:
    """Solve the flexibility program and keep the boundary schedules."""
    n, T = len(fleet.sessions), fleet.horizon
    if n == 0:
        z = np.zeros(T)
        empty = BoundarySchedules(np.zeros((0, T)), np.zeros((0, T)), np.zeros((0, T)))
        return FlexibilityRegion(z, z.copy(), empty, empty, fleet, 0.0)
    prog = build_flex_program(fleet, w, per_ev_order)
    sol = conic.solve(prog, tol=tol)
    if not sol.optimal:
        raise FlexibilityError(f"flexibility program for station {fleet.station_id} is {sol.status}")
    lay = _layout(n, T)
    x = sol.x
    upper = BoundarySchedules(x[lay.p_hat], x[lay.s_hat], x[lay.soc_hat])
    lower = BoundarySchedules(x[lay.p_chk], x[lay.s_chk], x[lay.soc_chk])
    up = upper.power.sum(axis=0)
    lo = np.minimum(lower.power.sum(axis=0), up)
    return FlexibilityRegion(lo, up, upper, lower, fleet, -sol.objective_value)


def disaggregate(region: FlexibilityRegion, trajectory, tol: float = 1e-9) -> EVDispatch:
    """Per-EV dispatch realising an aggregate trajectory inside ``region``.

    Power and status are the slot-wise convex combination of the two boundary
    witnesses.  SOC is re-integrated from the combined power so the recursion
    holds exactly; it coincides with the combined SOC whenever the weight is
    constant over time.
    """
    fleet = region.fleet
    if fleet is None or region.upper_schedules is None:
        raise ValueError("region carries no boundary schedules")
    traj = np.asarray(trajectory, dtype=float)
    up, lo = region.upper_kw, region.lower_kw
    if traj.shape != up.shape:
        raise ValueError(f"trajectory has {traj.size} slots, region has {up.size}")
    for t in range(traj.size):
        if not lo[t] - tol <= traj[t] <= up[t] + tol:
            raise OutOfRegionError(t + 1, traj[t], lo[t], up[t])
    width = up - lo
    safe = np.where(width > tol, width, 1.0)
    alpha = np.where(width > tol, (up - traj) / safe, 0.0)
    alpha = np.clip(alpha, 0.0, 1.0)
    U, L = region.upper_schedules, region.lower_schedules
    power = alpha * L.power + (1 - alpha) * U.power
    status = alpha * L.status + (1 - alpha) * U.status
    soc = _integrate_soc(fleet, power)
    return EVDispatch(power, status, soc, alpha, traj, tuple(s.id for s in fleet.sessions))


def _integrate_soc(fleet: StationFleet, power: np.ndarray) -> np.ndarray:
    n, T = power.shape
    soc = np.empty((n, T))
    for v, ev in enumerate(fleet.sessions):
        step = power[v] * fleet.dt_hours / ev.capacity_kwh
        cum = np.concatenate(([0.0], np.cumsum(step[:-1])))
        soc[v] = ev.soc_init + cum - cum[ev.t_arrive - 1]
    return soc


def validate_dispatch(fleet: StationFleet, dispatch: EVDispatch, tol: float = 1e-6) -> ViolationReport:
    """Max violation of each per-EV constraint family; never raises on violation."""
    n, T = len(fleet.sessions), fleet.horizon
    p = np.asarray(dispatch.power, dtype=float).reshape(n, T)
    s = np.asarray(dispatch.status, dtype=float).reshape(n, T)
    soc = np.asarray(dispatch.soc, dtype=float).reshape(n, T)
    fam = dict.fromkeys(
        ["power_bounds", "status_window", "terminal_soc", "soc_recursion", "soc_range", "charger_count", "aggregation"],
        0.0,
    )
    if n:
        cap = np.array([ev.p_chg_kw for ev in fleet.sessions])[:, None]
        pb = np.maximum(p - s * cap, -p - s * cap)
        if not fleet.v2g:
            pb = np.maximum(pb, -p)
        fam["power_bounds"] = float(max(0.0, pb.max()))
        spres = fleet.presence_matrix()
        fam["status_window"] = float(max(0.0, (-s).max(), (s - spres).max()))
        term = 0.0
        for v, ev in enumerate(fleet.sessions):
            term = max(term, abs(soc[v, ev.t_arrive - 1] - ev.soc_init), ev.soc_req - soc[v, ev.t_depart - 1])
        fam["terminal_soc"] = float(max(0.0, term))
        if T > 1:
            e = np.array([fleet.dt_hours / ev.capacity_kwh for ev in fleet.sessions])[:, None]
            fam["soc_recursion"] = float(np.abs(soc[:, 1:] - soc[:, :-1] - e * p[:, :-1]).max())
        smin = np.array([ev.soc_min for ev in fleet.sessions])[:, None]
        smax = np.array([ev.soc_max for ev in fleet.sessions])[:, None]
        fam["soc_range"] = float(max(0.0, (smin - soc).max(), (soc - smax).max()))
        fam["charger_count"] = float(max(0.0, (s.sum(axis=0) - fleet.n_chargers).max()))
    if dispatch.aggregate_kw is not None:
        fam["aggregation"] = float(np.abs(p.sum(axis=0) - np.asarray(dispatch.aggregate_kw)).max())
    return ViolationReport(fam, tol)


BRUTE_FORCE_CAP = 2_000_000


def brute_force_region(fleet: StationFleet, power_grid_step: float) -> FlexibilityRegion:
    """Per-slot extremes of aggregate power over all discretised feasible dispatches.

    Statuses are continuous as in the program, so a combination is allowed
    when the smallest statuses ``|p| / p_chg`` fit under the charger count.
    Only meant as an oracle for fleets of at most two vehicles and four slots.
    """
    n, T = len(fleet.sessions), fleet.horizon
    if n > 2 or T > 4:
        raise ValueError("brute force limited to 2 vehicles and 4 slots")
    if n == 0:
        return FlexibilityRegion(np.zeros(T), np.zeros(T), fleet=fleet)
    if power_grid_step <= 0:
        raise ValueError("power_grid_step must be positive")
    per_ev = []
    for ev in fleet.sessions:
        k = int(math.floor(ev.p_chg_kw / power_grid_step + 1e-9))
        levels = [j * power_grid_step for j in range(-k if fleet.v2g else 0, k + 1)]
        window = [t for t in range(1, T + 1) if presence(ev, t)]
        count = len(levels) ** len(window)
        if count > BRUTE_FORCE_CAP:
            raise ValueError(f"enumeration of {count} schedules exceeds cap {BRUTE_FORCE_CAP}")
        feasible = []
        for combo in itertools.product(levels, repeat=len(window)):
            prof = np.zeros(T)
            for t, val in zip(window, combo):
                prof[t - 1] = val
            if _single_ev_feasible(ev, prof, fleet.dt_hours):
                feasible.append(prof)
        per_ev.append(feasible)
    total = math.prod(len(f) for f in per_ev)
    if total > BRUTE_FORCE_CAP:
        raise ValueError(f"enumeration of {total} joint schedules exceeds cap {BRUTE_FORCE_CAP}")
    hi = np.full(T, -math.inf)
    lo = np.full(T, math.inf)
    found = False
    rating = np.array([ev.p_chg_kw if ev.p_chg_kw > 0 else math.inf for ev in fleet.sessions])[:, None]
    for combo in itertools.product(*per_ev):
        stack = np.array(combo)
        if np.any((np.abs(stack) / rating).sum(axis=0) > fleet.n_chargers + 1e-9):
            continue
        agg = stack.sum(axis=0)
        hi = np.maximum(hi, agg)
        lo = np.minimum(lo, agg)
        found = True
    if not found:
        raise FlexibilityError(f"no discretised feasible dispatch for station {fleet.station_id}")
    return FlexibilityRegion(lo, hi, fleet=fleet)


def _single_ev_feasible(ev: EVSession, prof: np.ndarray, dt: float) -> bool:
    T = prof.size
    step = prof * dt / ev.capacity_kwh
    cum = np.concatenate(([0.0], np.cumsum(step[:-1])))
    soc = ev.soc_init + cum - cum[ev.t_arrive - 1]
    eps = 1e-9
    if np.any(soc < ev.soc_min - eps) or np.any(soc > ev.soc_max + eps):
        return False
    return soc[ev.t_depart - 1] >= ev.soc_req - eps and T >= ev.t_depart
