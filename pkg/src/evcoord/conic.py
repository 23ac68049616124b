"""Small intermediate representation for convex conic programs.

Programs are assembled with :class:`ProgramBuilder` and frozen into a
:class:`ConicProgram`: a convex quadratic objective, linear equalities and
inequalities, and rotated second-order cones ``t * u >= ||w||^2``.  The
:func:`solve` entry point compiles the program to Clarabel's standard form.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import clarabel
import numpy as np
import scipy.sparse as sp

DEFAULT_TOL = 1e-8

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
ITERATION_LIMIT = "iteration-limit"


@dataclass(frozen=True)
class VariableRef:
    id: int
    name: str
    lower: float = -math.inf
    upper: float = math.inf

    def _expr(self) -> LinExpr:
        return LinExpr({self.id: 1.0})

    def __add__(self, other):
        return self._expr() + other

    __radd__ = __add__

    def __sub__(self, other):
        return self._expr() - other

    def __rsub__(self, other):
        return (-self._expr()) + other

    def __mul__(self, c):
        return self._expr() * c

    __rmul__ = __mul__

    def __truediv__(self, c):
        return self._expr() * (1.0 / c)

    def __neg__(self):
        return self._expr() * -1.0


class LinExpr:
    """Affine expression ``sum(coef * var) + const`` keyed by variable id."""

    __slots__ = ("terms", "const")

    def __init__(self, terms=None, const=0.0):
        self.terms = dict(terms) if terms else {}
        self.const = float(const)

    @staticmethod
    def of(x) -> LinExpr:
        if isinstance(x, LinExpr):
            return x
        if isinstance(x, VariableRef):
            return x._expr()
        return LinExpr(const=float(x))

    def copy(self) -> LinExpr:
        return LinExpr(self.terms, self.const)

    def _iadd(self, other, sign=1.0):
        if isinstance(other, VariableRef):
            self.terms[other.id] = self.terms.get(other.id, 0.0) + sign
        elif isinstance(other, LinExpr):
            for k, v in other.terms.items():
                self.terms[k] = self.terms.get(k, 0.0) + sign * v
            self.const += sign * other.const
        else:
            self.const += sign * float(other)
        return self

    def __add__(self, other):
        return self.copy()._iadd(other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.copy()._iadd(other, -1.0)

    def __rsub__(self, other):
        return (self * -1.0)._iadd(other)

    def __mul__(self, c):
        c = float(c)
        return LinExpr({k: c * v for k, v in self.terms.items()}, c * self.const)

    __rmul__ = __mul__

    def __truediv__(self, c):
        return self * (1.0 / c)

    def __neg__(self):
        return self * -1.0

    def __repr__(self):
        parts = [f"{v:+g}*x{k}" for k, v in sorted(self.terms.items())]
        if self.const or not parts:
            parts.append(f"{self.const:+g}")
        return " ".join(parts)


def lin_sum(items: Iterable) -> LinExpr:
    out = LinExpr()
    for it in items:
        out._iadd(it)
    return out


@dataclass(frozen=True)
class ConstraintRef:
    index: int
    name: str = ""


@dataclass(frozen=True)
class Objective:
    """``0.5 x'Px + q'x + constant`` with ``P`` symmetric PSD (CSC, full)."""

    P: sp.csc_matrix
    q: np.ndarray
    constant: float = 0.0

    def value(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.P @ x) + self.q @ x + self.constant)


@dataclass(frozen=True, eq=False)
class ConicProgram:
    """Immutable convex program.

    Cone ``k`` occupies rows ``cone_offsets[k]:cone_offsets[k+1]`` of
    ``C x + d``; the first two rows are ``t`` and ``u`` and the rest ``w``.
    """

    variables: tuple
    objective: Objective
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    G: sp.csr_matrix
    h: np.ndarray
    C: sp.csr_matrix
    d: np.ndarray
    cone_offsets: np.ndarray
    eq_names: tuple = ()
    name: str = ""
    _compiled: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n(self) -> int:
        return len(self.variables)

    @property
    def n_cones(self) -> int:
        return len(self.cone_offsets) - 1

    def with_objective(self, objective: Objective) -> ConicProgram:
        """Same constraints, new objective; compiled constraint data is shared."""
        _check_psd(objective.P)
        return dataclasses.replace(self, objective=objective, _compiled=self._compiled)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array([v.lower for v in self.variables], dtype=float)
        hi = np.array([v.upper for v in self.variables], dtype=float)
        return lo, hi

    def violation(self, x: np.ndarray) -> dict[str, float]:
        """Max absolute violation per constraint family at ``x``."""
        out = {"eq": 0.0, "ineq": 0.0, "bounds": 0.0, "soc": 0.0}
        if self.A_eq.shape[0]:
            out["eq"] = float(np.max(np.abs(self.A_eq @ x - self.b_eq)))
        if self.G.shape[0]:
            out["ineq"] = float(max(0.0, np.max(self.G @ x - self.h)))
        lo, hi = self.bounds()
        if self.n:
            out["bounds"] = float(max(0.0, np.max(lo - x), np.max(x - hi)))
        if self.n_cones:
            out["soc"] = float(max(0.0, -np.min(self.cone_margins(x))))
        return out

    def cone_margins(self, x: np.ndarray) -> np.ndarray:
        """``min(t*u - ||w||^2, t, u)`` for every cone."""
        y = self.C @ x + self.d
        off = self.cone_offsets
        t, u = y[off[:-1]], y[off[:-1] + 1]
        sq = np.add.reduceat(y * y, off[:-1]) - t * t - u * u
        return np.minimum(t * u - sq, np.minimum(t, u))

    def dump(self) -> str:
        """Human-readable listing, for debugging only."""
        names = [v.name for v in self.variables]
        lines = [f"program {self.name or '<anon>'}: {self.n} variables"]

        def row(mat, i, rhs_const=0.0):
            lo, hi = mat.indptr[i], mat.indptr[i + 1]
            terms = " ".join(f"{mat.data[k]:+g}*{names[mat.indices[k]]}" for k in range(lo, hi))
            return terms or "0"

        P = self.objective.P.tocoo()
        quad = " ".join(
            f"{0.5 * v:+g}*{names[i]}*{names[j]}" for i, j, v in zip(P.row, P.col, P.data) if v
        )
        lin = " ".join(f"{c:+g}*{names[i]}" for i, c in enumerate(self.objective.q) if c)
        lines.append(f"minimize {quad} {lin} {self.objective.constant:+g}".replace("  ", " "))
        for v in self.variables:
            if math.isfinite(v.lower) or math.isfinite(v.upper):
                lines.append(f"  bound {v.lower:g} <= {v.name} <= {v.upper:g}")
        for i in range(self.A_eq.shape[0]):
            label = self.eq_names[i] if i < len(self.eq_names) else ""
            lines.append(f"  eq[{i}]{(' ' + label) if label else ''}: {row(self.A_eq, i)} == {self.b_eq[i]:g}")
        for i in range(self.G.shape[0]):
            lines.append(f"  ineq[{i}]: {row(self.G, i)} <= {self.h[i]:g}")
        for k in range(self.n_cones):
            rows = range(self.cone_offsets[k], self.cone_offsets[k + 1])
            parts = [f"({row(self.C, r)} {self.d[r]:+g})" for r in rows]
            lines.append(f"  cone[{k}]: {parts[0]} * {parts[1]} >= ||{', '.join(parts[2:])}||^2")
        return "\n".join(lines)


class ProgramBuilder:
    """Mutable assembly helper; :meth:`build` returns a frozen program."""

    def __init__(self, name: str = ""):
        self.name = name
        self._vars: list[VariableRef] = []
        self._eq: list[tuple[dict, float]] = []
        self._eq_names: list[str] = []
        self._ineq: list[tuple[dict, float]] = []
        self._cones: list[list[LinExpr]] = []
        self._lin = LinExpr()
        self._quad: dict[tuple[int, int], float] = {}

    @property
    def n(self) -> int:
        return len(self._vars)

    def var(self, name: str, lower: float = -math.inf, upper: float = math.inf) -> VariableRef:
        if lower > upper:
            raise ValueError(f"variable {name}: lower bound {lower} exceeds upper bound {upper}")
        ref = VariableRef(len(self._vars), name, float(lower), float(upper))
        self._vars.append(ref)
        return ref

    def vars(self, name: str, n: int, lower=-math.inf, upper=math.inf) -> list[VariableRef]:
        lo = np.broadcast_to(np.asarray(lower, dtype=float), (n,))
        hi = np.broadcast_to(np.asarray(upper, dtype=float), (n,))
        return [self.var(f"{name}[{k}]", lo[k], hi[k]) for k in range(n)]

    def _check(self, e: LinExpr):
        for k in e.terms:
            if not 0 <= k < len(self._vars):
                raise KeyError(f"expression references undeclared variable id {k}")

    def add_eq(self, lhs, rhs=0.0, name: str = "") -> ConstraintRef:
        e = LinExpr.of(lhs) - rhs
        self._check(e)
        self._eq.append((e.terms, -e.const))
        self._eq_names.append(name)
        return ConstraintRef(len(self._eq) - 1, name)

    def add_le(self, lhs, rhs=0.0):
        e = LinExpr.of(lhs) - rhs
        self._check(e)
        self._ineq.append((e.terms, -e.const))

    def add_ge(self, lhs, rhs=0.0):
        self.add_le(LinExpr.of(rhs), lhs)

    def add_rotated_cone(self, t, u, w: Sequence):
        """Require ``t >= 0``, ``u >= 0`` and ``t * u >= sum(w_k^2)``."""
        exprs = [LinExpr.of(t), LinExpr.of(u)] + [LinExpr.of(x) for x in w]
        for e in exprs:
            self._check(e)
        self._cones.append(exprs)

    def add_linear_objective(self, expr):
        e = LinExpr.of(expr)
        self._check(e)
        self._lin._iadd(e)

    def add_square(self, weight: float, expr):
        """Add ``weight * expr^2`` to the objective (``weight >= 0``)."""
        if weight < 0:
            raise ValueError("square weight must be nonnegative")
        if weight == 0:
            return
        e = LinExpr.of(expr)
        self._check(e)
        items = list(e.terms.items())
        for i, a in items:
            for j, b in items:
                self._quad[(i, j)] = self._quad.get((i, j), 0.0) + 2.0 * weight * a * b
            self._lin.terms[i] = self._lin.terms.get(i, 0.0) + 2.0 * weight * a * e.const
        self._lin.const += weight * e.const**2

    def add_quadratic(self, i: VariableRef, j: VariableRef, coef: float):
        """Add ``coef * x_i * x_j``; convexity is checked at :meth:`build`."""
        if i.id == j.id:
            self._quad[(i.id, i.id)] = self._quad.get((i.id, i.id), 0.0) + 2.0 * coef
        else:
            for a, b in ((i.id, j.id), (j.id, i.id)):
                self._quad[(a, b)] = self._quad.get((a, b), 0.0) + coef

    def build(self) -> ConicProgram:
        n = len(self._vars)
        A_eq, b_eq = _rows_to_csr(self._eq, n)
        G, h = _rows_to_csr(self._ineq, n)
        crow, offsets = [], [0]
        for exprs in self._cones:
            for e in exprs:
                crow.append((e.terms, e.const))
            offsets.append(len(crow))
        C, d = _rows_to_csr(crow, n)
        if self._quad:
            (ij, vals) = zip(*self._quad.items())
            r, c = zip(*ij)
            P = sp.csc_matrix((vals, (r, c)), shape=(n, n))
        else:
            P = sp.csc_matrix((n, n))
        _check_psd(P)
        q = np.zeros(n)
        for k, v in self._lin.terms.items():
            q[k] += v
        obj = Objective(P, q, self._lin.const)
        return ConicProgram(
            variables=tuple(self._vars),
            objective=obj,
            A_eq=A_eq,
            b_eq=b_eq,
            G=G,
            h=h,
            C=C,
            d=d,
            cone_offsets=np.asarray(offsets, dtype=int),
            eq_names=tuple(self._eq_names),
            name=self.name,
        )


def _rows_to_csr(rows, n):
    indptr, indices, data, rhs = [0], [], [], []
    for terms, b in rows:
        for k, v in terms.items():
            if v != 0.0:
                indices.append(k)
                data.append(v)
        indptr.append(len(indices))
        rhs.append(b)
    mat = sp.csr_matrix((data, indices, indptr), shape=(len(rows), n))
    mat.sum_duplicates()
    return mat, np.asarray(rhs, dtype=float)


def _check_psd(P: sp.spmatrix):
    if P.nnz == 0:
        return
    if abs(P - P.T).max() > 1e-12 * max(1.0, abs(P).max()):
        raise ValueError("quadratic objective matrix is not symmetric")
    used = np.unique(P.tocoo().row)
    block = P[used][:, used].toarray()
    if np.allclose(block, np.diag(np.diag(block))):
        lo = float(np.min(np.diag(block)))
    else:
        lo = float(np.linalg.eigvalsh(block)[0])
    if lo < -1e-10 * max(1.0, float(np.max(np.abs(block)))):
        raise ValueError(f"objective is not convex: quadratic form has eigenvalue {lo:g}")


@dataclass
class Solution:
    status: str
    x: np.ndarray
    objective_value: float
    variables: tuple = ()
    eq_duals: np.ndarray | None = None
    max_violation: float = math.nan
    iterations: int = 0
    solve_time: float = 0.0
    solver_status: str = ""

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL

    @property
    def values(self) -> dict:
        return {v: float(self.x[v.id]) for v in self.variables}

    def value(self, ref: VariableRef) -> float:
        return extract(self, [ref])[0]

    def dual(self, con: ConstraintRef) -> float:
        if self.eq_duals is None:
            raise LookupError("solution carries no equality duals")
        return float(self.eq_duals[con.index])


def extract(solution: Solution, refs: Sequence[VariableRef]) -> list[float]:
    """Values of ``refs`` in the given order."""
    out = []
    for r in refs:
        if not (0 <= r.id < len(solution.variables)) or solution.variables[r.id] != r:
            raise KeyError(f"variable {r.name!r} is not part of this solution")
        out.append(float(solution.x[r.id]))
    return out


def _compile(program: ConicProgram):
    cache = program._compiled
    if "A" in cache:
        return cache
    n = program.n
    lo, hi = program.bounds()
    fixed = np.flatnonzero(lo == hi)
    up = np.flatnonzero(np.isfinite(hi) & (lo != hi))
    dn = np.flatnonzero(np.isfinite(lo) & (lo != hi))
    eye = sp.identity(n, format="csr")
    blocks = [program.A_eq, eye[fixed], program.G, eye[up], -eye[dn]]
    rhs = [program.b_eq, hi[fixed], program.h, hi[up], -lo[dn]]
    n_zero = program.A_eq.shape[0] + len(fixed)
    n_nonneg = program.G.shape[0] + len(up) + len(dn)

    # rotated cone (t, u, w) -> standard cone (t + u, t - u, 2w)
    soc_dims = []
    if program.n_cones:
        off = program.cone_offsets
        C, d = program.C, program.d
        m = C.shape[0]
        T = sp.lil_matrix((m, m))
        for k in range(program.n_cones):
            a, b = off[k], off[k + 1]
            T[a, a], T[a, a + 1] = 1.0, 1.0
            T[a + 1, a], T[a + 1, a + 1] = 1.0, -1.0
            for r in range(a + 2, b):
                T[r, r] = 2.0
            soc_dims.append(b - a)
        T = T.tocsr()
        # s = T(Cx + d) in K  <=>  (-TC) x + s = T d
        blocks.append(-(T @ C))
        rhs.append(T @ d)
    A = sp.vstack(blocks, format="csc") if blocks else sp.csc_matrix((0, n))
    b = np.concatenate(rhs) if rhs else np.zeros(0)
    cones = []
    if n_zero:
        cones.append(clarabel.ZeroConeT(n_zero))
    if n_nonneg:
        cones.append(clarabel.NonnegativeConeT(n_nonneg))
    cones.extend(clarabel.SecondOrderConeT(k) for k in soc_dims)
    cache.update(A=A, b=b, cones=cones, n_eq=program.A_eq.shape[0])
    return cache


def _run(P, q, A, b, cones, tol, max_iter):
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = max_iter
    settings.tol_feas = tol
    settings.tol_gap_abs = tol
    settings.tol_gap_rel = tol
    settings.max_threads = 1
    return clarabel.DefaultSolver(P, q, A, b, cones, settings).solve()


# statuses that usually mean the requested accuracy was out of reach, not that the problem is bad
_STALLED = ("AlmostSolved", "InsufficientProgress", "MaxIterations", "NumericalError")


def solve(program: ConicProgram, tol: float = DEFAULT_TOL, max_iter: int = 200) -> Solution:
    """Solve ``program``; infeasibility is reported through ``status``.

    A stalled solve is retried once with ``tol`` relaxed a hundredfold
    (never beyond 1e-7).
    """
    comp = _compile(program)
    n = program.n
    obj = program.objective
    P = sp.triu(obj.P, format="csc")
    A = comp["A"]
    if A.shape[0] == 0:
        if n == 0:
            return Solution(OPTIMAL, np.zeros(0), obj.constant, program.variables, np.zeros(0), 0.0)
        # Clarabel needs at least one row
        A = sp.csc_matrix((np.zeros(1), ([0], [0])), shape=(1, n))
        b = np.zeros(1)
        cones = [clarabel.NonnegativeConeT(1)]
    else:
        b, cones = comp["b"], comp["cones"]
    q = obj.q.astype(float)
    res = _run(P, q, A, b, cones, tol, max_iter)
    status = str(res.status)
    if status in _STALLED and tol < 1e-7:
        retry = _run(P, q, A, b, cones, min(tol * 100, 1e-7), max_iter)
        if str(retry.status) == "Solved":
            res, status = retry, "Solved"
    x = np.asarray(res.x, dtype=float)
    viol = max(program.violation(x).values()) if n else 0.0
    scale = max(1.0, float(np.max(np.abs(b))) if b.size else 1.0, float(np.max(np.abs(x))) if n else 1.0)
    if status == "Solved":
        out = OPTIMAL
    elif status == "AlmostSolved":
        out = OPTIMAL if viol <= max(tol, 1e-7) * scale else ITERATION_LIMIT
    elif status == "PrimalInfeasible":
        out = INFEASIBLE
    elif status == "DualInfeasible":
        out = UNBOUNDED
    else:
        out = ITERATION_LIMIT
    z = np.asarray(res.z, dtype=float)
    duals = z[: comp["n_eq"]].copy() if out == OPTIMAL else None
    value = obj.value(x) if out == OPTIMAL else math.nan
    return Solution(
        status=out,
        x=x,
        objective_value=value,
        variables=program.variables,
        eq_duals=duals,
        max_violation=viol,
        iterations=int(res.iterations),
        solve_time=float(res.solve_time),
        solver_status=status,
    )
