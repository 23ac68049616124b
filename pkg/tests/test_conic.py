import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evcoord import conic


def test_bounded_square():
    b = conic.ProgramBuilder()
    x = b.var("x", lower=3.0)
    b.add_square(1.0, x)
    sol = conic.solve(b.build())
    assert sol.optimal
    assert sol.value(x) == pytest.approx(3.0, abs=1e-7)
    assert sol.objective_value == pytest.approx(9.0, abs=1e-6)


def test_empty_feasible_set_is_reported():
    b = conic.ProgramBuilder()
    x = b.var("x")
    b.add_le(x, 1.0)
    b.add_ge(x, 2.0)
    sol = conic.solve(b.build())
    assert sol.status == conic.INFEASIBLE
    assert not sol.optimal


def test_unbounded_is_reported():
    b = conic.ProgramBuilder()
    x = b.var("x", upper=0.0)
    b.add_linear_objective(x)
    assert conic.solve(b.build()).status == conic.UNBOUNDED


def test_equality_dual_sign():
    # stationarity 2x + y = 0 at x = 3
    b = conic.ProgramBuilder()
    x = b.var("x")
    b.add_square(1.0, x)
    row = b.add_eq(x, 3.0, name="fix")
    sol = conic.solve(b.build())
    assert sol.dual(row) == pytest.approx(-6.0, abs=1e-6)


def test_rotated_cone():
    b = conic.ProgramBuilder()
    t = b.var("t")
    u = b.var("u")
    w = b.var("w")
    b.add_eq(u, 1.0)
    b.add_eq(w, 0.5)
    b.add_rotated_cone(t, u, [w])
    b.add_linear_objective(t)
    prog = b.build()
    sol = conic.solve(prog)
    assert sol.value(t) == pytest.approx(0.25, abs=1e-7)
    assert prog.cone_margins(sol.x).min() >= -1e-8


def test_non_psd_objective_rejected():
    b = conic.ProgramBuilder()
    x = b.var("x")
    b.add_quadratic(x, x, -1.0)
    with pytest.raises(ValueError):
        b.build()


def test_negative_square_weight_rejected():
    b = conic.ProgramBuilder()
    x = b.var("x")
    with pytest.raises(ValueError):
        b.add_square(-1.0, x)


def test_inverted_bounds_rejected():
    with pytest.raises(ValueError):
        conic.ProgramBuilder().var("x", lower=2.0, upper=1.0)


def test_undeclared_variable_rejected():
    other = conic.ProgramBuilder().var("x")
    b = conic.ProgramBuilder()
    with pytest.raises(KeyError):
        b.add_eq(other + other, 1.0)


def test_extract_unknown_ref():
    b = conic.ProgramBuilder()
    x = b.var("x", lower=0.0)
    b.add_square(1.0, x)
    sol = conic.solve(b.build())
    ghost = conic.VariableRef(7, "ghost")
    with pytest.raises(KeyError):
        conic.extract(sol, [ghost])


def test_resolve_is_bit_identical():
    b = conic.ProgramBuilder()
    xs = b.vars("x", 5, lower=-1.0, upper=2.0)
    for k, x in enumerate(xs):
        b.add_square(1.0 + k, x - 0.3 * k)
    b.add_le(conic.lin_sum(xs), 1.0)
    prog = b.build()
    a, c = conic.solve(prog), conic.solve(prog)
    assert a.status == c.status
    assert np.array_equal(a.x, c.x)
    assert abs(a.objective_value - c.objective_value) <= 1e-9


def test_with_objective_keeps_constraints():
    b = conic.ProgramBuilder()
    x = b.var("x", lower=-1.0, upper=1.0)
    prog = b.build()
    q = np.array([1.0])
    lo = conic.solve(prog.with_objective(conic.Objective(prog.objective.P, q, 0.0)))
    hi = conic.solve(prog.with_objective(conic.Objective(prog.objective.P, -q, 0.0)))
    assert lo.value(x) == pytest.approx(-1.0, abs=1e-7)
    assert hi.value(x) == pytest.approx(1.0, abs=1e-7)


def test_violation_families():
    b = conic.ProgramBuilder()
    x = b.var("x", lower=0.0, upper=1.0)
    y = b.var("y")
    b.add_eq(x + y, 1.0)
    b.add_le(x - y, 0.0)
    prog = b.build()
    v = prog.violation(np.array([2.0, 0.5]))
    assert v["bounds"] == pytest.approx(1.0)
    assert v["eq"] == pytest.approx(1.5)
    assert v["ineq"] == pytest.approx(1.5)


def test_empty_program():
    sol = conic.solve(conic.ProgramBuilder().build())
    assert sol.optimal and sol.objective_value == 0.0


def test_dump_lists_constraints():
    b = conic.ProgramBuilder("demo")
    x = b.var("x", lower=0.0)
    b.add_eq(x, 1.0, name="one")
    text = b.build().dump()
    assert "one" in text and "x" in text


@settings(max_examples=40, deadline=None)
@given(
    st.lists(
        st.tuples(
            st.floats(-5, 5, allow_nan=False),
            st.floats(-3, 0, allow_nan=False),
            st.floats(0, 3, allow_nan=False),
        ),
        min_size=1,
        max_size=6,
    )
)
def test_box_projection_matches_clip(rows):
    # argmin sum (x - c)^2 over a box is the clipped target; interior-point
    # iterates are only ~sqrt(tol) accurate in x when the optimum value is 0
    b = conic.ProgramBuilder()
    xs = []
    for c, lo, hi in rows:
        x = b.var("x", lower=lo, upper=hi)
        b.add_square(1.0, x - c)
        xs.append(x)
    sol = conic.solve(b.build())
    want = np.array([min(max(c, lo), hi) for c, lo, hi in rows])
    assert sol.optimal
    best = float(sum((w - c) ** 2 for w, (c, _, _) in zip(want, rows)))
    assert sol.objective_value == pytest.approx(best, abs=1e-6)
    assert np.allclose(conic.extract(sol, xs), want, atol=1e-3)
    assert sol.max_violation <= 1e-7


@settings(max_examples=25, deadline=None)
@given(st.floats(0.1, 10), st.floats(0.1, 10))
def test_rotated_cone_product(u0, w0):
    b = conic.ProgramBuilder()
    t, u, w = b.var("t"), b.var("u"), b.var("w")
    b.add_eq(u, u0)
    b.add_eq(w, w0)
    b.add_rotated_cone(t, u, [w])
    b.add_linear_objective(t)
    sol = conic.solve(b.build())
    assert math.isclose(sol.value(t), w0**2 / u0, rel_tol=1e-6, abs_tol=1e-7)
