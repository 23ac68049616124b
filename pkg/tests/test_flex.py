import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from evcoord.flex import (
    BRUTE_FORCE_CAP,
    EVDispatch,
    EVSession,
    FlexibilityError,
    OutOfRegionError,
    StationFleet,
    UnservableSession,
    brute_force_region,
    build_flex_program,
    compute_flexibility,
    disaggregate,
    presence,
    validate_dispatch,
)


def ev(i, a, d, need_kwh=12.0, soc0=0.2, **kw):
    cap = kw.pop("capacity_kwh", 40.0)
    return EVSession(f"ev{i}", a, d, soc0, soc0 + need_kwh / cap, capacity_kwh=cap, **kw)


@pytest.fixture(scope="module")
def busy_fleet():
    # 30 vehicles staggered between 6:00 and 22:00, 20 chargers
    rng = np.random.default_rng(3)
    evs = []
    for i in range(30):
        a = int(rng.integers(7, 12))
        d = int(rng.integers(18, 24))
        evs.append(ev(i, a, d))
    return StationFleet("S", tuple(evs), n_chargers=20)


@pytest.fixture(scope="module")
def busy_region(busy_fleet):
    return compute_flexibility(busy_fleet, w=0.01)


def test_presence_is_half_open():
    e = ev(0, 7, 23)
    assert presence(e, 6) == 0
    assert presence(e, 7) == 1
    assert presence(e, 22) == 1
    assert presence(e, 23) == 0


def test_unservable_session_rejected():
    # 12 kWh in one slot at 6.6 kW cannot be done
    with pytest.raises(UnservableSession) as info:
        StationFleet("S", (ev(0, 5, 6),))
    assert info.value.session_id == "ev0"


def test_departure_before_arrival_rejected():
    with pytest.raises(UnservableSession):
        StationFleet("S", (ev(0, 9, 9, need_kwh=0.0),))


def test_window_outside_horizon_rejected():
    with pytest.raises(UnservableSession):
        StationFleet("S", (ev(0, 20, 26),), horizon=24)


def test_variable_count_single_ev():
    prog = build_flex_program(StationFleet("S", (ev(0, 7, 23),)))
    assert prog.n == 2 * (24 + 24 + 24) + 2 * 24


def test_empty_fleet_region_is_zero():
    reg = compute_flexibility(StationFleet("S", ()))
    assert np.all(reg.lower_kw == 0) and np.all(reg.upper_kw == 0)


def test_zero_need_fleet_has_zero_lower_envelope():
    fleet = StationFleet("S", tuple(ev(i, 3 + i, 12 + i, need_kwh=0.0, soc0=0.5) for i in range(4)), v2g=False)
    reg = compute_flexibility(fleet)
    assert np.allclose(reg.lower_kw, 0.0, atol=1e-6)
    assert reg.upper_kw.max() > 0


def test_width_only_inside_presence_window(busy_fleet, busy_region):
    present = busy_fleet.presence_matrix().sum(axis=0) > 0
    assert np.allclose(busy_region.width[~present], 0.0, atol=1e-6)
    assert busy_region.width[present].max() > 1.0


def test_upper_bounded_by_chargers(busy_fleet, busy_region):
    assert busy_region.upper_kw.max() <= 20 * 6.6 + 1e-6


def test_status_shared_across_families(busy_region):
    assert np.allclose(busy_region.upper_schedules.status, busy_region.lower_schedules.status, atol=1e-7)


def test_per_ev_order_holds(busy_region):
    assert np.all(busy_region.upper_schedules.power >= busy_region.lower_schedules.power - 1e-6)


def test_width_monotone_in_w(busy_fleet, busy_region):
    wide = compute_flexibility(busy_fleet, w=0.0)
    assert wide.total_width() >= busy_region.total_width() - 1e-6


def test_negative_w_rejected(busy_fleet):
    with pytest.raises(ValueError):
        build_flex_program(busy_fleet, w=-1.0)


def test_overcommitted_chargers_infeasible():
    # two vehicles each needing full power in the only shared slot, one charger
    fleet = StationFleet("S", (ev(0, 1, 2, need_kwh=6.6), ev(1, 1, 2, need_kwh=6.6)), n_chargers=1, horizon=3)
    with pytest.raises(FlexibilityError):
        compute_flexibility(fleet)


@pytest.mark.parametrize("side", ["upper", "lower"])
def test_boundaries_disaggregate_cleanly(busy_fleet, busy_region, side):
    traj = busy_region.upper_kw if side == "upper" else busy_region.lower_kw
    rep = validate_dispatch(busy_fleet, disaggregate(busy_region, traj))
    assert rep.max_violation <= 1e-7, str(rep)


def test_out_of_region_reports_slot(busy_region):
    traj = busy_region.upper_kw.copy()
    traj[11] += 5.0
    with pytest.raises(OutOfRegionError) as info:
        disaggregate(busy_region, traj)
    assert info.value.slot == 12


def test_wrong_length_trajectory(busy_region):
    with pytest.raises(ValueError):
        disaggregate(busy_region, np.zeros(5))


def test_alpha_zero_on_degenerate_slots(busy_region):
    d = disaggregate(busy_region, busy_region.lower_kw + 0.5 * busy_region.width)
    flat = busy_region.width <= 1e-9
    assert np.all(d.alpha[flat] == 0.0)


def test_validate_flags_double_power():
    fleet = StationFleet("S", (ev(0, 1, 4, need_kwh=0.0, soc0=0.3),), horizon=4)
    p = np.array([[13.2, 0.0, 0.0, 0.0]])
    s = np.array([[1.0, 0.0, 0.0, 0.0]])
    soc = 0.3 + np.concatenate(([0.0], np.cumsum(p[0, :-1]) / 40.0))[None, :]
    rep = validate_dispatch(fleet, EVDispatch(p, s, soc))
    assert rep.families["power_bounds"] == pytest.approx(6.6)


def test_validate_flags_charger_excess():
    evs = tuple(ev(i, 1, 3, need_kwh=0.0, soc0=0.3) for i in range(25))
    fleet = StationFleet("S", evs, n_chargers=20, horizon=3)
    p = np.zeros((25, 3))
    p[:, 0] = 1.0
    s = np.zeros((25, 3))
    s[:, 0] = 1.0
    soc = np.tile([0.3, 0.3 + 1.0 / 40.0, 0.3 + 1.0 / 40.0], (25, 1))
    rep = validate_dispatch(fleet, EVDispatch(p, s, soc))
    assert rep.families["charger_count"] == pytest.approx(5.0)
    assert rep.families["power_bounds"] == 0.0
    assert not rep.ok


def test_seeded_uniform_trajectories(busy_fleet, busy_region):
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        traj = busy_region.lower_kw + rng.uniform(size=24) * busy_region.width
        worst = max(worst, validate_dispatch(busy_fleet, disaggregate(busy_region, traj)).max_violation)
    assert worst <= 1e-6


@settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.lists(st.floats(0.0, 1.0), min_size=24, max_size=24))
def test_any_in_region_trajectory_is_realisable(busy_fleet, busy_region, u):
    traj = busy_region.lower_kw + np.array(u) * busy_region.width
    rep = validate_dispatch(busy_fleet, disaggregate(busy_region, traj))
    assert rep.max_violation <= 1e-6, str(rep)


@st.composite
def small_fleets(draw):
    T = 5
    n = draw(st.integers(1, 4))
    evs = []
    for i in range(n):
        a = draw(st.integers(1, 3))
        d = draw(st.integers(a + 1, T))
        need = draw(st.floats(0.0, 6.6 * (d - a) * 0.9))
        soc0 = draw(st.floats(0.1, 0.4))
        evs.append(ev(i, a, d, need_kwh=need, soc0=soc0, capacity_kwh=40.0))
    return StationFleet("S", tuple(evs), n_chargers=draw(st.integers(n, n + 1)), horizon=T, v2g=draw(st.booleans()))


@settings(max_examples=40, deadline=None)
@given(small_fleets(), st.lists(st.floats(0.0, 1.0), min_size=5, max_size=5), st.sampled_from([0.0, 0.01, 0.1]))
def test_realisable_for_random_fleets(fleet, u, w):
    reg = compute_flexibility(fleet, w=w)
    traj = reg.lower_kw + np.array(u) * reg.width
    rep = validate_dispatch(fleet, disaggregate(reg, traj))
    assert rep.max_violation <= 1e-6, str(rep)
    if not fleet.v2g:
        assert np.all(reg.lower_kw >= -1e-7)


# brute-force oracle


def test_brute_force_single_ev():
    # 1 EV over 3 slots, one slot of full charging needed, step = p_chg
    e = EVSession("e", 1, 3, 0.3, 0.3 + 6.6 / 40.0, capacity_kwh=40.0, p_chg_kw=6.6)
    reg = brute_force_region(StationFleet("S", (e,), horizon=3, v2g=False), 6.6)
    assert np.allclose(reg.upper_kw, [6.6, 6.6, 0.0])
    assert np.allclose(reg.lower_kw, [0.0, 0.0, 0.0])


def test_brute_force_energy_cap_clips_upper():
    # only one slot of headroom below soc_max, so charging twice is infeasible
    e = EVSession("e", 1, 4, 0.3, 0.3, soc_max=0.3 + 6.6 / 40.0, capacity_kwh=40.0, p_chg_kw=6.6)
    reg = brute_force_region(StationFleet("S", (e,), horizon=4, v2g=False), 6.6)
    assert np.allclose(reg.upper_kw, [6.6, 6.6, 6.6, 0.0])


def test_brute_force_deadline_forces_charge():
    e = EVSession("e", 1, 3, 0.2, 0.2 + 13.2 / 40.0, capacity_kwh=40.0, p_chg_kw=6.6)
    reg = brute_force_region(StationFleet("S", (e,), horizon=3, v2g=False), 6.6)
    assert np.allclose(reg.lower_kw, [6.6, 6.6, 0.0])


def test_brute_force_empty_fleet():
    reg = brute_force_region(StationFleet("S", (), horizon=4), 1.0)
    assert np.all(reg.upper_kw == 0) and np.all(reg.lower_kw == 0)


def test_brute_force_one_charger_caps_upper():
    evs = (ev(0, 1, 4, need_kwh=0.0, soc0=0.3), ev(1, 1, 4, need_kwh=0.0, soc0=0.3))
    reg = brute_force_region(StationFleet("S", evs, n_chargers=1, horizon=4), 2.2)
    assert reg.upper_kw.max() <= 6.6 + 1e-9


def test_brute_force_refuses_large_instances():
    evs = tuple(ev(i, 1, 4, need_kwh=0.0, soc0=0.3) for i in range(3))
    with pytest.raises(ValueError):
        brute_force_region(StationFleet("S", evs, horizon=4), 1.0)
    with pytest.raises(ValueError):
        brute_force_region(StationFleet("S", (ev(0, 1, 5, need_kwh=0.0, soc0=0.3),), horizon=5), 1.0)
    assert BRUTE_FORCE_CAP >= 1_000_000


def test_brute_force_cap_applies():
    with pytest.raises(ValueError):
        brute_force_region(StationFleet("S", (ev(0, 1, 4, need_kwh=0.0, soc0=0.3),), horizon=4), 0.001)


def test_lp_box_is_inner_to_enumeration():
    # the two-witness box sits inside the per-slot extremes on this family
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(30):
        evs = []
        for i in range(int(rng.integers(1, 3))):
            a = int(rng.integers(1, 3))
            d = int(rng.integers(a + 1, 5))
            need = 2.2 * int(rng.integers(0, 3 * (d - a) + 1))
            evs.append(EVSession(f"e{i}", a, d, 0.3, 0.3 + need / 40.0, 0.1, 0.9, 40.0, 6.6))
        fleet = StationFleet("S", tuple(evs), n_chargers=2, horizon=4, v2g=bool(rng.integers(0, 2)))
        reg = compute_flexibility(fleet, w=0.0)
        bf = brute_force_region(fleet, 2.2)
        assert np.all(bf.lower_kw <= reg.lower_kw + 1e-6)
        assert np.all(bf.upper_kw >= reg.upper_kw - 1e-6)
        checked += 1
    assert checked == 30


def test_single_trajectory_box_misses_slotwise_extremes():
    # one slot of headroom over two slots: enumeration reaches p_chg in both,
    # any single upper witness only in total
    e = EVSession("e", 1, 3, 0.3, 0.3, soc_max=0.3 + 6.6 / 40.0, capacity_kwh=40.0, p_chg_kw=6.6)
    fleet = StationFleet("S", (e,), horizon=3, v2g=False)
    reg = compute_flexibility(fleet, w=0.0)
    bf = brute_force_region(fleet, 6.6)
    assert reg.upper_kw[:2].sum() == pytest.approx(6.6, abs=1e-6)
    assert np.allclose(bf.upper_kw[:2], 6.6)
