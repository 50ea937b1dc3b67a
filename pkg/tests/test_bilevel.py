import csv
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acbilevel import fixtures
from acbilevel.bilevel import (
    LowerLevelClearing,
    StorageSchedule,
    candidate_grid,
    discretized_bilevel_search,
    evaluate_profit,
    exhaustive_search,
    smoothed_complementarity,
    smoothed_complementarity_grad,
    storage_feasible,
    write_trace_csv,
)
from acbilevel.conic import solve_conic
from acbilevel.dualmodel import build_ll_dual, extract_dual
from acbilevel.netcase import StorageUnit, case_from_dict
from acbilevel.pfexact import solve_exact_polar_opf
from acbilevel.presolve import AlgorithmConfig, run_presolve

UNIT = StorageUnit(bus=1, soe_max=10.0, s_max=5.0, eta_ch=0.9, eta_dis=0.95, soe_init=5.0)


# ------------------------------------------------------ storage model

def test_energy_balance_example():
    s = StorageSchedule.from_net([2.0], [0.0], UNIT)
    assert s.soe[0] == pytest.approx(6.8)
    assert storage_feasible(s, UNIT) == []
    s.soe[0] = 6.7
    assert any("energy balance" in v for v in storage_feasible(s, UNIT))


def test_apparent_power_boundary():
    unit = StorageUnit(bus=1, soe_max=100.0, s_max=5.0, soe_init=50.0)
    assert storage_feasible(StorageSchedule.from_net([3.0], [4.0], unit), unit) == []
    assert storage_feasible(StorageSchedule.from_net([3.0], [4.01], unit), unit)


def test_indicator_forbids_simultaneous_operation():
    s = StorageSchedule(np.zeros(1), np.zeros(1), np.ones(1), np.ones(1), np.array([5.0 + 0.9 - 1 / 0.95]),
                        x_p=np.ones(1))
    assert any("indicator" in v for v in storage_feasible(s, UNIT))


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6))
def test_net_schedules_satisfy_balance(ps):
    s = StorageSchedule.from_net(ps, np.zeros(len(ps)), UNIT)
    viol = storage_feasible(s, UNIT)
    assert not any("balance" in v or "net power" in v for v in viol)
    in_bounds = bool(np.all((s.soe >= -1e-9) & (s.soe <= UNIT.soe_max + 1e-9)))
    assert (viol == []) == in_bounds
    assert np.all(np.minimum(s.p_ch, s.p_dis) == 0)


# ------------------------------------------------------------- profit

def test_profit_of_passive_schedule_is_zero():
    s = StorageSchedule.passive(UNIT, 3)
    assert evaluate_profit(s, (np.array([1.0, 2, 3]), np.array([4.0, 5, 6]))).profit == 0.0


def test_profit_arithmetic_and_modes():
    s = StorageSchedule.from_net([-1.0, 1.0], [0.0, 0.0], UNIT)
    assert evaluate_profit(s, ([30.0, 10.0], [0.0, 0.0])).profit == -20.0
    assert evaluate_profit(s, ([30.0, 10.0], [0.0, 0.0]), "literal").profit == 20.0
    with pytest.raises(ValueError):
        evaluate_profit(s, ([30.0, 10.0], [0.0, 0.0]), "other")


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=2), st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=2),
       st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=2))
def test_profit_ignores_reactive_price_without_reactive_action(ps, l1, l2):
    s = StorageSchedule.from_net(ps, [0.0, 0.0], UNIT)
    a = evaluate_profit(s, (l1, l2)).profit
    b = evaluate_profit(s, (l1, [0.0, 0.0])).profit
    assert a == b == pytest.approx(sum(p * l for p, l in zip(ps, l1)))


def test_sign_audit_buy_low_sell_high():
    case = fixtures.arbitrage_three_bus()
    sched = StorageSchedule.from_net([0.2, -0.4], [0.0, 0.0], case.storage)
    # exact re-clearing prices: cheap hour first, expensive hour second
    ex = solve_exact_polar_opf(case, (sched.p_es, sched.q_es))
    lmp, lmq = ex.price_at(case.storage.bus)
    assert lmp[0] < lmp[1]
    audited = evaluate_profit(sched, (-lmp, -lmq))
    assert audited.profit > 0
    assert evaluate_profit(sched, (-lmp, -lmq), "literal").profit == -audited.profit
    # the market-predicted figure agrees in sign
    pre = run_presolve(case)
    ev = LowerLevelClearing(case, pre, AlgorithmConfig()).evaluate(sched)
    assert ev.profit > 0


# -------------------------------------------------------------- grids

def test_candidate_grid():
    unit = StorageUnit(bus=1, soe_max=1.0, s_max=0.4)
    assert candidate_grid(unit, 1) == [(0.0, 0.0)]
    g5 = candidate_grid(unit, 5)
    assert g5[0] == (0.0, 0.0) and len(g5) == 5
    assert sorted(p for p, _ in g5) == pytest.approx([-0.4, -0.2, 0.0, 0.2, 0.4])
    g4 = candidate_grid(unit, 4)
    assert (0.0, 0.0) in g4 and len(g4) == 5
    gq = candidate_grid(unit, 3, 3)
    assert all(p * p + q * q <= 0.16 + 1e-12 for p, q in gq)
    assert {(0.0, 0.4), (0.0, -0.4), (0.4, 0.0)} <= set(gq) and (0.4, 0.4) not in gq


# ------------------------------------------------------------- search

def _full_horizon_profit(case, pre, p):
    """Independent oracle: clear the whole horizon at once and price the schedule."""
    sched = (np.asarray(p, float), np.zeros(case.horizon))
    dp = build_ll_dual(case, pre.op, pre.coeffs, pre.flags, sched)
    dr = solve_conic(dp)
    assert dr.optimal
    ds = extract_dual(case, pre.op, dp, dr)
    k = case.bus_position()[case.storage.bus]
    return float(np.sum(sched[0] * ds.lam1[:, k]))


@pytest.fixture(scope="module")
def arbitrage():
    case = fixtures.arbitrage_three_bus()
    cfg = AlgorithmConfig(grid_points=5)
    pre = run_presolve(case, cfg)
    return case, cfg, pre


def test_search_matches_exhaustive_enumeration(arbitrage):
    case, cfg, pre = arbitrage
    best, ev, trace = discretized_bilevel_search(case, cfg, pre)
    grid = [p for p, _ in candidate_grid(case.storage, 5)]
    oracle_best, oracle_sched = -np.inf, None
    for combo in itertools.product(grid, repeat=case.horizon):
        if storage_feasible(StorageSchedule.from_net(combo, [0.0] * case.horizon, case.storage), case.storage):
            continue
        val = _full_horizon_profit(case, pre, combo)
        if val > oracle_best:
            oracle_best, oracle_sched = val, combo
    assert best.p_es.tolist() == pytest.approx(list(oracle_sched))
    assert ev.profit == pytest.approx(oracle_best, rel=1e-9, abs=1e-9)
    # charge in the cheap step, discharge in the peak
    assert best.p_es[0] > 0 > best.p_es[1]
    assert ev.profit >= 0


def test_library_exhaustive_agrees(arbitrage):
    case, cfg, pre = arbitrage
    clearing = LowerLevelClearing(case, pre, cfg)
    best, ev, _ = discretized_bilevel_search(case, cfg, pre, clearing)
    ex_sched, ex_profit = exhaustive_search(case, cfg, clearing)
    assert ex_profit == pytest.approx(ev.profit, abs=1e-12)
    np.testing.assert_array_equal(ex_sched.p_es, best.p_es)
    with pytest.raises(ValueError):
        exhaustive_search(case, AlgorithmConfig(grid_points=7), clearing)


def test_trace_monotone_and_accepted_feasible(arbitrage, tmp_path):
    case, cfg, pre = arbitrage
    best, ev, trace = discretized_bilevel_search(case, cfg, pre)
    incumbents = [r.best_profit for r in trace]
    assert all(b >= a for a, b in zip(incumbents, incumbents[1:]))
    p = np.zeros(case.horizon)
    for r in trace:
        if r.accepted:
            p[r.t] = r.p_es
            assert storage_feasible(StorageSchedule.from_net(p, np.zeros(case.horizon), case.storage),
                                    case.storage) == []
    path = write_trace_csv(trace, tmp_path / "trace.csv")
    rows = list(csv.DictReader(path.open()))
    assert len(rows) == len(trace) and set(rows[0]) == {"sweep", "t", "p_es", "q_es", "profit", "accepted",
                                                        "best_profit", "note"}


def test_single_point_grid_is_passive(arbitrage):
    case, _, pre = arbitrage
    best, ev, _ = discretized_bilevel_search(case, AlgorithmConfig(grid_points=1), pre)
    assert np.all(best.p_es == 0) and ev.profit == 0.0


def test_flat_zero_prices_break_ties_towards_passive():
    case = case_from_dict({
        "name": "flat", "horizon": 1,
        "buses": [{"id": 1, "vmin": 0.9, "vmax": 1.1, "is_reference": True}], "branches": [],
        "generators": [{"id": 1, "bus": 1, "c2": 0.0, "c1": 0.0, "c0": 0.0, "pmin": 0.0, "pmax": 5.0,
                        "qmin": -5.0, "qmax": 5.0}],
        "loads": [{"id": 1, "bus": 1, "p_d": [1.0], "q_d": [0.0]}],
        "storage": {"bus": 1, "soe_max": 1.0, "s_max": 0.3, "soe_init": 0.5},
    })
    best, ev, trace = discretized_bilevel_search(case, AlgorithmConfig(grid_points=3))
    profits = [r.profit for r in trace if r.profit is not None]
    assert max(profits) == pytest.approx(0.0, abs=1e-9) and len(profits) == 3
    assert best.p_es.tolist() == [0.0] and ev.profit == 0.0


def test_failed_candidates_are_skipped(arbitrage, caplog):
    case, cfg, pre = arbitrage
    clearing = LowerLevelClearing(case, pre, cfg)
    real = clearing.clear

    def flaky(t, p, q):
        return None if (t, p) == (1, -0.4) else real(t, p, q)

    clearing.clear = flaky
    best, ev, trace = discretized_bilevel_search(case, cfg, pre, clearing)
    assert any(r.note == "solve failed" for r in trace)
    assert best.p_es[1] != -0.4 and ev.profit >= 0


def test_literal_mode_reverses_the_incentive(arbitrage):
    case, _, pre = arbitrage
    best, ev, _ = discretized_bilevel_search(case, AlgorithmConfig(grid_points=5, profit_mode="literal"), pre)
    assert ev.mode == "literal" and ev.profit >= 0
    assert not (best.p_es[0] > 0 > best.p_es[1])


# ---------------------------------------------------------- smoothing

def test_smoothing_examples():
    assert smoothed_complementarity(3.0, 0.0, 0.0) == 0.0
    assert smoothed_complementarity(1.0, 1.0, 0.0) == pytest.approx(2 - math.sqrt(2))
    assert smoothed_complementarity(0.0, 0.0, 1.0) == pytest.approx(-math.sqrt(2))
    # tiny arguments must not underflow onto the zero set
    assert smoothed_complementarity(4.5e-68, -4.4e-308, 0.0) < 0
    assert smoothed_complementarity(1e-212, 1e-212, 0.0) > 0
    assert smoothed_complementarity(1.0, 5e-324, 0.0) > 0


def test_smoothing_equivalence_on_grid():
    g = np.linspace(-10, 10, 201)
    X, Y = np.meshgrid(g, g)
    zero = np.abs(smoothed_complementarity(X, Y, 0.0)) <= 1e-12
    # x*y = 0 in exact arithmetic means one factor is zero
    perp = (X >= 0) & (Y >= 0) & ((X == 0) | (Y == 0))
    np.testing.assert_array_equal(zero, perp)


@settings(max_examples=200)
@given(st.floats(-10, 10), st.floats(-10, 10))
def test_smoothing_equivalence_property(x, y):
    on_set = x >= 0 and y >= 0 and (x == 0 or y == 0)
    assert (smoothed_complementarity(x, y, 0.0) == 0.0) == on_set


def test_smoothing_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    h = 1e-6
    for _ in range(100):
        x, y = rng.uniform(-10, 10, 2)
        eps = rng.uniform(0.01, 2.0)
        gx, gy = smoothed_complementarity_grad(x, y, eps)
        fx = (smoothed_complementarity(x + h, y, eps) - smoothed_complementarity(x - h, y, eps)) / (2 * h)
        fy = (smoothed_complementarity(x, y + h, eps) - smoothed_complementarity(x, y - h, eps)) / (2 * h)
        assert abs(gx - fx) <= 1e-6 and abs(gy - fy) <= 1e-6
    # defined at the origin for eps > 0
    assert np.all(np.isfinite(smoothed_complementarity_grad(0.0, 0.0, 0.1)))
