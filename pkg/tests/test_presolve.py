import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from acbilevel import fixtures
from acbilevel.bilevel import LowerLevelClearing, discretized_bilevel_search
from acbilevel.conic import solve_conic
from acbilevel.cpsota import PresolveFlags, build_ll_primal_step, compute_operating_coeffs
from acbilevel.dualmodel import build_ll_dual_step
from acbilevel.netcase import build_index_sets
from acbilevel.pfexact import solve_exact_polar_opf
from acbilevel.presolve import (
    AlgorithmConfig,
    LowerLevelError,
    MarginalReport,
    determine_lambda_gamma,
    equality_form_marginals,
    flags_from_marginals,
    run_algorithm1,
    run_presolve,
    solve_primal_step,
    warm_start_dual,
    warm_start_primal,
)
from acbilevel.report import verify_solution


def _case(name, horizon=2):
    case = fixtures.FIXTURES[name]()
    return case.truncated(horizon) if case.horizon > horizon else case


# ----------------------------------------------------------------- config

@pytest.mark.parametrize("bad", [
    {"phi_threshold": 0.0}, {"phi_threshold": 1.5}, {"marginal_tol": 0.0}, {"loop_tol": -1.0},
    {"solver_tol": 0.0}, {"loop_max": 0}, {"damping": 0.0}, {"grid_points": 0}, {"q_grid_points": 2},
    {"marginal_method": "newton"}, {"profit_mode": "other"},
])
def test_config_rejects_invalid(bad):
    with pytest.raises(ValueError):
        AlgorithmConfig(**bad)


def test_config_defaults():
    c = AlgorithmConfig()
    assert (c.phi_threshold, c.marginal_tol, c.loop_tol, c.damping) == (0.8, 1e-7, 1e-4, 1.0)
    assert (c.grid_points, c.profit_tol, c.sweeps, c.q_grid_points) == (7, 1e-6, 20, 1)


# ------------------------------------------------------------ flag rules

def _report(v, c):
    v, c = np.atleast_2d(v), np.atleast_2d(c)
    return MarginalReport(v, c, np.zeros(v.shape[0]), "lstsq")


def test_flag_sign_rules_examples():
    lam, gam = flags_from_marginals(_report([0.3, -0.3, 5e-8, -5e-8, 0.0], [-0.2, 0.2, -5e-8, 5e-8, 0.0]))
    assert lam.tolist() == [[True, False, False, False, False]]
    assert gam.tolist() == [[True, False, False, False, False]]


@given(arrays(float, (3, 4), elements=st.floats(-1, 1)), arrays(float, (3, 5), elements=st.floats(-1, 1)),
       st.floats(1e-9, 1e-2))
def test_flag_sign_rules_property(mv, mc, tol):
    lam, gam = flags_from_marginals(_report(mv, mc), tol)
    for t in range(3):
        for k in range(4):
            assert lam[t, k] == (mv[t, k] > tol)
        for k in range(5):
            assert gam[t, k] == (mc[t, k] < -tol)


def _rhs_sensitivity(prog, row, h=1e-5):
    """Central difference of the optimal value in the right-hand side of ``row``."""
    vals = []
    for sgn in (1.0, -1.0):
        p = dataclasses.replace(prog, b=prog.b.copy())
        p.b[row] += sgn * h
        r = solve_conic(p)
        assert r.optimal
        vals.append(r.objective)
    return (vals[0] - vals[1]) / (2 * h)


@pytest.mark.parametrize("name", ["three_bus", "five_bus", "arbitrage_three_bus"])
def test_marginals_match_rhs_finite_differences(name):
    case = _case(name, 1)
    ex = solve_exact_polar_opf(case)
    coeffs = compute_operating_coeffs(case, ex.op)
    phi = np.zeros((1, 2 * len(case.branches)), dtype=bool)
    rep = equality_form_marginals(case, ex, coeffs, phi)
    prog = build_ll_primal_step(case, ex.op, coeffs, PresolveFlags.uniform(case), None, 0)
    rows = {nm: k for k, nm in enumerate(prog.row_names)}
    for k, (e, _, _) in enumerate(build_index_sets(case).E):
        fd = _rhs_sensitivity(prog, rows[f"v_lin[{e}]"])
        assert rep.voltage[0, k] == pytest.approx(fd, rel=1e-4, abs=1e-4)
    for k, (i, j) in enumerate(build_index_sets(case).N_P):
        fd = _rhs_sensitivity(prog, rows[f"cos_lin[{i},{j}]"])
        assert rep.cosine[0, k] == pytest.approx(fd, rel=1e-4, abs=1e-4)


@pytest.mark.parametrize("name", ["three_bus", "five_bus", "overload_three_bus", "phase_shift_three_bus"])
def test_least_squares_and_conic_marginals_agree(name):
    case = _case(name)
    ex = solve_exact_polar_opf(case)
    coeffs = compute_operating_coeffs(case, ex.op)
    phi = np.zeros((case.horizon, 2 * len(case.branches)), dtype=bool)
    a = equality_form_marginals(case, ex, coeffs, phi, method="lstsq")
    b = equality_form_marginals(case, ex, coeffs, phi, method="conic")
    # the known point satisfies the stationarity system: step 2 reproduces step 1
    assert a.residual.max() <= 1e-6
    np.testing.assert_allclose(a.voltage, b.voltage, atol=1e-5)
    np.testing.assert_allclose(a.cosine, b.cosine, atol=1e-5)


def test_flags_idempotent():
    case = _case("five_bus")
    ex = solve_exact_polar_opf(case)
    coeffs = compute_operating_coeffs(case, ex.op)
    first = determine_lambda_gamma(case, ex.op, coeffs, None, exact=ex)
    second = determine_lambda_gamma(case, ex.op, coeffs, None, exact=ex)
    third = determine_lambda_gamma(case, ex.op, coeffs, None)  # re-solves step 1 itself
    for other in (second, third):
        np.testing.assert_array_equal(first[0], other[0])
        np.testing.assert_array_equal(first[1], other[1])


def test_flags_respect_definedness():
    case = _case("three_bus")
    pre = run_presolve(case)
    assert not np.any(pre.flags.lam & ~pre.coeffs.defined)


# ---------------------------------------------------------- warm starts

@pytest.mark.parametrize("name", ["three_bus", "five_bus"])
def test_passive_schedule_reproduces_operating_point(name):
    case = _case(name)
    pre = run_presolve(case)
    assert np.abs(pre.primal.v_d).max() <= 1e-6
    assert np.abs(pre.primal.th_d).max() <= 1e-6
    assert abs(pre.primal.objective - pre.exact.objective) / abs(pre.exact.objective) <= 1e-6
    assert pre.gap <= 1e-6


@pytest.mark.parametrize("name", ["three_bus", "five_bus"])
def test_small_injection_moves_deltas_like_exact_resolve(name):
    case = _case(name)
    pre = run_presolve(case)
    sched = (np.full(case.horizon, 0.01), np.zeros(case.horizon))
    prim, _ = warm_start_primal(case, pre.op, pre.coeffs, pre.flags, sched)
    ex = solve_exact_polar_opf(case, sched)
    assert 0 < np.abs(prim.th_d).max() <= 0.02 and np.abs(prim.v_d).max() <= 0.02
    # the delta follows the exact re-solve far closer than its own size
    dv = np.abs(pre.op.v_op + prim.v_d - ex.op.v_op).max()
    dth = np.abs(pre.op.th_op + prim.th_d - ex.op.th_op).max()
    assert dth <= 0.1 * np.abs(prim.th_d).max() and dv <= 0.5 * max(np.abs(prim.v_d).max(), 1e-6)


def test_dual_without_flags_has_no_cones():
    case = _case("three_bus")
    ex = solve_exact_polar_opf(case)
    c = compute_operating_coeffs(case, ex.op)
    flags = PresolveFlags.uniform(case)
    assert not build_ll_dual_step(case, ex.op, c, flags, None, 0).socs
    prim, _ = warm_start_primal(case, ex.op, c, flags)
    dual, _ = warm_start_dual(case, ex.op, c, flags)
    assert abs(prim.objective - dual.objective) / max(1.0, abs(prim.objective)) <= 1e-6


@pytest.mark.parametrize("name", ["three_bus", "five_bus", "arbitrage_three_bus"])
def test_warm_start_halves_iterations(name):
    case = _case(name)
    pre = run_presolve(case)
    loads = tuple(dataclasses.replace(ld, p_d=tuple(x + 1e-3 for x in ld.p_d)) for ld in case.loads)
    bumped = dataclasses.replace(case, loads=loads)
    for t in range(case.horizon):
        for build, warm in ((build_ll_primal_step, pre.warm.primal[t]), (build_ll_dual_step, pre.warm.dual[t])):
            prog = build(bumped, pre.op, pre.coeffs, pre.flags, None, t)
            cold, hot = solve_conic(prog), solve_conic(prog, warm)
            assert cold.optimal and hot.optimal
            assert hot.objective == pytest.approx(cold.objective, rel=1e-8, abs=1e-8)
            # iterations until the requested tolerance is met
            assert hot.tol_iterations <= cold.tol_iterations / 2, (t, hot.tol_iterations, cold.tol_iterations)


def test_solver_failure_carries_census():
    case = _case("two_bus", 1)
    ex = solve_exact_polar_opf(case)
    c = compute_operating_coeffs(case, ex.op)
    flags = PresolveFlags.uniform(case)
    # demand far beyond generation makes the balance infeasible
    loads = tuple(dataclasses.replace(ld, p_d=(50.0,)) for ld in case.loads)
    with pytest.raises(LowerLevelError) as info:
        solve_primal_step(dataclasses.replace(case, loads=loads), ex.op, c, flags, None, 0)
    assert info.value.census["variables"]["Pg"] == len(case.generators)


# --------------------------------------------------------------- driver

def test_passive_only_run():
    case = _case("arbitrage_three_bus")
    rep = run_algorithm1(case, AlgorithmConfig(run_bilevel=False))
    assert rep.failed_stage is None
    assert rep.profit["market_predicted"] == 0.0 and rep.profit["exact_repriced"] == 0.0
    ll = [s for s in rep.stages if s["name"] == "ll_primal"][0]
    assert ll["residuals"]["max_v_delta"] <= 1e-6 and ll["residuals"]["max_th_delta"] <= 1e-6
    assert [s["step"] for s in rep.stages] == [1, 2, 3, 4, 5, 6]


def test_single_loop_equals_plain_composition():
    case = _case("arbitrage_three_bus")
    cfg = AlgorithmConfig(grid_points=5, loop_max=1)
    rep = run_algorithm1(case, cfg)
    pre = run_presolve(case, cfg)
    best, ev, _ = discretized_bilevel_search(case, cfg, pre, LowerLevelClearing(case, pre, cfg))
    ver = verify_solution(case, best, predicted=ev, mode=cfg.profit_mode)
    assert rep.schedule["p_es"] == best.p_es.tolist()
    assert rep.profit["market_predicted"] == ev.profit
    assert rep.profit["exact_repriced"] == ver.exact_profit
    assert rep.approximation["exact_cost"] == ver.exact_cost
    assert len(rep.loop_trace) == 1


def test_loop_profit_nonnegative_and_nondecreasing():
    case = _case("arbitrage_three_bus")
    rep = run_algorithm1(case, AlgorithmConfig(grid_points=5, loop_max=4))
    profits = [row["market_predicted_profit"] for row in rep.loop_trace]
    assert all(p >= 0 for p in profits)
    assert all(b >= a - 1e-9 for a, b in zip(profits, profits[1:]))
    assert rep.converged and rep.loop_trace[-1]["schedule_change"] <= 1e-4


def test_stage_failure_gives_partial_report(monkeypatch):
    import acbilevel.bilevel as bl

    def boom(*a, **k):
        raise RuntimeError("injected")

    monkeypatch.setattr(bl, "discretized_bilevel_search", boom)
    rep = run_algorithm1(_case("arbitrage_three_bus"), AlgorithmConfig(grid_points=3))
    assert rep.failed_stage == "bilevel" and "injected" in rep.error
    assert [s["step"] for s in rep.stages] == [1, 2, 3, 4]
    rep.validate()


def test_case_without_storage_is_reported():
    rep = run_algorithm1(_case("two_bus"))
    assert rep.failed_stage == "input"
