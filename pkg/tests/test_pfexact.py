import json
import math

import numpy as np
import pytest
from scipy.optimize import brentq, fsolve

from acbilevel import fixtures
from acbilevel.netcase import case_from_dict, case_to_dict
from acbilevel.pfexact import (
    ExactSolution,
    FixedInjections,
    OPFInfeasibleError,
    PowerFlowDivergence,
    SingularJacobianError,
    newton_power_flow,
    select_phi_flags,
    solve_exact_polar_opf,
)


# ------------------------------------------------------------ oracles

def ybus_oracle(case):
    """Complex bus admittance matrix and per-branch end admittances."""
    pos = case.bus_position()
    n = len(case.buses)
    Y = np.zeros((n, n), complex)
    ends = []
    for br in sorted(case.branches, key=lambda b: b.id):
        ys = complex(br.g, br.b)
        a = br.tau * np.exp(1j * br.sigma)
        yff = (ys + complex(br.g_fr, br.b_fr)) / br.tau**2
        ytt = ys + complex(br.g_to, br.b_to)
        yft = -ys / np.conj(a)
        ytf = -ys / a
        i, j = pos[br.from_bus], pos[br.to_bus]
        Y[i, i] += yff
        Y[j, j] += ytt
        Y[i, j] += yft
        Y[j, i] += ytf
        ends.append((i, j, yff, yft, ytt, ytf))
    for sh in case.shunts:
        Y[pos[sh.bus], pos[sh.bus]] += complex(sh.g_sh, sh.b_sh)
    return Y, ends


def oracle_flows(case, v, th):
    _, ends = ybus_oracle(case)
    V = v * np.exp(1j * th)
    fwd, rev = [], []
    for i, j, yff, yft, ytt, ytf in ends:
        fwd.append(V[i] * np.conj(yff * V[i] + yft * V[j]))
        rev.append(V[j] * np.conj(ytt * V[j] + ytf * V[i]))
    S = np.array(fwd + rev)
    return S.real, S.imag


def oracle_mismatch(case, t, v, th, p_inj, q_inj):
    Y, _ = ybus_oracle(case)
    V = v * np.exp(1j * th)
    S = V * np.conj(Y @ V)
    return p_inj - case.load_p(t) - S.real, q_inj - case.load_q(t) - S.imag


def two_bus_case(p_load=0.0, q_load=0.0):
    return case_from_dict({
        "horizon": 1,
        "buses": [{"id": 1, "vmin": 0.9, "vmax": 1.1, "is_reference": True}, {"id": 2, "vmin": 0.9, "vmax": 1.1}],
        "branches": [{"id": 1, "from_bus": 1, "to_bus": 2, "g": 0.0, "b": -10.0}],
        "generators": [{"id": 1, "bus": 1, "c2": 0, "c1": 1, "c0": 0, "pmin": 0, "pmax": 5, "qmin": -5, "qmax": 5}],
        "loads": [{"id": 1, "bus": 2, "p_d": [p_load], "q_d": [q_load]}],
    })


# ------------------------------------------------------- power flow

def test_flat_start_needs_no_steps():
    case = two_bus_case()
    hist = []
    v, th = newton_power_flow(case, FixedInjections(np.zeros(2), np.zeros(2)), 0, history=hist)
    np.testing.assert_array_equal(v, [1.0, 1.0])
    np.testing.assert_array_equal(th, [0.0, 0.0])
    assert len(hist) == 1


def test_two_bus_sine_solution():
    case = two_bus_case(p_load=0.5)
    v, th = newton_power_flow(case, FixedInjections(np.zeros(2), np.zeros(2)), 0)
    assert abs(10 * v[0] * v[1] * math.sin(th[0] - th[1]) - 0.5) <= 1e-8


def test_two_bus_pv_closed_form():
    case = two_bus_case(p_load=0.5)
    inj = FixedInjections(np.zeros(2), np.zeros(2), pv_buses=(2,), v_set=np.ones(2))
    v, th = newton_power_flow(case, inj, 0)
    assert th[1] == pytest.approx(-math.asin(0.05), abs=1e-10)


def _three_bus_injections(case):
    pg = np.array([0.6, 0.45])
    return FixedInjections.from_dispatch(case, pg, np.zeros(2), pv_buses=(2,), v_set=np.array([1.02, 1.01, 1.0]))


@pytest.mark.parametrize("make", [fixtures.three_bus, fixtures.phase_shift_three_bus])
def test_meshed_mismatch_matches_oracle(make):
    case = make()
    inj = _three_bus_injections(case)
    hist = []
    v, th = newton_power_flow(case, inj, 0, history=hist)
    mp, mq = oracle_mismatch(case, 0, v, th, inj.p, inj.q)
    # slack absorbs P and Q, PV bus absorbs Q
    assert np.max(np.abs(mp[1:])) <= 1e-8
    assert abs(mq[2]) <= 1e-8
    assert len(hist) - 1 <= 6


def test_quadratic_convergence_ratio():
    case = fixtures.phase_shift_three_bus()
    hist = []
    newton_power_flow(case, _three_bus_injections(case), 0, history=hist, tol=1e-13)
    e = [x for x in hist if x > 1e-15]
    # e_{k+1} <= C e_k^2 on the last two steps with a modest constant
    for a, b in zip(e[-3:-1], e[-2:]):
        assert b <= 10.0 * a * a


def test_divergence_carries_mismatch():
    case = two_bus_case(p_load=8.0)
    with pytest.raises(PowerFlowDivergence) as err:
        newton_power_flow(case, FixedInjections(np.zeros(2), np.zeros(2)), 0, max_iter=8)
    assert err.value.mismatch > 1e-3


def test_islanded_bus_is_singular():
    data = {
        "horizon": 1,
        "buses": [{"id": 1, "vmin": 0.9, "vmax": 1.1, "is_reference": True}, {"id": 2, "vmin": 0.9, "vmax": 1.1},
                  {"id": 3, "vmin": 0.9, "vmax": 1.1}],
        "branches": [{"id": 1, "from_bus": 1, "to_bus": 2, "g": 0.0, "b": -10.0}],
        "generators": [],
        "loads": [{"id": 1, "bus": 3, "p_d": [0.1], "q_d": [0.0]}],
    }
    with pytest.raises(SingularJacobianError):
        newton_power_flow(case_from_dict(data), FixedInjections(np.zeros(3), np.zeros(3)), 0)


# ------------------------------------------------------------- OPF

def test_single_bus_price_is_marginal_cost():
    sol = solve_exact_polar_opf(fixtures.one_bus())
    assert sol.Pg[0, 0] == pytest.approx(0.8, abs=1e-8)
    assert sol.price_p[0, 0] == pytest.approx(10.0 + 2 * 0.5 * 0.8, abs=1e-6)


def test_two_bus_merit_order():
    sol = solve_exact_polar_opf(fixtures.two_bus())
    assert sol.Pg[0, 0] == pytest.approx(1.0, abs=1e-6)
    assert sol.Pg[0, 1] == pytest.approx(0.0, abs=1e-6)
    np.testing.assert_allclose(sol.price_p[0], [10.0, 10.0], atol=1e-6)


def _limited_triangle():
    """Gen buses held at 1.0 so the dispatch is the only degree of freedom."""
    data = case_to_dict(fixtures.three_bus(storage=False))
    for b in data["buses"][:2]:
        b["vmin"], b["vmax"] = 1.0 - 1e-7, 1.0 + 1e-7
    data["buses"][2]["vmin"] = 0.8
    return case_from_dict(data)


def _dispatch_oracle(case, load_shift=(0.0, 0.0, 0.0)):
    """Grid over Pg1 with an fsolve power flow for every point; boundary refined."""
    Y, _ = ybus_oracle(case)
    gens = case.generators
    pd = case.load_p(0) + np.array(load_shift)
    qd = case.load_q(0)
    smax = np.array([br.s_max for br in sorted(case.branches, key=lambda b: b.id)] * 2)

    def pf(pg1):
        # unknowns th2, th3, v3 with bus 1 slack-like for angle only; bus 2 takes the slack P
        def F(u):
            th = np.array([0.0, u[0], u[1]])
            v = np.array([1.0, 1.0, u[2]])
            V = v * np.exp(1j * th)
            S = V * np.conj(Y @ V)
            return [S.real[0] - (pg1 - pd[0]), S.real[2] + pd[2], S.imag[2] + qd[2]]

        u, info, ier, _ = fsolve(F, [0.0, -0.1, 1.0], full_output=True, xtol=1e-13)
        th = np.array([0.0, u[0], u[1]])
        v = np.array([1.0, 1.0, u[2]])
        V = v * np.exp(1j * th)
        S = V * np.conj(Y @ V)
        pg2 = S.real[1] + pd[1]
        P, Q = oracle_flows(case, v, th)
        slack = np.min(smax - np.hypot(P, Q))
        ok = ier == 1 and gens[1].pmin <= pg2 <= gens[1].pmax and 0.8 <= v[2] <= 1.1
        return ok, slack, pg2

    def cost(pg1, pg2):
        return sum(g.c2 * p * p + g.c1 * p + g.c0 for g, p in zip(gens, (pg1, pg2)))

    grid = np.arange(gens[0].pmin, gens[0].pmax + 1e-12, 1e-3)
    best = None
    for x in grid:
        ok, slack, pg2 = pf(x)
        if ok and slack >= 0 and (best is None or cost(x, pg2) < best[0]):
            best = (cost(x, pg2), x, pg2)
    # refine on the binding rating if the grid optimum sits next to it
    x = best[1]
    if pf(x + 1e-3)[1] < 0:
        xb = brentq(lambda y: pf(y)[1], x, x + 1e-3, xtol=1e-13)
        _, _, pg2 = pf(xb)
        return cost(xb, pg2), xb, pg2, best
    return best[0], best[1], best[2], best


def test_three_bus_matches_grid_oracle():
    case = _limited_triangle()
    sol = solve_exact_polar_opf(case)
    obj, pg1, pg2, grid_best = _dispatch_oracle(case)
    assert abs(sol.Pg[0, 0] - grid_best[1]) <= 1e-2
    assert abs(sol.Pg[0, 1] - grid_best[2]) <= 1e-2
    assert sol.objective == pytest.approx(obj, abs=1e-2)
    # nodal price at the load bus from a central difference of the refined oracle
    d = 1e-3
    up = _dispatch_oracle(case, (0, 0, d))[0]
    dn = _dispatch_oracle(case, (0, 0, -d))[0]
    assert sol.price_p[0, 2] == pytest.approx((up - dn) / (2 * d), abs=1e-2)


@pytest.mark.parametrize("name", ["three_bus", "phase_shift_three_bus", "five_bus"])
def test_flows_match_pi_model_oracle(name):
    case = fixtures.FIXTURES[name]()
    if name == "five_bus":
        case = case.truncated(3)
    sol = solve_exact_polar_opf(case)
    for t in range(case.horizon):
        P, Q = oracle_flows(case, sol.op.v_op[t], sol.op.th_op[t])
        np.testing.assert_allclose(sol.P[t], P, atol=1e-10)
        np.testing.assert_allclose(sol.Q[t], Q, atol=1e-10)
        assert sol.balance_residual[t] <= 1e-8
        assert sol.stationarity[t] <= 1e-6
        assert sol.op.th_op[t, 0] == 0.0 or abs(sol.op.th_op[t, 0]) <= 1e-12


def test_bounds_respected():
    case = fixtures.five_bus(4)
    sol = solve_exact_polar_opf(case)
    vmin = np.array([b.vmin for b in case.buses])
    vmax = np.array([b.vmax for b in case.buses])
    assert np.all(sol.op.v_op >= vmin - 1e-8) and np.all(sol.op.v_op <= vmax + 1e-8)
    smax = np.array([br.s_max for br in case.branches] * 2)
    assert np.all(np.hypot(sol.P, sol.Q) <= smax + 1e-8)


def test_zero_schedule_equals_case_without_storage():
    case = fixtures.three_bus(horizon=2)
    a = solve_exact_polar_opf(case, (np.zeros(2), np.zeros(2)))
    b = solve_exact_polar_opf(case.with_storage(None))
    assert abs(a.objective - b.objective) <= 1e-12
    np.testing.assert_allclose(a.price_p, b.price_p, atol=1e-12, rtol=0)
    np.testing.assert_allclose(a.Pg, b.Pg, atol=1e-12, rtol=0)


def test_charging_raises_cost():
    case = fixtures.three_bus()
    base = solve_exact_polar_opf(case)
    ch = solve_exact_polar_opf(case, (np.array([0.05]), np.zeros(1)))
    assert ch.objective > base.objective
    # price is the cost derivative w.r.t. load at the storage bus
    fd = (ch.objective - base.objective) / 0.05
    assert fd == pytest.approx(0.5 * (ch.price_p[0, 2] + base.price_p[0, 2]), rel=2e-2)


def test_infeasible_demand_reported():
    case = fixtures.three_bus()
    with pytest.raises(OPFInfeasibleError) as err:
        solve_exact_polar_opf(case, (np.array([5.0]), np.zeros(1)))
    assert "pmax" in str(err.value)


def test_solution_json_round_trip():
    sol = solve_exact_polar_opf(fixtures.three_bus())
    data = json.loads(sol.to_json())
    assert data["objective"] == pytest.approx(sol.objective)
    assert len(data["flow_index"]) == 6
    assert isinstance(sol, ExactSolution)


# ------------------------------------------------------------ flags

def test_phi_rule_examples():
    P = np.array([[0.3, 0.85, 0.9]])
    Q = np.zeros((1, 3))
    flags = select_phi_flags((P, Q), [1.0, 1.0, 0.0], 0.8)
    assert flags.tolist() == [[False, True, False]]


def test_phi_applies_to_both_orientations():
    sol = solve_exact_polar_opf(fixtures.three_bus())
    flags = select_phi_flags(sol, [br.s_max for br in fixtures.three_bus().branches], 0.8)
    assert flags.shape == (1, 6)
    # the congested line is flagged at both of its ends
    assert flags[0, 1] and flags[0, 4]
    assert not flags[0, 0] and not flags[0, 3]


def test_phi_threshold_validated():
    with pytest.raises(ValueError):
        select_phi_flags((np.zeros((1, 2)), np.zeros((1, 2))), [1.0], 0.0)
