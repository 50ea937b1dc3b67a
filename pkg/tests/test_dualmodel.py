import numpy as np
import pytest

from acbilevel import fixtures
from acbilevel.conic import SolveResult, solve_conic
from acbilevel.cpsota import (
    PresolveFlags,
    build_ll_primal,
    census,
    compute_operating_coeffs,
    extract_primal,
    restrict_to_defined,
)
from acbilevel.dualmodel import (
    build_ll_dual,
    complementary_slackness_report,
    duality_gap,
    extract_dual,
)
from acbilevel.netcase import case_from_dict
from acbilevel.pfexact import select_phi_flags, solve_exact_polar_opf

FIXTURE_NAMES = ["one_bus", "two_bus", "three_bus", "phase_shift_three_bus", "five_bus",
                 "overload_three_bus", "arbitrage_three_bus"]


def _setup(name, horizon=2):
    case = fixtures.FIXTURES[name]()
    if case.horizon > horizon:
        case = case.truncated(horizon)
    ex = solve_exact_polar_opf(case)
    return case, ex, compute_operating_coeffs(case, ex.op)


def _flag_sets(case, coeffs, ex):
    ratings = [br.s_max for br in sorted(case.branches, key=lambda b: b.id)]
    none = PresolveFlags.uniform(case)
    full = restrict_to_defined(PresolveFlags.uniform(case, True, True, True), coeffs)
    mixed = PresolveFlags.uniform(case)
    mixed.phi[:] = select_phi_flags(ex, ratings) if case.branches else mixed.phi
    mixed.gam[:, ::2] = True
    mixed.lam[:, 1::2] = coeffs.defined[:, 1::2]
    return {"none": none, "full": full, "mixed": mixed}


def _both(case, ex, coeffs, flags, schedule=None, shunt_form="scaled"):
    pp = build_ll_primal(case, ex.op, coeffs, flags, schedule)
    pr = solve_conic(pp)
    dp = build_ll_dual(case, ex.op, coeffs, flags, schedule, shunt_form)
    dr = solve_conic(dp)
    assert pr.optimal and dr.optimal
    return extract_primal(case, pp, pr), extract_dual(case, ex.op, dp, dr), pr, dr, dp


def _schedule(case, p=0.1):
    if case.storage is None:
        return None
    return np.full(case.horizon, p), np.zeros(case.horizon)


# ------------------------------------------------------------- structure

def test_single_bus_dual_structure():
    case, ex, c = _setup("one_bus")
    dp = build_ll_dual(case, ex.op, c, PresolveFlags.uniform(case))
    cen = census(dp)
    assert set(cen["variables"]) == {"lam1", "lam2", "lam16", "mu3_lo", "mu3_up", "mu4_lo", "mu4_up", "mu6_lo", "mu6_up"}
    # quadratic cost: no dispatch stationarity row, completion term present instead
    assert "st_pg" not in cen["equalities"]
    assert len(dp.low_rank) == 1 and dp.low_rank[0].weight == pytest.approx(-1.0 / (2 * 0.5))
    assert dp.sense == "max" and not dp.socs


def test_linear_cost_keeps_dispatch_row():
    case, ex, c = _setup("two_bus")
    cen = census(build_ll_dual(case, ex.op, c, PresolveFlags.uniform(case)))
    assert cen["equalities"]["st_pg"] == 2 and not cen["cones"]


def test_cones_follow_flags():
    case, ex, c = _setup("three_bus")
    assert not build_ll_dual(case, ex.op, c, PresolveFlags.uniform(case)).socs
    cen = census(build_ll_dual(case, ex.op, c, PresolveFlags.uniform(case, True, True, True)))
    assert cen["cones"] == {"dvcone": 3, "dccone": 3, "dslim": 6}


# ------------------------------------------------------- strong duality

@pytest.mark.parametrize("name", FIXTURE_NAMES)
def test_strong_duality_every_flag_set(name):
    case, ex, c = _setup(name)
    for label, flags in _flag_sets(case, c, ex).items():
        for sched in (None, _schedule(case)):
            ps, ds, pr, dr, _ = _both(case, ex, c, flags, sched)
            assert duality_gap(pr, dr) <= 1e-6, (label, sched)
            # same certificate from two routes: primal balance multipliers and dual variables
            np.testing.assert_allclose(ds.lam1, ps.bal_mult_p, atol=1e-6)
            np.testing.assert_allclose(ds.lam2, ps.bal_mult_q, atol=1e-6)


def test_shunt_term_must_be_scaled():
    # shunts at buses whose operating voltage differs from 1 separate the two candidates
    for name in ("phase_shift_three_bus", "five_bus"):
        case, ex, c = _setup(name, 1)
        flags = PresolveFlags.uniform(case)
        _, _, pr, dr, _ = _both(case, ex, c, flags, shunt_form="scaled")
        assert duality_gap(pr, dr) <= 1e-9
        _, _, pr, dr2, _ = _both(case, ex, c, flags, shunt_form="printed")
        assert duality_gap(pr, dr2) > 1e-5


def test_shunt_forms_agree_without_shunts():
    case, ex, c = _setup("three_bus")
    flags = PresolveFlags.uniform(case)
    _, _, pr, dr, _ = _both(case, ex, c, flags, shunt_form="printed")
    assert duality_gap(pr, dr) <= 1e-9


@pytest.mark.parametrize("name", ["three_bus", "five_bus", "arbitrage_three_bus"])
def test_dual_certificates(name):
    case, ex, c = _setup(name)
    for flags in _flag_sets(case, c, ex).values():
        ps, ds, *_ = _both(case, ex, c, flags, _schedule(case))
        assert ds.cone_violation() <= 1e-8
        assert ds.min_mu() >= -1e-10
        rep = complementary_slackness_report(ps, ds, flags)
        assert rep.worst <= 1e-7, rep.products


def _lossless_triangle():
    line = lambda e, i, j: {"id": e, "from_bus": i, "to_bus": j, "g": 0.0, "b": -5.0}
    gen = lambda k, bus, c2, c1: {"id": k, "bus": bus, "c2": c2, "c1": c1, "c0": 0, "pmin": 0, "pmax": 3,
                                  "qmin": -3, "qmax": 3}
    return case_from_dict({
        "horizon": 1,
        "buses": [{"id": i, "vmin": 0.9, "vmax": 1.1, "is_reference": i == 1} for i in (1, 2, 3)],
        "branches": [line(1, 1, 2), line(2, 1, 3), line(3, 2, 3)],
        "generators": [gen(1, 1, 1.0, 10.0), gen(2, 2, 2.0, 11.0)],
        "loads": [{"id": 1, "bus": 3, "p_d": [1.0], "q_d": [0.0]}],
    })


def test_single_price_without_losses_or_congestion():
    case = _lossless_triangle()
    ex = solve_exact_polar_opf(case)
    c = compute_operating_coeffs(case, ex.op)
    ps, ds, *_ = _both(case, ex, c, restrict_to_defined(PresolveFlags.uniform(case, gam=True), c))
    pg = ps.Pg[0]
    assert np.all((pg > 1e-3) & (pg < 3 - 1e-3))
    mc = 10.0 + 2 * 1.0 * pg[0]
    assert mc == pytest.approx(11.0 + 2 * 2.0 * pg[1], abs=1e-5)
    np.testing.assert_allclose(ds.lmp_p[0], mc, atol=1e-5)


# ---------------------------------------------------------------- helpers

def _fake(obj, status="optimal"):
    return SolveResult(status, np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0), [], obj, 0, {}, None, "")


def test_duality_gap_arithmetic():
    assert duality_gap(_fake(5.0), _fake(5.0)) == 0.0
    assert duality_gap(_fake(100.0), _fake(99.9999)) == pytest.approx(1e-6)
    assert duality_gap(_fake(0.2), _fake(0.1)) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        duality_gap(_fake(1.0, "max_iter"), _fake(1.0))


def test_slackness_interior_and_binding():
    case, ex, c = _setup("two_bus")
    ps, ds, *_ = _both(case, ex, c, PresolveFlags.uniform(case))
    # interior voltages carry no bound multiplier; the idle expensive unit sits at its lower bound
    assert np.nanmax(ds.values["mu6_up"]) <= 1e-8
    assert ps.Pg[0, 1] == pytest.approx(0.0, abs=1e-8) and ds.values["mu3_lo"][0, 1] > 1.0
    rep = complementary_slackness_report(ps, ds, PresolveFlags.uniform(case))
    assert rep.products["pg_lower"] <= 1e-7 and rep.products["v_upper"] <= 1e-7
