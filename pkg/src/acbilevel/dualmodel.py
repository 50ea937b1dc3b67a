"""Explicit dual of the CPSOTA lower level.

The dual is written out term by term (one stationarity row per primal
variable family) rather than derived from the primal matrix, so that it can
serve as an independent certificate: its optimum must match the primal
optimum and its nodal prices must match the primal balance multipliers.

Multiplier orientation follows ``L = f + lam'(expr) + mu_up (x - ub) +
mu_lo (lb - x) - <cone multipliers, cone point>`` with every equality written
as ``expr = 0`` in the orientation of the primal rows.  Hence ``lam1`` is the
negative of the nodal price.

``shunt_form`` selects the constant shunt term of the objective: ``"scaled"``
multiplies the shunt admittance by ``V_op**2`` as in the primal balance,
``"printed"`` omits the factor.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .conic import ConicProgram, ProgramBuilder, SolveResult, stack_programs
from .cpsota import DerivedCoeffs, ModelBuildError, PresolveFlags, PrimalSolution, _key, _schedule_at
from .netcase import NetworkCase, build_index_sets
from .pfexact import BranchEnds, OperatingPoint

SHUNT_FORMS = ("scaled", "printed")


def _branch_ends(idx, nb):
    """Forward end index, reverse end index and endpoints per branch."""
    out = []
    for k, (e, a, b) in enumerate(idx.E):
        out.append((k, k + nb, e, a, b))
    return out


def build_ll_dual_step(case: NetworkCase, op_point: OperatingPoint, coeffs: DerivedCoeffs,
                       flags: PresolveFlags, storage_schedule, t: int, shunt_form: str = "scaled") -> ConicProgram:
    if shunt_form not in SHUNT_FORMS:
        raise ValueError(f"shunt_form must be one of {SHUNT_FORMS}")
    idx = build_index_sets(case)
    pos = case.bus_position()
    ends = BranchEnds.from_case(case)
    nb = len(idx.E)
    V = op_point.v_op[t]
    TH = op_point.th_op[t]
    E_all = idx.E_all
    brs = {br.id: br for br in case.branches}
    bx = ProgramBuilder()

    # ---- dual variables
    lam1 = {i: bx.var(f"lam1[{i}]") for i in case.bus_ids}
    lam2 = {i: bx.var(f"lam2[{i}]") for i in case.bus_ids}
    lam_p, lam_q = {}, {}
    for n_end, e in enumerate(E_all):
        fam_p, fam_q = ("lam3", "lam5") if n_end < nb else ("lam4", "lam6")
        lam_p[n_end] = bx.var(f"{fam_p}[{_key(*e)}]")
        lam_q[n_end] = bx.var(f"{fam_q}[{_key(*e)}]")
    lam7, lam8, lam9, mu1, lam10 = {}, {}, {}, {}, {}
    for k, (e, i, j) in enumerate(idx.E):
        if flags.lam[t, k]:
            if not coeffs.defined[t, k]:
                raise ModelBuildError(f"branch {e}: voltage cone coefficients undefined at t={t}")
            mu1[k] = bx.var(f"mu1[{e}]")
            lam7[k] = bx.var(f"lam7[{e}]")
            lam8[k] = bx.var(f"lam8[{e}]")
            lam9[k] = bx.var(f"lam9[{e}]")
            bx.soc(mu1[k], [lam7[k], lam8[k], lam9[k]], name=f"dvcone[{e}]")
        else:
            lam10[k] = bx.var(f"lam10[{e}]")
    lam11, lam12, mu2, lam13 = {}, {}, {}, {}
    for k, pr in enumerate(idx.N_P):
        key = _key(*pr)
        if flags.gam[t, k]:
            mu2[k] = bx.var(f"mu2[{key}]")
            lam11[k] = bx.var(f"lam11[{key}]")
            lam12[k] = bx.var(f"lam12[{key}]")
            bx.soc(mu2[k], [lam11[k], lam12[k]], name=f"dccone[{key}]")
        else:
            lam13[k] = bx.var(f"lam13[{key}]")
    lam14, lam15, mu5 = {}, {}, {}
    for n_end, e in enumerate(E_all):
        if flags.phi[t, n_end] and ends.s_max[n_end] > 0:
            key = _key(*e)
            mu5[n_end] = bx.var(f"mu5[{key}]")
            lam14[n_end] = bx.var(f"lam14[{key}]")
            lam15[n_end] = bx.var(f"lam15[{key}]")
            bx.soc(mu5[n_end], [lam14[n_end], lam15[n_end]], name=f"dslim[{key}]")
    ref = case.reference_bus
    lam16 = bx.var(f"lam16[{ref}]")
    mu3l, mu3u, mu4l, mu4u = {}, {}, {}, {}
    for gen in case.generators:
        if np.isfinite(gen.pmin):
            mu3l[gen.id] = bx.var(f"mu3_lo[{gen.id}]", 0.0)
        if np.isfinite(gen.pmax):
            mu3u[gen.id] = bx.var(f"mu3_up[{gen.id}]", 0.0)
        if np.isfinite(gen.qmin):
            mu4l[gen.id] = bx.var(f"mu4_lo[{gen.id}]", 0.0)
        if np.isfinite(gen.qmax):
            mu4u[gen.id] = bx.var(f"mu4_up[{gen.id}]", 0.0)
    mu6l = {b.id: bx.var(f"mu6_lo[{b.id}]", 0.0) for b in case.buses}
    mu6u = {b.id: bx.var(f"mu6_up[{b.id}]", 0.0) for b in case.buses}

    # ---- objective
    gsh, bsh = case.shunt_g(), case.shunt_b()
    pd, qd = case.load_p(t), case.load_q(t)
    p_es, q_es = _schedule_at(storage_schedule, t)
    beta = case.storage.bus if case.storage is not None else None
    if beta is None and (p_es or q_es):
        raise ModelBuildError("non-zero storage schedule on a case without storage")
    cost = {}

    def add(k, v):
        cost[k] = cost.get(k, 0.0) + v

    for gen in case.generators:
        bx.c0 += gen.c0
        if gen.id in mu3u:
            add(mu3u[gen.id], -gen.pmax)
        if gen.id in mu3l:
            add(mu3l[gen.id], gen.pmin)
        if gen.id in mu4u:
            add(mu4u[gen.id], -gen.qmax)
        if gen.id in mu4l:
            add(mu4l[gen.id], gen.qmin)
        if gen.c2 > 0:
            # -(c1 + mu3_up - mu3_lo + lam1)^2 / (4 c2), expanded around the constant c1
            s = {lam1[gen.bus]: 1.0}
            if gen.id in mu3u:
                s[mu3u[gen.id]] = 1.0
            if gen.id in mu3l:
                s[mu3l[gen.id]] = -1.0
            bx.lowrank(s, -1.0 / (2.0 * gen.c2))
            for k, v in s.items():
                add(k, -gen.c1 * v / (2.0 * gen.c2))
            bx.c0 -= gen.c1**2 / (4.0 * gen.c2)
    for bus in case.buses:
        i, k = bus.id, pos[bus.id]
        add(mu6u[i], V[k] - bus.vmax)
        add(mu6l[i], bus.vmin - V[k])
        scale = V[k] ** 2 if shunt_form == "scaled" else 1.0
        add(lam1[i], -pd[k] - gsh[k] * scale)
        add(lam2[i], -qd[k] + bsh[k] * scale)
        if i == beta:
            add(lam1[i], -p_es)
            add(lam2[i], -q_es)
    for k in lam13.values():
        add(k, -1.0)
    for k in lam12:
        add(lam12[k], 0.75)
        add(mu2[k], -1.25)
    for k in lam7:
        add(lam7[k], -0.5)
        add(mu1[k], -0.5)
    add(lam16, TH[pos[ref]])
    for n_end, k in mu5.items():
        add(k, -ends.s_max[n_end])
    for n_end, e in enumerate(E_all):
        Vo = V[pos[e[1]]]
        add(lam_p[n_end], -ends.gs[n_end] * Vo**2)
        add(lam_q[n_end], ends.bs[n_end] * Vo**2)
    for k, v in cost.items():
        bx.add_cost(k, v)

    # ---- stationarity rows
    row_th = {i: {} for i in case.bus_ids}
    row_v = {i: {} for i in case.bus_ids}

    def put(row, k, v):
        row[k] = row.get(k, 0.0) + v

    for kf, kr, e, a, b in _branch_ends(idx, nb):
        tau = brs[e].tau
        VV = V[pos[a]] * V[pos[b]]
        cps_f, cps_r = coeffs.cps[t, kf], coeffs.cps[t, kr]
        cms_f, cms_r = coeffs.cms[t, kf], coeffs.cms[t, kr]
        # angle stationarity: bus a gets +, bus b gets -
        for bus, sgn in ((a, 1.0), (b, -1.0)):
            put(row_th[bus], lam_p[kf], sgn * VV * cms_f / tau)
            put(row_th[bus], lam_p[kr], -sgn * VV * cms_r / tau)
            put(row_th[bus], lam_q[kf], sgn * VV * cps_f / tau)
            put(row_th[bus], lam_q[kr], -sgn * VV * cps_r / tau)
        # magnitude stationarity
        Va, Vb = V[pos[a]], V[pos[b]]
        put(row_v[a], lam_p[kf], -2.0 * ends.gs[kf] * Va + Vb * cps_f / tau)
        put(row_v[a], lam_q[kf], 2.0 * ends.bs[kf] * Va - Vb * cms_f / tau)
        put(row_v[a], lam_p[kr], Vb * cps_r / tau)
        put(row_v[a], lam_q[kr], -Vb * cms_r / tau)
        put(row_v[b], lam_p[kr], -2.0 * ends.gs[kr] * Vb + Va * cps_r / tau)
        put(row_v[b], lam_q[kr], 2.0 * ends.bs[kr] * Vb - Va * cms_r / tau)
        put(row_v[b], lam_p[kf], Va * cps_f / tau)
        put(row_v[b], lam_q[kf], -Va * cms_f / tau)
        if kf in lam8:
            put(row_v[a], lam8[kf], -coeffs.p1[t, kf])
            put(row_v[a], lam9[kf], -coeffs.p3[t, kf])
            put(row_v[b], lam8[kf], -coeffs.p2[t, kf])
    for k, (i, j) in enumerate(idx.N_P):
        if k in lam11:
            put(row_th[i], lam11[k], -1.0 / math.sqrt(2.0))
            put(row_th[j], lam11[k], 1.0 / math.sqrt(2.0))
    put(row_th[ref], lam16, 1.0)
    for bus in case.buses:
        i, k = bus.id, pos[bus.id]
        put(row_v[i], mu6u[i], 1.0)
        put(row_v[i], mu6l[i], -1.0)
        put(row_v[i], lam2[i], 2.0 * V[k] * bsh[k])
        put(row_v[i], lam1[i], -2.0 * V[k] * gsh[k])
        bx.eq(row_th[i], 0.0, f"st_th[{i}]")
        bx.eq(row_v[i], 0.0, f"st_v[{i}]")

    for n_end, e in enumerate(E_all):
        own = e[1]
        rp = {lam1[own]: -1.0, lam_p[n_end]: 1.0}
        rq = {lam2[own]: -1.0, lam_q[n_end]: 1.0}
        if n_end in lam14:
            rp[lam14[n_end]] = -1.0
            rq[lam15[n_end]] = -1.0
        bx.eq(rp, 0.0, f"st_p[{_key(*e)}]")
        bx.eq(rq, 0.0, f"st_q[{_key(*e)}]")

    for gen in case.generators:
        if gen.c2 == 0:
            r = {lam1[gen.bus]: 1.0}
            if gen.id in mu3u:
                r[mu3u[gen.id]] = 1.0
            if gen.id in mu3l:
                r[mu3l[gen.id]] = -1.0
            bx.eq(r, -gen.c1, f"st_pg[{gen.id}]")
        r = {lam2[gen.bus]: 1.0}
        if gen.id in mu4u:
            r[mu4u[gen.id]] = 1.0
        if gen.id in mu4l:
            r[mu4l[gen.id]] = -1.0
        bx.eq(r, 0.0, f"st_qg[{gen.id}]")

    pair_of = {}
    for kf, kr, e, a, b in _branch_ends(idx, nb):
        pair_of.setdefault((a, b) if (a, b) in idx.N_P else (b, a), []).append((kf, kr, e, a, b))
    for k, (i, j) in enumerate(idx.N_P):
        r = {}
        if k in mu2:
            put(r, mu2[k], 1.0)
            put(r, lam12[k], -1.0)
        else:
            put(r, lam13[k], 1.0)
        VV = V[pos[i]] * V[pos[j]]
        for kf, kr, e, a, b in pair_of.get((i, j), []):
            tau = brs[e].tau
            put(r, lam_p[kf], VV * coeffs.cps[t, kf] / tau)
            put(r, lam_p[kr], VV * coeffs.cps[t, kr] / tau)
            put(r, lam_q[kf], -VV * coeffs.cms[t, kf] / tau)
            put(r, lam_q[kr], -VV * coeffs.cms[t, kr] / tau)
        bx.eq(r, 0.0, f"st_cos[{_key(i, j)}]")

    for kf, kr, e, a, b in _branch_ends(idx, nb):
        r = {lam_p[kf]: -0.5, lam_p[kr]: -0.5}
        if kf in lam7:
            r[lam7[kf]] = 0.5
            r[mu1[kf]] = -0.5
        else:
            r[lam10[kf]] = 1.0
        bx.eq(r, 0.0, f"st_vchk[{e}]")
    return bx.build("max")


def build_ll_dual(case, op_point, coeffs, flags, storage_schedule=None, shunt_form: str = "scaled") -> ConicProgram:
    progs = [build_ll_dual_step(case, op_point, coeffs, flags, storage_schedule, t, shunt_form)
             for t in range(case.horizon)]
    return stack_programs(progs, [f"t{t}." for t in range(case.horizon)])


# ---------------------------------------------------------------- solution

@dataclass
class DualSolution:
    """Dual values by family; arrays are ``[T, size]`` with nan where absent."""

    values: dict[str, np.ndarray]
    keys: dict[str, list[str]]
    objective: float
    status: str = "optimal"
    iterations: int = 0
    bounds: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    result: SolveResult | None = field(default=None, repr=False)

    @property
    def lam1(self) -> np.ndarray:
        return self.values["lam1"]

    @property
    def lam2(self) -> np.ndarray:
        return self.values["lam2"]

    @property
    def lmp_p(self) -> np.ndarray:
        return -self.values["lam1"]

    @property
    def lmp_q(self) -> np.ndarray:
        return -self.values["lam2"]

    def cone_violation(self) -> float:
        """Largest violation of the dual cone constraints."""
        worst = 0.0
        for head, tails in (("mu1", ("lam7", "lam8", "lam9")), ("mu2", ("lam11", "lam12")), ("mu5", ("lam14", "lam15"))):
            h = self.values[head]
            tl = np.stack([self.values[n] for n in tails])
            ok = np.isfinite(h)
            if ok.any():
                worst = max(worst, float(np.max(np.linalg.norm(tl[:, ok], axis=0) - h[ok])))
        return worst

    def min_mu(self) -> float:
        vals = [self.values[n] for n in self.values if n.startswith("mu")]
        finite = np.concatenate([v[np.isfinite(v)] for v in vals]) if vals else np.zeros(0)
        return float(finite.min()) if finite.size else 0.0


def _dual_keys(case: NetworkCase) -> dict[str, list[str]]:
    idx = build_index_sets(case)
    nb = len(idx.E)
    fwd = [_key(*e) for e in idx.E]
    rev = [_key(*e) for e in idx.E_rev]
    ends = fwd + rev
    br = [str(e) for e, _, _ in idx.E]
    pairs = [_key(*p) for p in idx.N_P]
    gens = [str(g.id) for g in case.generators]
    bus = [str(i) for i in case.bus_ids]
    del nb
    return {
        "lam1": bus, "lam2": bus, "lam3": fwd, "lam4": rev, "lam5": fwd, "lam6": rev,
        "lam7": br, "lam8": br, "lam9": br, "mu1": br, "lam10": br,
        "lam11": pairs, "lam12": pairs, "mu2": pairs, "lam13": pairs,
        "lam14": ends, "lam15": ends, "mu5": ends, "lam16": [str(case.reference_bus)],
        "mu3_lo": gens, "mu3_up": gens, "mu4_lo": gens, "mu4_up": gens,
        "mu6_lo": bus, "mu6_up": bus,
    }


def extract_dual(case: NetworkCase, op_point: OperatingPoint, program: ConicProgram, result: SolveResult,
                 prefixes=None, steps=None) -> DualSolution:
    """Dual values by family.  ``prefixes`` name the stacked steps (default
    ``t<k>.`` over the horizon); ``steps`` picks the matching operating-point rows."""
    keys = _dual_keys(case)
    ix = program.index()
    prefixes = prefixes if prefixes is not None else [f"t{t}." for t in range(case.horizon)]
    steps = list(steps) if steps is not None else list(range(len(prefixes)))
    T = len(prefixes)
    values = {}
    for fam, ks in keys.items():
        arr = np.full((T, len(ks)), np.nan)
        for t, pre in enumerate(prefixes):
            for c, k in enumerate(ks):
                j = ix.get(f"{pre}{fam}[{k}]")
                if j is not None:
                    arr[t, c] = result.x[j]
        values[fam] = arr
    bounds = {
        "pmin": np.array([g.pmin for g in case.generators]), "pmax": np.array([g.pmax for g in case.generators]),
        "qmin": np.array([g.qmin for g in case.generators]), "qmax": np.array([g.qmax for g in case.generators]),
        "v_lo": np.array([b.vmin for b in case.buses])[None, :] - op_point.v_op[steps],
        "v_up": np.array([b.vmax for b in case.buses])[None, :] - op_point.v_op[steps],
        "s_max": BranchEnds.from_case(case).s_max,
    }
    return DualSolution(values, keys, float(result.objective), result.status, result.iterations, bounds, result)


def _objective_of(res) -> float:
    status = getattr(res, "status", "optimal")
    if status != "optimal":
        raise ValueError(f"solve is not optimal (status {status!r})")
    return float(res.objective)


def duality_gap(primal_result, dual_result) -> float:
    """Relative gap ``|Op - Od| / max(1, |Op|)``; both solves must be optimal."""
    op = _objective_of(primal_result)
    od = _objective_of(dual_result)
    return abs(op - od) / max(1.0, abs(op))


# ------------------------------------------------------ slackness report

@dataclass
class SlacknessReport:
    products: dict[str, float]  # family -> max |slack * multiplier| or |<cone point, cone multiplier>|

    @property
    def worst(self) -> float:
        return max(self.products.values(), default=0.0)

    def to_dict(self) -> dict:
        return dict(self.products, worst=self.worst)


def complementary_slackness_report(primal: PrimalSolution, dual: DualSolution, flags: PresolveFlags) -> SlacknessReport:
    v, bd = dual.values, dual.bounds

    def prod(slack, mult):
        ok = np.isfinite(mult) & np.isfinite(slack)
        return float(np.max(np.abs(slack[ok] * mult[ok]), initial=0.0))

    out = {
        "pg_lower": prod(primal.Pg - bd["pmin"], v["mu3_lo"]),
        "pg_upper": prod(bd["pmax"] - primal.Pg, v["mu3_up"]),
        "qg_lower": prod(primal.Qg - bd["qmin"], v["mu4_lo"]),
        "qg_upper": prod(bd["qmax"] - primal.Qg, v["mu4_up"]),
        "v_lower": prod(primal.v_d - bd["v_lo"], v["mu6_lo"]),
        "v_upper": prod(bd["v_up"] - primal.v_d, v["mu6_up"]),
    }
    T = primal.P.shape[0]
    vc = 0.0
    for t in range(T):
        for k in np.nonzero(flags.lam[t])[0]:
            x = primal.w[t, k]
            z = np.array([v["mu1"][t, k], v["lam7"][t, k], v["lam8"][t, k], v["lam9"][t, k]])
            vc = max(vc, abs(float(x @ z)))
    out["voltage_cone"] = vc
    cc = 0.0
    for t in range(T):
        for k in np.nonzero(flags.gam[t])[0]:
            x = primal.f[t, k]
            z = np.array([v["mu2"][t, k], v["lam11"][t, k], v["lam12"][t, k]])
            cc = max(cc, abs(float(x @ z)))
    out["cosine_cone"] = cc
    sc = 0.0
    for t in range(T):
        for k in np.nonzero(np.isfinite(v["mu5"][t]))[0]:
            x = np.array([bd["s_max"][k], primal.P[t, k], primal.Q[t, k]])
            z = np.array([v["mu5"][t, k], v["lam14"][t, k], v["lam15"][t, k]])
            sc = max(sc, abs(float(x @ z)))
    out["branch_limit_cone"] = sc
    return SlacknessReport(out)
