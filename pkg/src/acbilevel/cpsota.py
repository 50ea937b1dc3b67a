"""Convex polar second-order Taylor (CPSOTA) lower-level primal model.

Flows are expanded around an operating point ``(V_op, th_op)``; the magnitude
and angle second-order terms enter through ``v_chk`` (per branch) and
``cos_hat`` (per bus pair).  Their quadratic inequalities are written as
rotated-cone blocks with explicit substitution variables::

    w0 = (1 + v_chk)/2, w1 = (1 - v_chk)/2, w2 = p1 dV_i + p2 dV_j, w3 = p3 dV_i
    ||(w1, w2, w3)|| <= w0
    f0 = 5/4 - cos_hat, f1 = (dth_i - dth_j)/sqrt 2, f2 = cos_hat - 3/4
    ||(f1, f2)|| <= f0

so that ``w0^2 - w1^2 = v_chk`` and ``f0^2 - f2^2 = 1 - cos_hat``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .conic import ConicProgram, ProgramBuilder, SolveResult, stack_programs
from .netcase import Branch, NetworkCase, build_index_sets
from .pfexact import BranchEnds, OperatingPoint

log = logging.getLogger(__name__)


class ModelBuildError(ValueError):
    """Flags reference a coefficient that is undefined for some branch."""


# ------------------------------------------------------------ coefficients

@dataclass
class DerivedCoeffs:
    """Operating-point coefficients; end arrays run over ``E`` then ``E_rev``."""

    cps: np.ndarray  # [T, 2*nbr]
    cms: np.ndarray  # [T, 2*nbr]
    p1: np.ndarray  # [T, nbr]
    p2: np.ndarray  # [T, nbr]
    p3: np.ndarray  # [T, nbr]
    cos_op: np.ndarray  # [T, nbr] cos(th_i - th_j - sigma) of the forward end
    defined: np.ndarray  # [T, nbr] p1..p3 usable
    branch_ids: tuple[int, ...] = ()

    def position(self, branch_id: int) -> int:
        return self.branch_ids.index(branch_id)


def _branch_arrays(case: NetworkCase):
    brs = sorted(case.branches, key=lambda br: br.id)
    get = lambda name: np.array([getattr(br, name) for br in brs], dtype=float)
    return brs, get


def compute_operating_coeffs(case: NetworkCase, op_point: OperatingPoint) -> DerivedCoeffs:
    ends = BranchEnds.from_case(case)
    brs, get = _branch_arrays(case)
    nb = len(brs)
    T = op_point.horizon
    g, gfr, gto, tau = get("g"), get("g_fr"), get("g_to"), get("tau")
    cps = np.zeros((T, 2 * nb))
    cms = np.zeros((T, 2 * nb))
    p1, p2, p3 = np.full((T, nb), np.nan), np.full((T, nb), np.nan), np.full((T, nb), np.nan)
    cos_op = np.zeros((T, nb))
    defined = np.zeros((T, nb), dtype=bool)
    den = g + gto
    for t in range(T):
        a = ends.angle(op_point.th_op[t])
        cps[t] = ends.g * np.cos(a) + ends.b * np.sin(a)
        cms[t] = ends.b * np.cos(a) - ends.g * np.sin(a)
        af = a[:nb]
        cos_op[t] = np.cos(af)
        rad3 = g**2 * np.sin(af) ** 2 + g * (gfr + gto) + gfr * gto
        ok = (den > 0) & (rad3 >= 0)
        defined[t] = ok
        with np.errstate(invalid="ignore", divide="ignore"):
            p2[t] = np.where(den > 0, np.sqrt(np.where(den > 0, den, 1.0)), np.nan)
            p1[t] = np.where(ok, -g * np.cos(af) / (p2[t] * tau), np.nan)
            p3[t] = np.where(ok, np.sqrt(np.where(ok, rad3 / np.where(den > 0, den, 1.0), 0.0)) / tau, np.nan)
    return DerivedCoeffs(cps, cms, p1, p2, p3, cos_op, defined, tuple(br.id for br in brs))


# ------------------------------------------------------------------- flags

@dataclass
class PresolveFlags:
    lam: np.ndarray  # [T, nbr]      quadratic voltage term
    gam: np.ndarray  # [T, n_pairs]  quadratic cosine term
    phi: np.ndarray  # [T, 2*nbr]    branch limit imposed

    @classmethod
    def uniform(cls, case: NetworkCase, lam=False, gam=False, phi=False) -> "PresolveFlags":
        idx = build_index_sets(case)
        T = case.horizon
        return cls(
            np.full((T, len(idx.E)), lam),
            np.full((T, len(idx.N_P)), gam),
            np.full((T, len(idx.E_all)), phi),
        )

    def census(self) -> dict[str, int]:
        return {"lam": int(self.lam.sum()), "gam": int(self.gam.sum()), "phi": int(self.phi.sum())}

    def copy(self) -> "PresolveFlags":
        return PresolveFlags(self.lam.copy(), self.gam.copy(), self.phi.copy())

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, PresolveFlags)
            and np.array_equal(self.lam, other.lam)
            and np.array_equal(self.gam, other.gam)
            and np.array_equal(self.phi, other.phi)
        )


def restrict_to_defined(flags: PresolveFlags, coeffs: DerivedCoeffs) -> PresolveFlags:
    """Force the linear voltage variant where p1..p3 are undefined."""
    bad = flags.lam & ~coeffs.defined
    if np.any(bad):
        for t, e in zip(*np.nonzero(bad)):
            log.warning("branch %s at t=%d: voltage cone coefficients undefined, using linear variant",
                        coeffs.branch_ids[e], t)
        out = flags.copy()
        out.lam &= coeffs.defined
        return out
    return flags


# ----------------------------------------------------------- model builder

def _schedule_at(schedule, t: int) -> tuple[float, float]:
    if schedule is None:
        return 0.0, 0.0
    if hasattr(schedule, "p_es"):
        return float(schedule.p_es[t]), float(schedule.q_es[t])
    p, q = schedule
    return float(np.asarray(p)[t]), float(np.asarray(q)[t])


def _key(*parts) -> str:
    return ",".join(str(p) for p in parts)


def build_ll_primal_step(case, op_point, coeffs, flags, storage_schedule, t: int) -> ConicProgram:
    """CPSOTA primal program of a single time step (names carry no time prefix)."""
    idx = build_index_sets(case)
    pos = case.bus_position()
    brs = sorted(case.branches, key=lambda br: br.id)
    nb = len(brs)
    V = op_point.v_op[t]
    TH = op_point.th_op[t]
    ends = BranchEnds.from_case(case)
    pair_pos = {pr: k for k, pr in enumerate(idx.N_P)}

    b = ProgramBuilder()
    th = {i: b.var(f"th_d[{i}]") for i in case.bus_ids}
    vd = {}
    for bus in case.buses:
        k = pos[bus.id]
        vd[bus.id] = b.var(f"v_d[{bus.id}]", bus.vmin - V[k], bus.vmax - V[k])
    P = {e: b.var(f"P[{_key(*e)}]") for e in idx.E_all}
    Q = {e: b.var(f"Q[{_key(*e)}]") for e in idx.E_all}
    pg, qg = {}, {}
    for gen in case.generators:
        pg[gen.id] = b.var(f"Pg[{gen.id}]", gen.pmin, gen.pmax, cost=gen.c1, quad=2.0 * gen.c2)
        qg[gen.id] = b.var(f"Qg[{gen.id}]", gen.qmin, gen.qmax)
        b.c0 += gen.c0
    ch = {pr: b.var(f"cos_hat[{_key(*pr)}]") for pr in idx.N_P}
    vc = {e: b.var(f"v_chk[{e}]") for e, _, _ in idx.E}

    # nodal balances (shunt term linearised at the operating point)
    p_es, q_es = _schedule_at(storage_schedule, t)
    beta = case.storage.bus if case.storage is not None else None
    if beta is None and (p_es or q_es):
        raise ModelBuildError("non-zero storage schedule on a case without storage")
    gsh, bsh, pd, qd = case.shunt_g(), case.shunt_b(), case.load_p(t), case.load_q(t)
    for bus in case.buses:
        i, k = bus.id, pos[bus.id]
        out = [e for e in idx.E_all if e[1] == i]
        rp = {pg[g]: 1.0 for g in idx.G_i[i]}
        rq = {qg[g]: 1.0 for g in idx.G_i[i]}
        for e in out:
            rp[P[e]] = -1.0
            rq[Q[e]] = -1.0
        rp[vd[i]] = -2.0 * V[k] * gsh[k]
        rq[vd[i]] = 2.0 * V[k] * bsh[k]
        sp_ = p_es if i == beta else 0.0
        sq_ = q_es if i == beta else 0.0
        b.eq(rp, pd[k] + V[k] ** 2 * gsh[k] + sp_, f"bal_p[{i}]")
        b.eq(rq, qd[k] - V[k] ** 2 * bsh[k] + sq_, f"bal_q[{i}]")

    # flow equations over E and E_rev
    for n_end, e in enumerate(idx.E_all):
        br_id, i, j = e
        ki, kj = pos[i], pos[j]
        eb = n_end % nb
        pair = (i, j) if (i, j) in pair_pos else (j, i)
        cps, cms = coeffs.cps[t, n_end], coeffs.cms[t, n_end]
        gs, bs, tau = ends.gs[n_end], ends.bs[n_end], ends.tau[n_end]
        VV = V[ki] * V[kj]
        rp = {
            P[e]: 1.0,
            vd[i]: -2.0 * V[ki] * gs + cps * V[kj] / tau,
            vc[br_id]: -0.5,
            ch[pair]: cps * VV / tau,
            th[i]: cms * VV / tau,
            th[j]: -cms * VV / tau,
        }
        rp[vd[j]] = rp.get(vd[j], 0.0) + cps * V[ki] / tau
        b.eq(rp, V[ki] ** 2 * gs, f"flow_p[{_key(*e)}]")
        rq = {
            Q[e]: 1.0,
            vd[i]: 2.0 * V[ki] * bs - cms * V[kj] / tau,
            ch[pair]: -cms * VV / tau,
            th[i]: cps * VV / tau,
            th[j]: -cps * VV / tau,
        }
        rq[vd[j]] = rq.get(vd[j], 0.0) - cms * V[ki] / tau
        b.eq(rq, -V[ki] ** 2 * bs, f"flow_q[{_key(*e)}]")
        del eb

    # voltage second-order term: cone where flagged, else v_chk = 0
    for n_e, (br_id, i, j) in enumerate(idx.E):
        if flags.lam[t, n_e]:
            if not coeffs.defined[t, n_e]:
                raise ModelBuildError(f"branch {br_id}: voltage cone coefficients undefined at t={t}")
            w = [b.var(f"w{r}[{br_id}]") for r in range(4)]
            b.eq({w[0]: 1.0, vc[br_id]: -0.5}, 0.5, f"w0_def[{br_id}]")
            b.eq({w[1]: 1.0, vc[br_id]: 0.5}, 0.5, f"w1_def[{br_id}]")
            r2 = {w[2]: 1.0, vd[i]: -coeffs.p1[t, n_e]}
            r2[vd[j]] = r2.get(vd[j], 0.0) - coeffs.p2[t, n_e]
            b.eq(r2, 0.0, f"w2_def[{br_id}]")
            b.eq({w[3]: 1.0, vd[i]: -coeffs.p3[t, n_e]}, 0.0, f"w3_def[{br_id}]")
            b.soc(w[0], w[1:], name=f"vcone[{br_id}]")
        else:
            b.eq({vc[br_id]: 1.0}, 0.0, f"v_lin[{br_id}]")

    # cosine second-order term: cone where flagged, else cos_hat = 1
    for n_p, (i, j) in enumerate(idx.N_P):
        key = _key(i, j)
        if flags.gam[t, n_p]:
            f = [b.var(f"f{r}[{key}]") for r in range(3)]
            b.eq({f[0]: 1.0, ch[(i, j)]: 1.0}, 1.25, f"f0_def[{key}]")
            b.eq({f[1]: 1.0, th[i]: -1 / math.sqrt(2), th[j]: 1 / math.sqrt(2)}, 0.0, f"f1_def[{key}]")
            b.eq({f[2]: 1.0, ch[(i, j)]: -1.0}, -0.75, f"f2_def[{key}]")
            b.soc(f[0], f[1:], name=f"ccone[{key}]")
        else:
            b.eq({ch[(i, j)]: 1.0}, 1.0, f"cos_lin[{key}]")

    # apparent-power limits
    for n_end, e in enumerate(idx.E_all):
        if flags.phi[t, n_end] and ends.s_max[n_end] > 0:
            b.soc(None, [P[e], Q[e]], head_const=float(ends.s_max[n_end]), name=f"slim[{_key(*e)}]")

    ref = case.reference_bus
    b.eq({th[ref]: 1.0}, -TH[pos[ref]], f"ref[{ref}]")
    return b.build("min")


def build_ll_primal(case, op_point, coeffs, flags, storage_schedule=None) -> ConicProgram:
    """Full-horizon primal: per-step programs stacked with prefixes ``t<k>.``."""
    progs = [build_ll_primal_step(case, op_point, coeffs, flags, storage_schedule, t) for t in range(case.horizon)]
    return stack_programs(progs, [f"t{t}." for t in range(case.horizon)])


def census(program: ConicProgram) -> dict[str, dict[str, int]]:
    """Variable, equality and cone counts by family (name before ``[``)."""

    def fam(name: str) -> str:
        return name.split(".", 1)[-1].split("[", 1)[0]

    out: dict[str, dict[str, int]] = {"variables": {}, "equalities": {}, "cones": {}}
    for key, names in (("variables", program.names), ("equalities", program.row_names), ("cones", [s.name for s in program.socs])):
        for nm in names:
            out[key][fam(nm)] = out[key].get(fam(nm), 0) + 1
    return out


# ---------------------------------------------------------------- solution

@dataclass
class PrimalSolution:
    th_d: np.ndarray  # [T, n]
    v_d: np.ndarray  # [T, n]
    P: np.ndarray  # [T, 2*nbr]
    Q: np.ndarray
    Pg: np.ndarray  # [T, ng]
    Qg: np.ndarray
    cos_hat: np.ndarray  # [T, n_pairs]
    v_chk: np.ndarray  # [T, nbr]
    w: np.ndarray  # [T, nbr, 4], nan where the voltage cone is absent
    f: np.ndarray  # [T, n_pairs, 3], nan where the cosine cone is absent
    objective: float
    bal_mult_p: np.ndarray  # [T, n] equality multipliers of the active balance
    bal_mult_q: np.ndarray
    iterations: int = 0
    status: str = "optimal"
    result: SolveResult | None = field(default=None, repr=False)

    @property
    def lmp_p(self) -> np.ndarray:
        """Cost derivative w.r.t. active load (positive price convention)."""
        return -self.bal_mult_p

    @property
    def lmp_q(self) -> np.ndarray:
        return -self.bal_mult_q


def extract_primal(case: NetworkCase, program: ConicProgram, result: SolveResult, prefixes=None) -> PrimalSolution:
    idx = build_index_sets(case)
    T = case.horizon if prefixes is None else len(prefixes)
    prefixes = prefixes if prefixes is not None else [f"t{t}." for t in range(T)]
    ix = program.index()
    rx = {nm: k for k, nm in enumerate(program.row_names)}
    x, y = result.x, result.y

    def grab(pre, fmt, keys):
        return np.array([x[ix[pre + fmt.format(k)]] for k in keys])

    def opt(pre, fmt, keys):
        return np.array([x[ix[pre + fmt.format(k)]] if pre + fmt.format(k) in ix else np.nan for k in keys])

    bus = case.bus_ids
    ends = [_key(*e) for e in idx.E_all]
    pairs = [_key(*p) for p in idx.N_P]
    brs = [e for e, _, _ in idx.E]
    gens = [g.id for g in case.generators]
    out = {k: [] for k in ("th_d", "v_d", "P", "Q", "Pg", "Qg", "cos_hat", "v_chk", "w", "f", "yp", "yq")}
    for pre in prefixes:
        out["th_d"].append(grab(pre, "th_d[{}]", bus))
        out["v_d"].append(grab(pre, "v_d[{}]", bus))
        out["P"].append(grab(pre, "P[{}]", ends))
        out["Q"].append(grab(pre, "Q[{}]", ends))
        out["Pg"].append(grab(pre, "Pg[{}]", gens))
        out["Qg"].append(grab(pre, "Qg[{}]", gens))
        out["cos_hat"].append(grab(pre, "cos_hat[{}]", pairs))
        out["v_chk"].append(grab(pre, "v_chk[{}]", brs))
        out["w"].append(np.stack([opt(pre, f"w{r}[{{}}]", brs) for r in range(4)], axis=1) if brs else np.zeros((0, 4)))
        out["f"].append(np.stack([opt(pre, f"f{r}[{{}}]", pairs) for r in range(3)], axis=1) if pairs else np.zeros((0, 3)))
        out["yp"].append(np.array([y[rx[f"{pre}bal_p[{i}]"]] for i in bus]))
        out["yq"].append(np.array([y[rx[f"{pre}bal_q[{i}]"]] for i in bus]))
    arr = {k: np.array(v) for k, v in out.items()}
    return PrimalSolution(
        th_d=arr["th_d"], v_d=arr["v_d"], P=arr["P"], Q=arr["Q"], Pg=arr["Pg"], Qg=arr["Qg"],
        cos_hat=arr["cos_hat"], v_chk=arr["v_chk"], w=arr["w"], f=arr["f"],
        objective=float(result.objective), bal_mult_p=arr["yp"], bal_mult_q=arr["yq"],
        iterations=result.iterations, status=result.status, result=result,
    )


# ------------------------------------------------------ equivalence checks

def voltage_quadratic(v_d_i, v_d_j, coeffs: DerivedCoeffs, branch: Branch, t: int = 0):
    """Right-hand side of the quadratic voltage inequality ``v_chk >= q(dV)``."""
    e = coeffs.position(branch.id)
    c = coeffs.cos_op[t, e]
    return ((branch.g + branch.g_fr) * v_d_i**2 / branch.tau**2
            - 2.0 * branch.g * c * v_d_i * v_d_j / branch.tau
            + (branch.g + branch.g_to) * v_d_j**2)


def soc_equivalence_check(v_d_i, v_d_j, th_d_i, th_d_j, coeffs: DerivedCoeffs, branch: Branch, *,
                          t: int = 0, v_chk=None, cos_hat=None, margin: float = 1e-9):
    """Whether the cone and the quadratic forms agree at a point (vectorised).

    ``v_chk``/``cos_hat`` default to the binding values of the quadratic
    forms.  A constraint counts as satisfied when its violation is at most
    ``margin``.  Returns ``(voltage_agree, cosine_agree)``.
    """
    e = coeffs.position(branch.id)
    quad = voltage_quadratic(v_d_i, v_d_j, coeffs, branch, t)
    v_chk = quad if v_chk is None else v_chk
    dth = np.asarray(th_d_i) - np.asarray(th_d_j)
    cos_hat = 1.0 - dth**2 / 2.0 if cos_hat is None else cos_hat

    w0, w1 = (1.0 + v_chk) / 2.0, (1.0 - v_chk) / 2.0
    w2 = coeffs.p1[t, e] * v_d_i + coeffs.p2[t, e] * v_d_j
    w3 = coeffs.p3[t, e] * v_d_i
    cone_v = (w0 - np.sqrt(w1**2 + w2**2 + w3**2) >= -margin)
    quad_v = (v_chk - quad >= -margin)

    f0, f1, f2 = 1.25 - cos_hat, dth / math.sqrt(2.0), cos_hat - 0.75
    cone_c = (f0 - np.sqrt(f1**2 + f2**2) >= -margin)
    quad_c = (1.0 - dth**2 / 2.0 - cos_hat >= -margin)
    return np.asarray(cone_v == quad_v), np.asarray(cone_c == quad_c)


# ------------------------------------------------------------- flow error

@dataclass
class FlowErrorReport:
    abs_p: np.ndarray  # [T, 2*nbr]
    abs_q: np.ndarray
    max_p: float
    max_q: float
    mean_p: float
    mean_q: float

    def to_dict(self) -> dict:
        return {"max_p": self.max_p, "max_q": self.max_q, "mean_p": self.mean_p, "mean_q": self.mean_q}


def evaluate_flow_error(primal: PrimalSolution, case: NetworkCase, op_point: OperatingPoint) -> FlowErrorReport:
    ends = BranchEnds.from_case(case)
    T = primal.P.shape[0]
    ep, eq = np.zeros_like(primal.P), np.zeros_like(primal.Q)
    for t in range(T):
        Pe, Qe = ends.flows(op_point.v_op[t] + primal.v_d[t], op_point.th_op[t] + primal.th_d[t])
        ep[t] = np.abs(primal.P[t] - Pe)
        eq[t] = np.abs(primal.Q[t] - Qe)
    size = ep.size > 0
    return FlowErrorReport(
        ep, eq,
        float(ep.max()) if size else 0.0, float(eq.max()) if size else 0.0,
        float(ep.mean()) if size else 0.0, float(eq.mean()) if size else 0.0,
    )
