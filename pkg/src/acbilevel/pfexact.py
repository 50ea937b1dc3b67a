"""Exact polar power flow and a desk-scale exact polar AC OPF.

Branches follow the pi-model with tap ratio ``tau`` and phase shift ``sigma``.
For a branch ``(e, i, j)`` the from-end flows are

    P_ij = (g + g_fr) V_i^2 / tau^2 - (g cos a + b sin a) V_i V_j / tau
    Q_ij = -(b + b_fr) V_i^2 / tau^2 + (b cos a - g sin a) V_i V_j / tau

with ``a = th_i - th_j - sigma``; the to-end uses ``g_to``/``b_to`` without the
``1/tau^2`` factor and ``a = th_j - th_i + sigma``.

Nodal prices are reported so that a positive price means the optimal cost
rises when load at the bus rises (derivative of the cost w.r.t. load).
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .netcase import NetworkCase, build_index_sets

log = logging.getLogger(__name__)


class PowerFlowDivergence(RuntimeError):
    def __init__(self, mismatch: float, iterations: int):
        self.mismatch = mismatch
        self.iterations = iterations
        super().__init__(f"power flow did not converge in {iterations} iterations (mismatch {mismatch:.3e})")


class SingularJacobianError(np.linalg.LinAlgError):
    """Power-flow Jacobian is singular (e.g. an islanded PQ bus)."""


class OPFInfeasibleError(RuntimeError):
    def __init__(self, t: int, report: list[str]):
        self.t = t
        self.report = list(report)
        super().__init__(f"exact OPF infeasible at t={t}: " + "; ".join(self.report))


class OPFConvergenceError(RuntimeError):
    def __init__(self, t: int, history: list[dict]):
        self.t = t
        self.history = history
        last = history[-1] if history else {}
        super().__init__(f"exact OPF did not converge at t={t}; last iterate {last}")


@dataclass
class OperatingPoint:
    v_op: np.ndarray  # [T, n]
    th_op: np.ndarray  # [T, n]

    @property
    def horizon(self) -> int:
        return self.v_op.shape[0]

    @classmethod
    def flat(cls, case: NetworkCase) -> "OperatingPoint":
        n = len(case.buses)
        return cls(np.ones((case.horizon, n)), np.zeros((case.horizon, n)))


# ------------------------------------------------------------- branch model

@dataclass
class BranchEnds:
    """Vectorised branch ends over ``E`` followed by ``E_rev``."""

    own: np.ndarray  # bus position of the sending end
    other: np.ndarray
    gs: np.ndarray  # self conductance term
    bs: np.ndarray
    g: np.ndarray
    b: np.ndarray
    tau: np.ndarray
    shift: np.ndarray  # added to th_own - th_other
    s_max: np.ndarray
    branch: np.ndarray  # branch id per end
    n_branch: int

    @classmethod
    def from_case(cls, case: NetworkCase) -> "BranchEnds":
        pos = case.bus_position()
        brs = sorted(case.branches, key=lambda br: br.id)
        f = np.array([pos[br.from_bus] for br in brs], dtype=int)
        t = np.array([pos[br.to_bus] for br in brs], dtype=int)
        arr = lambda name: np.array([getattr(br, name) for br in brs], dtype=float)
        g, b, tau, sig = arr("g"), arr("b"), arr("tau"), arr("sigma")
        return cls(
            own=np.concatenate([f, t]),
            other=np.concatenate([t, f]),
            gs=np.concatenate([(g + arr("g_fr")) / tau**2, g + arr("g_to")]),
            bs=np.concatenate([(b + arr("b_fr")) / tau**2, b + arr("b_to")]),
            g=np.concatenate([g, g]),
            b=np.concatenate([b, b]),
            tau=np.concatenate([tau, tau]),
            shift=np.concatenate([-sig, sig]),
            s_max=np.concatenate([arr("s_max"), arr("s_max")]),
            branch=np.array([br.id for br in brs] * 2, dtype=int),
            n_branch=len(brs),
        )

    @property
    def n_end(self) -> int:
        return len(self.own)

    def angle(self, th: np.ndarray) -> np.ndarray:
        return th[self.own] - th[self.other] + self.shift

    def flows(self, v: np.ndarray, th: np.ndarray):
        a = self.angle(th)
        C = self.g * np.cos(a) + self.b * np.sin(a)
        S = self.g * np.sin(a) - self.b * np.cos(a)
        vk, vm = v[self.own], v[self.other]
        P = self.gs * vk**2 - C * vk * vm / self.tau
        Q = -self.bs * vk**2 - S * vk * vm / self.tau
        return P, Q

    def local(self, v, th, hessian=False):
        """Flows with derivatives w.r.t. the local variables (V_k, V_m, th_k, th_m)."""
        a = self.angle(th)
        C = self.g * np.cos(a) + self.b * np.sin(a)
        S = self.g * np.sin(a) - self.b * np.cos(a)
        vk, vm, it = v[self.own], v[self.other], 1.0 / self.tau
        P = self.gs * vk**2 - C * vk * vm * it
        Q = -self.bs * vk**2 - S * vk * vm * it
        pa, qa = S * vk * vm * it, -C * vk * vm * it
        dP = np.stack([2 * self.gs * vk - C * vm * it, -C * vk * it, pa, -pa], axis=1)
        dQ = np.stack([-2 * self.bs * vk - S * vm * it, -S * vk * it, qa, -qa], axis=1)
        if not hessian:
            return P, Q, dP, dQ
        ne = self.n_end
        sgn = np.array([1.0, -1.0])
        HP = np.zeros((ne, 4, 4))
        HQ = np.zeros((ne, 4, 4))
        HP[:, 0, 0] = 2 * self.gs
        HQ[:, 0, 0] = -2 * self.bs
        HP[:, 0, 1] = HP[:, 1, 0] = -C * it
        HQ[:, 0, 1] = HQ[:, 1, 0] = -S * it
        # mixed magnitude/angle and angle/angle blocks via da/dth = (1, -1)
        pka, pma, paa = S * vm * it, S * vk * it, C * vk * vm * it
        qka, qma, qaa = -C * vm * it, -C * vk * it, S * vk * vm * it
        for r, (pv, qv) in enumerate(((pka, qka), (pma, qma))):
            for c in range(2):
                HP[:, r, 2 + c] = HP[:, 2 + c, r] = pv * sgn[c]
                HQ[:, r, 2 + c] = HQ[:, 2 + c, r] = qv * sgn[c]
        for r in range(2):
            for c in range(2):
                HP[:, 2 + r, 2 + c] = paa * sgn[r] * sgn[c]
                HQ[:, 2 + r, 2 + c] = qaa * sgn[r] * sgn[c]
        return P, Q, dP, dQ, HP, HQ

    def columns(self, n_bus: int) -> np.ndarray:
        """Global (V, th) column of each local variable, for a layout [V(n), th(n)]."""
        return np.stack([self.own, self.other, n_bus + self.own, n_bus + self.other], axis=1)


def branch_flows(case: NetworkCase, v: np.ndarray, th: np.ndarray):
    """Exact flows ``(P, Q)`` over ``E`` then ``E_rev`` for one time step."""
    return BranchEnds.from_case(case).flows(np.asarray(v, float), np.asarray(th, float))


def _incidence(case: NetworkCase, ends: BranchEnds):
    n = len(case.buses)
    pos = case.bus_position()
    A_end = np.zeros((n, ends.n_end))
    A_end[ends.own, np.arange(ends.n_end)] = 1.0
    A_gen = np.zeros((n, len(case.generators)))
    for k, gen in enumerate(case.generators):
        A_gen[pos[gen.bus], k] = 1.0
    return A_end, A_gen


def _storage_vectors(case: NetworkCase, storage_schedule, t: int):
    n = len(case.buses)
    pe, qe = np.zeros(n), np.zeros(n)
    if storage_schedule is None:
        return pe, qe
    if hasattr(storage_schedule, "p_es"):
        p, q = storage_schedule.p_es, storage_schedule.q_es
    else:
        p, q = storage_schedule
    p, q = float(np.asarray(p)[t]), float(np.asarray(q)[t])
    if p == 0.0 and q == 0.0:
        return pe, qe
    if case.storage is None:
        raise ValueError("non-zero storage schedule on a case without a storage unit")
    k = case.bus_position()[case.storage.bus]
    pe[k], qe[k] = p, q
    return pe, qe


def bus_mismatch(case: NetworkCase, t: int, v, th, p_inj, q_inj):
    """Active and reactive balance residuals at every bus.

    ``p_inj``/``q_inj`` are controllable injections per bus (generation minus
    storage charging); loads and shunts at step ``t`` are taken from the case.
    """
    ends = BranchEnds.from_case(case)
    A_end, _ = _incidence(case, ends)
    P, Q = ends.flows(v, th)
    v = np.asarray(v, float)
    mp = p_inj - case.load_p(t) - A_end @ P - case.shunt_g() * v**2
    mq = q_inj - case.load_q(t) - A_end @ Q + case.shunt_b() * v**2
    return mp, mq


# --------------------------------------------------------------- power flow

@dataclass
class FixedInjections:
    """Controllable injections per bus (ordered like ``case.buses``).

    ``pv_buses`` hold their magnitude at ``v_set``; the reference bus is the
    slack and uses ``v_set`` too (default 1.0).
    """

    p: np.ndarray
    q: np.ndarray
    pv_buses: tuple[int, ...] = ()
    v_set: np.ndarray | None = None

    @classmethod
    def from_dispatch(cls, case: NetworkCase, Pg, Qg, storage=(0.0, 0.0), pv_buses=(), v_set=None):
        A_gen = _incidence(case, BranchEnds.from_case(case))[1]
        p = A_gen @ np.asarray(Pg, float)
        q = A_gen @ np.asarray(Qg, float)
        if case.storage is not None:
            k = case.bus_position()[case.storage.bus]
            p[k] -= storage[0]
            q[k] -= storage[1]
        return cls(p, q, tuple(pv_buses), None if v_set is None else np.asarray(v_set, float))


def newton_power_flow(
    case: NetworkCase,
    fixed_injections: FixedInjections,
    t: int = 0,
    *,
    warm_start=None,
    tol: float = 1e-8,
    max_iter: int = 20,
    history: list | None = None,
):
    """Newton-Raphson power flow in polar coordinates; returns ``(v, th)``.

    ``history``, when given, receives the max mismatch before every step.
    """
    n = len(case.buses)
    pos = case.bus_position()
    ref = pos[case.reference_bus]
    pv = sorted({pos[b] for b in fixed_injections.pv_buses} - {ref})
    pq = [k for k in range(n) if k != ref and k not in pv]
    ang = [k for k in range(n) if k != ref]
    v_set = fixed_injections.v_set if fixed_injections.v_set is not None else np.ones(n)
    if warm_start is None:
        v, th = np.ones(n), np.zeros(n)
    else:
        v, th = (np.array(x, dtype=float) for x in warm_start)
    v[[ref] + pv] = v_set[[ref] + pv]
    th[ref] = 0.0

    ends = BranchEnds.from_case(case)
    A_end, _ = _incidence(case, ends)
    cols = ends.columns(n)
    gsh, bsh = case.shunt_g(), case.shunt_b()
    p_inj, q_inj = np.asarray(fixed_injections.p, float), np.asarray(fixed_injections.q, float)
    rows_p, rows_q = np.array(ang, dtype=int), np.array(pq, dtype=int)
    cols_x = np.concatenate([n + rows_p, rows_q])

    for it in range(max_iter + 1):
        P, Q, dP, dQ = ends.local(v, th)
        mp = p_inj - case.load_p(t) - A_end @ P - gsh * v**2
        mq = q_inj - case.load_q(t) - A_end @ Q + bsh * v**2
        F = np.concatenate([mp[rows_p], mq[rows_q]])
        err = float(np.max(np.abs(F))) if F.size else 0.0
        if history is not None:
            history.append(err)
        if err <= tol:
            return v, th
        if it == max_iter:
            break
        JP = np.zeros((ends.n_end, 2 * n))
        JQ = np.zeros((ends.n_end, 2 * n))
        r = np.repeat(np.arange(ends.n_end), 4)
        np.add.at(JP, (r, cols.ravel()), dP.ravel())
        np.add.at(JQ, (r, cols.ravel()), dQ.ravel())
        Jp = -A_end @ JP
        Jq = -A_end @ JQ
        Jp[np.arange(n), np.arange(n)] -= 2 * gsh * v
        Jq[np.arange(n), np.arange(n)] += 2 * bsh * v
        J = np.vstack([Jp[rows_p][:, cols_x], Jq[rows_q][:, cols_x]])
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", sla.LinAlgWarning)
                lu = sla.lu_factor(J, check_finite=True)
        except (ValueError, sla.LinAlgError) as exc:
            raise SingularJacobianError(str(exc)) from None
        if np.min(np.abs(np.diag(lu[0]))) <= 1e-14 * max(1.0, np.max(np.abs(J))):
            raise SingularJacobianError("power-flow Jacobian is singular")
        dx = sla.lu_solve(lu, -F)
        th[rows_p] += dx[: len(rows_p)]
        v[rows_q] += dx[len(rows_p) :]
    raise PowerFlowDivergence(err, max_iter)


# ---------------------------------------------------------------- exact OPF

@dataclass
class ExactSolution:
    case_name: str
    Pg: np.ndarray  # [T, ng]
    Qg: np.ndarray
    op: OperatingPoint
    price_p: np.ndarray  # [T, n]
    price_q: np.ndarray
    objective: float
    P: np.ndarray  # [T, 2*nbr] over E then E_rev
    Q: np.ndarray
    flow_index: tuple = ()
    bus_ids: tuple = ()
    iterations: list[int] = field(default_factory=list)
    stationarity: list[float] = field(default_factory=list)
    balance_residual: list[float] = field(default_factory=list)
    seed_point: str = "flat"

    def to_dict(self) -> dict:
        return {
            "case": self.case_name,
            "objective": self.objective,
            "bus_ids": list(self.bus_ids),
            "flow_index": [list(e) for e in self.flow_index],
            "Pg": self.Pg.tolist(),
            "Qg": self.Qg.tolist(),
            "v": self.op.v_op.tolist(),
            "th": self.op.th_op.tolist(),
            "price_p": self.price_p.tolist(),
            "price_q": self.price_q.tolist(),
            "P": self.P.tolist(),
            "Q": self.Q.tolist(),
            "iterations": list(self.iterations),
            "stationarity": list(self.stationarity),
            "balance_residual": list(self.balance_residual),
            "seed_point": self.seed_point,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def price_at(self, bus_id: int) -> tuple[np.ndarray, np.ndarray]:
        k = list(self.bus_ids).index(bus_id)
        return self.price_p[:, k], self.price_q[:, k]


class _OPFStep:
    """Exact polar OPF for a single time step, variables x = [V, th, Pg, Qg]."""

    def __init__(self, case: NetworkCase, t: int, storage_schedule):
        self.case = case
        self.n = n = len(case.buses)
        self.ng = ng = len(case.generators)
        self.ends = BranchEnds.from_case(case)
        self.A_end, self.A_gen = _incidence(case, self.ends)
        self.cols = self.ends.columns(n)
        self.ref = case.bus_position()[case.reference_bus]
        pe, qe = _storage_vectors(case, storage_schedule, t)
        self.dp = case.load_p(t) + pe
        self.dq = case.load_q(t) + qe
        self.gsh, self.bsh = case.shunt_g(), case.shunt_b()
        gens = case.generators
        self.c2 = np.array([g.c2 for g in gens])
        self.c1 = np.array([g.c1 for g in gens])
        self.c0 = np.array([g.c0 for g in gens])
        lo = np.concatenate([[b.vmin for b in case.buses], np.full(n, -np.inf), [g.pmin for g in gens], [g.qmin for g in gens]])
        hi = np.concatenate([[b.vmax for b in case.buses], np.full(n, np.inf), [g.pmax for g in gens], [g.qmax for g in gens]])
        self.lo, self.hi = lo, hi
        self.il = np.flatnonzero(np.isfinite(lo))
        self.iu = np.flatnonzero(np.isfinite(hi))
        self.lim = np.flatnonzero(self.ends.s_max > 0)
        self.nx = 2 * n + 2 * ng

    def split(self, x):
        n, ng = self.n, self.ng
        return x[:n], x[n : 2 * n], x[2 * n : 2 * n + ng], x[2 * n + ng :]

    def objective(self, x):
        pg = self.split(x)[2]
        return float(np.sum(self.c2 * pg**2 + self.c1 * pg + self.c0))

    def evaluate(self, x, lam=None, z=None):
        """Constraint values and Jacobians; Lagrangian Hessian when multipliers given."""
        n, ng, nx = self.n, self.ng, self.nx
        v, th, pg, qg = self.split(x)
        hess = lam is not None
        out = self.ends.local(v, th, hessian=hess)
        P, Q, dP, dQ = out[:4]
        ne = self.ends.n_end
        r = np.repeat(np.arange(ne), 4)
        JP = np.zeros((ne, nx))
        JQ = np.zeros((ne, nx))
        np.add.at(JP, (r, self.cols.ravel()), dP.ravel())
        np.add.at(JQ, (r, self.cols.ravel()), dQ.ravel())

        gp = self.A_gen @ pg - self.dp - self.A_end @ P - self.gsh * v**2
        gq = self.A_gen @ qg - self.dq - self.A_end @ Q + self.bsh * v**2
        g = np.concatenate([gp, gq, [th[self.ref]]])
        Jg = np.zeros((2 * n + 1, nx))
        Jg[:n] = -self.A_end @ JP
        Jg[n : 2 * n] = -self.A_end @ JQ
        Jg[np.arange(n), np.arange(n)] -= 2 * self.gsh * v
        Jg[n + np.arange(n), np.arange(n)] += 2 * self.bsh * v
        Jg[:n, 2 * n : 2 * n + ng] = self.A_gen
        Jg[n : 2 * n, 2 * n + ng :] = self.A_gen
        Jg[2 * n, n + self.ref] = 1.0

        # inequalities h <= 0: lower bounds, upper bounds, branch limits
        L = self.lim
        h = np.concatenate([self.lo[self.il] - x[self.il], x[self.iu] - self.hi[self.iu], P[L] ** 2 + Q[L] ** 2 - self.ends.s_max[L] ** 2])
        Jh = np.zeros((len(h), nx))
        Jh[np.arange(len(self.il)), self.il] = -1.0
        Jh[len(self.il) + np.arange(len(self.iu)), self.iu] = 1.0
        Jh[len(self.il) + len(self.iu) :] = 2 * P[L, None] * JP[L] + 2 * Q[L, None] * JQ[L]
        if not hess:
            return g, Jg, h, Jh
        HP, HQ = out[4], out[5]
        H = np.zeros((nx, nx))
        H[2 * n + np.arange(ng), 2 * n + np.arange(ng)] = 2 * self.c2
        # weights on each end's P and Q Hessians from balance rows and limits
        wP = -(self.A_end.T @ lam[:n])
        wQ = -(self.A_end.T @ lam[n : 2 * n])
        zl = z[len(self.il) + len(self.iu) :]
        wP[L] += 2 * zl * P[L]
        wQ[L] += 2 * zl * Q[L]
        loc = wP[:, None, None] * HP + wQ[:, None, None] * HQ
        for e in range(ne):
            c = self.cols[e]
            H[np.ix_(c, c)] += loc[e]
        for k, e in enumerate(L):
            H += 2 * zl[k] * (np.outer(JP[e], JP[e]) + np.outer(JQ[e], JQ[e]))
        H[np.arange(n), np.arange(n)] += -2 * self.gsh * lam[:n] + 2 * self.bsh * lam[n : 2 * n]
        return g, Jg, h, Jh, H

    def gradient(self, x):
        grad = np.zeros(self.nx)
        pg = self.split(x)[2]
        grad[2 * self.n : 2 * self.n + self.ng] = 2 * self.c2 * pg + self.c1
        return grad

    def start(self):
        n = self.n
        x = np.zeros(self.nx)
        fin = np.isfinite(self.lo) & np.isfinite(self.hi)
        x[fin] = 0.5 * (self.lo[fin] + self.hi[fin])
        x[:n] = np.clip(1.0, self.lo[:n], self.hi[:n])
        x[n : 2 * n] = 0.0
        return x


def _kkt_solve(M, Jg, rhs_x, rhs_g):
    """Solve the saddle system with inertia correction on the (1,1) block."""
    nx, m = M.shape[0], Jg.shape[0]
    delta, delta_c = 0.0, 0.0
    for _ in range(40):
        K = np.block([[M + delta * np.eye(nx), Jg.T], [Jg, -delta_c * np.eye(m)]])
        try:
            lu, d, perm = sla.ldl(K)
        except (ValueError, np.linalg.LinAlgError):
            lu = None
        if lu is not None:
            ev = np.linalg.eigvalsh(d)
            n_pos, n_neg = int(np.sum(ev > 1e-13)), int(np.sum(ev < -1e-13))
            if n_pos == nx and n_neg == m:
                sol = np.linalg.solve(K, np.concatenate([rhs_x, rhs_g]))
                if np.all(np.isfinite(sol)):
                    return sol[:nx], sol[nx:]
            if n_pos + n_neg < nx + m:
                delta_c = max(delta_c * 10, 1e-10)
        delta = 1e-8 if delta == 0.0 else delta * 10
    raise np.linalg.LinAlgError("KKT inertia correction failed")


def _solve_step(prob: _OPFStep, t: int, opf_tol: float, mu0=1.0, mu_factor=0.2, mu_min=1e-9, max_inner=60, x0=None):
    x = prob.start() if x0 is None else np.array(x0, float)
    g, Jg, h, Jh = prob.evaluate(x)
    s = np.maximum(-h, 1e-1)
    mu = mu0
    z = mu / s
    lam = np.zeros(len(g))
    history: list[dict] = []
    total = 0
    while True:
        final = mu <= mu_min
        for _ in range(max_inner):
            g, Jg, h, Jh, H = prob.evaluate(x, lam, z)
            Lx = prob.gradient(x) + Jg.T @ lam + Jh.T @ z
            r_comp = s * z - mu
            res = max(np.max(np.abs(Lx)), np.max(np.abs(g)), np.max(np.abs(h + s)), np.max(np.abs(r_comp), initial=0.0))
            history.append({"mu": mu, "res": float(res), "obj": prob.objective(x)})
            if res <= (1e-10 if final else 10 * mu):
                break
            if not np.all(np.isfinite(Lx)):
                raise OPFConvergenceError(t, history)
            M = H + Jh.T @ ((z / s)[:, None] * Jh)
            N = Lx + Jh.T @ ((mu + z * h) / s)
            dx, dlam = _kkt_solve(M, Jg, -N, -g)
            ds = -h - s - Jh @ dx
            dz = (mu - s * z - z * ds) / s
            a_p = _max_step(s, ds)
            a_d = _max_step(z, dz)
            x = x + a_p * dx
            s = s + a_p * ds
            lam = lam + a_d * dlam
            z = z + a_d * dz
            total += 1
        else:
            if (final and history[-1]["res"] > opf_tol) or history[-1]["res"] > 1e3:
                raise OPFConvergenceError(t, history)
        if final:
            break
        mu = max(mu * mu_factor, mu_min)
    return x, lam, z, total, history


def _max_step(v, dv, frac=0.995):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return min(1.0, frac * float(np.min(-v[neg] / dv[neg])))


def _precheck(prob: _OPFStep, t: int):
    issues = []
    pmax = float(np.sum([g.pmax for g in prob.case.generators]))
    demand = float(np.sum(prob.dp))
    if pmax + 1e-12 < demand:
        issues.append(f"total pmax {pmax:.6g} below net demand {demand:.6g}")
    if not prob.case.generators:
        issues.append("no generators")
    if issues:
        raise OPFInfeasibleError(t, issues)


def solve_exact_polar_opf(
    case: NetworkCase,
    storage_schedule=None,
    *,
    opf_tol: float = 1e-6,
    warm_start: ExactSolution | None = None,
) -> ExactSolution:
    """Exact polar AC OPF per time step by a primal-dual log-barrier Newton method.

    ``storage_schedule`` is ``None`` (passive), an object with ``p_es``/``q_es``
    or a pair of arrays; positive values charge the storage (act like load).
    """
    n, ng = len(case.buses), len(case.generators)
    T = case.horizon
    Pg, Qg = np.zeros((T, ng)), np.zeros((T, ng))
    V, TH = np.zeros((T, n)), np.zeros((T, n))
    pp, pq = np.zeros((T, n)), np.zeros((T, n))
    ends = BranchEnds.from_case(case)
    Pf, Qf = np.zeros((T, ends.n_end)), np.zeros((T, ends.n_end))
    objective = 0.0
    iters, stat, bal = [], [], []
    for t in range(T):
        prob = _OPFStep(case, t, storage_schedule)
        _precheck(prob, t)
        x0 = None
        if warm_start is not None:
            x0 = np.concatenate([warm_start.op.v_op[t], warm_start.op.th_op[t], warm_start.Pg[t], warm_start.Qg[t]])
        x, lam, z, k, _ = _solve_step(prob, t, opf_tol, x0=x0)
        v, th, pg, qg = prob.split(x)
        g, Jg, h, Jh = prob.evaluate(x)
        Lx = prob.gradient(x) + Jg.T @ lam + Jh.T @ z
        stat.append(float(np.max(np.abs(Lx))))
        bal.append(float(np.max(np.abs(g))))
        iters.append(k)
        V[t], TH[t], Pg[t], Qg[t] = v, th, pg, qg
        # d(cost)/d(load) = -lambda for L = f + lambda^T g
        pp[t], pq[t] = -lam[:n], -lam[n : 2 * n]
        Pf[t], Qf[t] = ends.flows(v, th)
        objective += prob.objective(x)
    idx = build_index_sets(case)
    return ExactSolution(
        case_name=case.name,
        Pg=Pg, Qg=Qg, op=OperatingPoint(V, TH), price_p=pp, price_q=pq,
        objective=float(objective), P=Pf, Q=Qf,
        flow_index=idx.E_all, bus_ids=tuple(case.bus_ids),
        iterations=iters, stationarity=stat, balance_residual=bal,
        seed_point="flat" if warm_start is None else "warm",
    )


def select_phi_flags(exact_flows, branch_ratings, threshold: float = 0.8) -> np.ndarray:
    """Branch-limit flags over ``E`` then ``E_rev`` per time step.

    ``exact_flows`` is an :class:`ExactSolution` or a pair ``(P, Q)`` of
    ``[T, 2*nbr]`` arrays; ``branch_ratings`` holds ``s_max`` per branch (or per
    end).  A flag is set when the apparent flow reaches ``threshold * s_max``
    on a rated branch; the same rule applies to both orientations.
    """
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    if isinstance(exact_flows, ExactSolution):
        P, Q = exact_flows.P, exact_flows.Q
    else:
        P, Q = exact_flows
    P, Q = np.atleast_2d(np.asarray(P, float)), np.atleast_2d(np.asarray(Q, float))
    r = np.asarray(branch_ratings, float)
    if r.size * 2 == P.shape[1]:
        r = np.concatenate([r, r])
    mag = np.hypot(P, Q)
    return (r > 0) & (mag >= threshold * r)
