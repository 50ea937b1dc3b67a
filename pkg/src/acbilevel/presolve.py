"""Operating point, flag selection and warm starts (steps 1 to 4), plus the
outer loop driver.

Flag marginals are read at the step-1 point, where every delta is zero.  At
that point the quadratic voltage and cosine equalities have the same
gradients as their linear variants (the quadratic parts have zero slope at
the origin), so the stationarity system of the equality-form model is that
of the all-linear model evaluated at the known primal point.  Its
multipliers are recovered by least squares on the transposed Jacobian of
the active constraints.  ``marginal_method="conic"`` solves the all-linear
convex model instead and reads the same multipliers from the solver.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from .conic import ConicProgram, SolveResult, WarmStart, solve_conic
from .cpsota import (
    DerivedCoeffs,
    PresolveFlags,
    PrimalSolution,
    build_ll_primal_step,
    census,
    compute_operating_coeffs,
    extract_primal,
    restrict_to_defined,
)
from .dualmodel import DualSolution, build_ll_dual_step, duality_gap, extract_dual
from .netcase import NetworkCase, build_index_sets
from .pfexact import ExactSolution, OperatingPoint, select_phi_flags, solve_exact_polar_opf

log = logging.getLogger(__name__)


class LowerLevelError(RuntimeError):
    """Lower-level solve failed; carries the program census."""

    def __init__(self, stage: str, t: int, status: str, model_census: dict):
        super().__init__(f"{stage} solve at t={t} ended with status {status!r}; census {model_census}")
        self.stage, self.t, self.status, self.census = stage, t, status, model_census


@dataclass
class AlgorithmConfig:
    phi_threshold: float = 0.8
    marginal_tol: float = 1e-7
    marginal_method: str = "lstsq"  # or "conic"
    loop_max: int = 1
    loop_tol: float = 1e-4
    damping: float = 1.0
    solver_tol: float = 1e-8
    opf_tol: float = 1e-6
    grid_points: int = 7
    q_grid_points: int = 1
    profit_tol: float = 1e-6
    sweeps: int = 20
    profit_mode: str = "audited"  # or "literal"
    shunt_form: str = "scaled"
    run_bilevel: bool = True
    rerun_on_overload: bool = True
    seed: int = 0

    def __post_init__(self):
        problems = []
        if not 0.0 < self.phi_threshold <= 1.0:
            problems.append("phi_threshold must lie in (0, 1]")
        for name in ("marginal_tol", "loop_tol", "solver_tol", "opf_tol", "profit_tol"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be > 0")
        if self.loop_max < 1:
            problems.append("loop_max must be >= 1")
        if not 0.0 < self.damping <= 1.0:
            problems.append("damping must lie in (0, 1]")
        if self.grid_points < 1 or self.q_grid_points not in (1, 3):
            problems.append("grid_points must be >= 1 and q_grid_points 1 or 3")
        if self.marginal_method not in ("lstsq", "conic"):
            problems.append("marginal_method must be 'lstsq' or 'conic'")
        if self.profit_mode not in ("audited", "literal"):
            problems.append("profit_mode must be 'audited' or 'literal'")
        if problems:
            raise ValueError("; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class WarmStartBundle:
    primal: list[WarmStart | None]
    dual: list[WarmStart | None]


@dataclass
class StageRecord:
    name: str
    step: int
    iteration: int
    objective: float | None
    seconds: float
    iterations: int = 0
    residuals: dict = field(default_factory=dict)
    status: str = "ok"
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------- step 1 & 2

def passive_schedule(case: NetworkCase):
    return np.zeros(case.horizon), np.zeros(case.horizon)


def _known_point(case, exact: ExactSolution, program: ConicProgram, t: int) -> np.ndarray:
    """Step-1 solution mapped onto the delta model (all deltas zero)."""
    idx = build_index_sets(case)
    ix = program.index()
    x = np.zeros(program.n)
    for n_end, e in enumerate(idx.E_all):
        key = ",".join(map(str, e))
        x[ix[f"P[{key}]"]] = exact.P[t, n_end]
        x[ix[f"Q[{key}]"]] = exact.Q[t, n_end]
    for k, gen in enumerate(case.generators):
        x[ix[f"Pg[{gen.id}]"]] = exact.Pg[t, k]
        x[ix[f"Qg[{gen.id}]"]] = exact.Qg[t, k]
    for i, j in idx.N_P:
        x[ix[f"cos_hat[{i},{j}]"]] = 1.0
    return x


def _lstsq_multipliers(program: ConicProgram, x: np.ndarray, act_tol: float = 1e-7):
    """Least-squares multipliers of the equalities at a known optimal point."""
    grad = program.gradient(x)
    cols = [program.A.T.tocsc()]
    n = program.n
    lo = np.flatnonzero(np.isfinite(program.lb) & (x - program.lb <= act_tol))
    up = np.flatnonzero(np.isfinite(program.ub) & (program.ub - x <= act_tol))
    if lo.size:
        cols.append(-sp.csc_matrix((np.ones(lo.size), (lo, np.arange(lo.size))), shape=(n, lo.size)))
    if up.size:
        cols.append(sp.csc_matrix((np.ones(up.size), (up, np.arange(up.size))), shape=(n, up.size)))
    rows, cc, vals = [], [], []
    ncone = 0
    for blk in program.socs:
        tail = x[list(blk.tail)]
        head = x[blk.head] if blk.head is not None else blk.head_const
        nt = np.linalg.norm(tail)
        if nt >= head - act_tol and nt > 0:
            for j, v in zip(blk.tail, tail / nt):
                rows.append(j)
                cc.append(ncone)
                vals.append(v)
            if blk.head is not None:
                rows.append(blk.head)
                cc.append(ncone)
                vals.append(-1.0)
            ncone += 1
    if ncone:
        cols.append(sp.csc_matrix((vals, (rows, cc)), shape=(n, ncone)))
    M = sp.hstack(cols).toarray()
    sol, *_ = np.linalg.lstsq(M, -grad, rcond=None)
    resid = float(np.max(np.abs(M @ sol + grad), initial=0.0))
    return sol[: program.m], resid


@dataclass
class MarginalReport:
    voltage: np.ndarray  # [T, nbr] objective sensitivity of the voltage equality
    cosine: np.ndarray  # [T, n_pairs]
    residual: np.ndarray  # [T] stationarity residual of the extraction
    method: str


def equality_form_marginals(case: NetworkCase, exact: ExactSolution, coeffs: DerivedCoeffs, phi: np.ndarray,
                            schedule=None, method: str = "lstsq") -> MarginalReport:
    idx = build_index_sets(case)
    T = case.horizon
    mv = np.zeros((T, len(idx.E)))
    mc = np.zeros((T, len(idx.N_P)))
    res = np.zeros(T)
    flags = PresolveFlags.uniform(case)
    flags.phi[:] = phi
    for t in range(T):
        prog = build_ll_primal_step(case, exact.op, coeffs, flags, schedule, t)
        rows = {nm: k for k, nm in enumerate(prog.row_names)}
        if method == "lstsq":
            y, res[t] = _lstsq_multipliers(prog, _known_point(case, exact, prog, t))
            if res[t] > 1e-6:
                log.warning("t=%d: least-squares multipliers leave residual %.2e, using the conic route", t, res[t])
                method_t = "conic"
            else:
                method_t = "lstsq"
        else:
            method_t = "conic"
        if method_t == "conic":
            r = solve_conic(prog)
            if not r.optimal:
                raise LowerLevelError("marginal", t, r.status, census(prog))
            y = r.y
            res[t] = r.residuals.get("dual", 0.0)
        # sensitivity of the optimum to the right-hand side is -y
        for k, (e, _, _) in enumerate(idx.E):
            mv[t, k] = -y[rows[f"v_lin[{e}]"]]
        for k, (i, j) in enumerate(idx.N_P):
            mc[t, k] = -y[rows[f"cos_lin[{i},{j}]"]]
    return MarginalReport(mv, mc, res, method)


def flags_from_marginals(report: MarginalReport, marginal_tol: float = 1e-7):
    """Voltage form binding when its marginal is positive, cosine when negative."""
    return report.voltage > marginal_tol, report.cosine < -marginal_tol


def determine_lambda_gamma(case: NetworkCase, op_point, coeffs: DerivedCoeffs, passive_schedule=None, *,
                           exact: ExactSolution | None = None, phi: np.ndarray | None = None,
                           marginal_tol: float = 1e-7, method: str = "lstsq"):
    """Return ``(lam, gam)`` flag matrices from equality-form marginals."""
    if exact is None:
        exact = solve_exact_polar_opf(case, passive_schedule)
        if not np.allclose(exact.op.v_op, op_point.v_op, atol=1e-6):
            raise ValueError("operating point is not the exact optimum for this schedule")
    if phi is None:
        phi = np.zeros((case.horizon, 2 * len(case.branches)), dtype=bool)
    rep = equality_form_marginals(case, exact, coeffs, phi, passive_schedule, method)
    lam, gam = flags_from_marginals(rep, marginal_tol)
    lam &= coeffs.defined
    return lam, gam


# ------------------------------------------------------- step 3 & 4 solves

def _merge_primal(parts: list[PrimalSolution]) -> PrimalSolution:
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
    return PrimalSolution(
        th_d=cat("th_d"), v_d=cat("v_d"), P=cat("P"), Q=cat("Q"), Pg=cat("Pg"), Qg=cat("Qg"),
        cos_hat=cat("cos_hat"), v_chk=cat("v_chk"), w=cat("w"), f=cat("f"),
        objective=float(sum(p.objective for p in parts)),
        bal_mult_p=cat("bal_mult_p"), bal_mult_q=cat("bal_mult_q"),
        iterations=int(sum(p.iterations for p in parts)),
        status="optimal" if all(p.status == "optimal" for p in parts) else "failed",
    )


def _merge_dual(parts: list[DualSolution]) -> DualSolution:
    values = {k: np.concatenate([p.values[k] for p in parts]) for k in parts[0].values}
    bounds = dict(parts[0].bounds)
    bounds["v_lo"] = np.concatenate([p.bounds["v_lo"] for p in parts])
    bounds["v_up"] = np.concatenate([p.bounds["v_up"] for p in parts])
    return DualSolution(
        values, parts[0].keys, float(sum(p.objective for p in parts)),
        "optimal" if all(p.status == "optimal" for p in parts) else "failed",
        int(sum(p.iterations for p in parts)), bounds,
    )


def solve_primal_step(case, op_point, coeffs, flags, schedule, t, warm=None, tol=1e-8):
    prog = build_ll_primal_step(case, op_point, coeffs, flags, schedule, t)
    res = solve_conic(prog, warm, tol=tol)
    if not res.optimal:
        raise LowerLevelError("primal", t, res.status, census(prog))
    return prog, res


def solve_dual_step(case, op_point, coeffs, flags, schedule, t, warm=None, tol=1e-8, shunt_form="scaled"):
    prog = build_ll_dual_step(case, op_point, coeffs, flags, schedule, t, shunt_form)
    res = solve_conic(prog, warm, tol=tol)
    if not res.optimal:
        raise LowerLevelError("dual", t, res.status, census(prog))
    return prog, res


def warm_start_primal(case, op_point, coeffs, flags, schedule=None, warm: list | None = None, tol: float = 1e-8):
    """Solve the primal per time step; returns the merged solution and warm starts."""
    parts, starts = [], []
    for t in range(case.horizon):
        prog, res = solve_primal_step(case, op_point, coeffs, flags, schedule, t, warm[t] if warm else None, tol)
        one = extract_primal(case, prog, res, prefixes=[""])
        parts.append(one)
        starts.append(WarmStart.from_result(res))
    return _merge_primal(parts), starts


def warm_start_dual(case, op_point, coeffs, flags, schedule=None, warm: list | None = None, tol: float = 1e-8,
                    shunt_form: str = "scaled"):
    parts, starts = [], []
    for t in range(case.horizon):
        prog, res = solve_dual_step(case, op_point, coeffs, flags, schedule, t, warm[t] if warm else None, tol,
                                    shunt_form)
        parts.append(extract_dual(case, op_point, prog, res, prefixes=[""], steps=[t]))
        starts.append(WarmStart.from_result(res))
    return _merge_dual(parts), starts


# ---------------------------------------------------------------- presolve

@dataclass
class PresolveResult:
    exact: ExactSolution
    coeffs: DerivedCoeffs
    flags: PresolveFlags
    marginals: MarginalReport
    primal: PrimalSolution
    dual: DualSolution
    warm: WarmStartBundle
    schedule: tuple
    stages: list[StageRecord]

    @property
    def op(self) -> OperatingPoint:
        return self.exact.op

    @property
    def gap(self) -> float:
        return abs(self.primal.objective - self.dual.objective) / max(1.0, abs(self.primal.objective))


def _ratings(case):
    return [br.s_max for br in sorted(case.branches, key=lambda b: b.id)]


def run_presolve(case: NetworkCase, config: AlgorithmConfig | None = None, schedule=None, *,
                 exact: ExactSolution | None = None, extra_phi: np.ndarray | None = None,
                 iteration: int = 0, warm: WarmStartBundle | None = None) -> PresolveResult:
    """Steps 1 to 4 for a fixed storage schedule (passive by default)."""
    config = config or AlgorithmConfig()
    schedule = schedule if schedule is not None else passive_schedule(case)
    stages = []

    t0 = time.perf_counter()
    if exact is None:
        exact = solve_exact_polar_opf(case, schedule, opf_tol=config.opf_tol)
    stages.append(StageRecord("operating_point", 1, iteration, exact.objective, time.perf_counter() - t0,
                              int(np.sum(exact.iterations)),
                              {"stationarity": float(np.max(exact.stationarity)),
                               "balance": float(np.max(exact.balance_residual))}))

    t0 = time.perf_counter()
    coeffs = compute_operating_coeffs(case, exact.op)
    phi = select_phi_flags(exact, _ratings(case), config.phi_threshold) if case.branches else \
        np.zeros((case.horizon, 0), dtype=bool)
    if extra_phi is not None:
        phi = phi | extra_phi
    rep = equality_form_marginals(case, exact, coeffs, phi, schedule, config.marginal_method)
    lam, gam = flags_from_marginals(rep, config.marginal_tol)
    flags = restrict_to_defined(PresolveFlags(lam, gam, phi), coeffs)
    stages.append(StageRecord("flags", 2, iteration, None, time.perf_counter() - t0, 0,
                              {"marginal_residual": float(np.max(rep.residual, initial=0.0))},
                              detail=flags.census()))

    t0 = time.perf_counter()
    primal, pw = warm_start_primal(case, exact.op, coeffs, flags, schedule, warm.primal if warm else None,
                                   config.solver_tol)
    stages.append(StageRecord("ll_primal", 3, iteration, primal.objective, time.perf_counter() - t0,
                              primal.iterations,
                              {"max_v_delta": float(np.max(np.abs(primal.v_d), initial=0.0)),
                               "max_th_delta": float(np.max(np.abs(primal.th_d), initial=0.0))}))

    t0 = time.perf_counter()
    dual, dw = warm_start_dual(case, exact.op, coeffs, flags, schedule, warm.dual if warm else None,
                               config.solver_tol, config.shunt_form)
    gap = abs(primal.objective - dual.objective) / max(1.0, abs(primal.objective))
    stages.append(StageRecord("ll_dual", 4, iteration, dual.objective, time.perf_counter() - t0, dual.iterations,
                              {"duality_gap": gap, "cone_violation": dual.cone_violation()}))
    return PresolveResult(exact, coeffs, flags, rep, primal, dual, WarmStartBundle(pw, dw), schedule, stages)


# --------------------------------------------------------------- algorithm

def _search_or_hold(case, config, pre, schedule):
    """Step 5: the discretized search, or the held schedule when it is disabled."""
    from .bilevel import LowerLevelClearing, StorageSchedule, discretized_bilevel_search

    clearing = LowerLevelClearing(case, pre, config)
    if config.run_bilevel:
        return discretized_bilevel_search(case, config, pre, clearing)
    best = StorageSchedule.from_net(*schedule, case.storage)
    return best, clearing.evaluate(best, config.profit_mode), []


def _verify(case, config, pre, best, predicted, warm_exact=None):
    from .report import verify_solution

    # convex-model flows under the chosen schedule for the overload check
    flows = None
    if predicted is not None:
        prim, _ = warm_start_primal(case, pre.op, pre.coeffs, pre.flags, (best.p_es, best.q_es),
                                    pre.warm.primal, config.solver_tol)
        flows = (prim.P, prim.Q)
    return verify_solution(case, best, predicted=predicted, predicted_flows=flows, phi=pre.flags.phi,
                           mode=config.profit_mode, opf_tol=config.opf_tol, warm_start=warm_exact)


def run_algorithm1(case: NetworkCase, config: AlgorithmConfig | None = None):
    """Steps 1 to 6, optionally looped; returns a :class:`RunReport`."""
    from .report import RunReport

    config = config or AlgorithmConfig()
    report = RunReport(case_name=case.name, horizon=case.horizon, config=config.to_dict())
    if case.storage is None:
        report.failed_stage, report.error = "input", "the algorithm needs a case with a storage unit"
        return report
    schedule = passive_schedule(case)
    exact = None
    for it in range(config.loop_max):
        stage = "presolve"
        try:
            pre = run_presolve(case, config, schedule, exact=exact, iteration=it)
            report.add_stages(pre.stages)
            report.flags_census = pre.flags.census()

            stage = "bilevel"
            t0 = time.perf_counter()
            best, predicted, trace = _search_or_hold(case, config, pre, schedule)
            if predicted is None:
                raise LowerLevelError("bilevel", -1, "failed", {})
            report.add_stages([StageRecord("bilevel", 5, it, predicted.profit, time.perf_counter() - t0,
                                           len(trace), {}, detail={"sweeps": max((r.sweep for r in trace), default=0)})])
            report.search_trace = [r.to_dict() for r in trace]

            stage = "verify"
            t0 = time.perf_counter()
            ver = _verify(case, config, pre, best, predicted)
            report.add_stages([StageRecord("verify", 6, it, ver.exact_cost, time.perf_counter() - t0,
                                           int(np.sum(ver.exact.iterations)), {"profit_gap": ver.profit_gap},
                                           detail={"overloaded": ver.overloaded})])
            if ver.overloaded and config.rerun_on_overload:
                # dropped limits turned out to matter: keep them and redo steps 2 to 6
                stage = "rerun"
                report.hook_triggered = True
                pre = run_presolve(case, config, schedule, exact=pre.exact, extra_phi=ver.overload_mask,
                                   iteration=it)
                report.add_stages([StageRecord(f"rerun_{s.name}", s.step, it, s.objective, s.seconds, s.iterations,
                                               s.residuals, s.status, s.detail) for s in pre.stages[1:]])
                report.flags_census = pre.flags.census()
                t0 = time.perf_counter()
                best, predicted, trace = _search_or_hold(case, config, pre, schedule)
                if predicted is None:
                    raise LowerLevelError("bilevel", -1, "failed", {})
                report.add_stages([StageRecord("rerun_bilevel", 5, it, predicted.profit, time.perf_counter() - t0,
                                               len(trace), {})])
                report.search_trace = [r.to_dict() for r in trace]
                t0 = time.perf_counter()
                ver = _verify(case, config, pre, best, predicted)
                report.add_stages([StageRecord("rerun_verify", 6, it, ver.exact_cost, time.perf_counter() - t0,
                                               int(np.sum(ver.exact.iterations)), {"profit_gap": ver.profit_gap},
                                               detail={"overloaded": ver.overloaded})])
        except Exception as exc:  # partial report with the failing stage marked
            report.failed_stage = stage
            report.error = f"{type(exc).__name__}: {exc}"
            log.exception("stage %s failed", stage)
            return report
        report.record_iteration(case, it, pre, best, predicted, ver)
        new = (schedule[0] + config.damping * (best.p_es - schedule[0]),
               schedule[1] + config.damping * (best.q_es - schedule[1]))
        change = float(max(np.max(np.abs(new[0] - schedule[0])), np.max(np.abs(new[1] - schedule[1]))))
        report.loop_trace[-1]["schedule_change"] = change
        schedule = new
        # step 6 solved the exact model at the new schedule: reuse it as the next step 1
        exact = ver.exact if config.damping == 1.0 else None
        if change <= config.loop_tol:
            report.converged = True
            break
    return report
