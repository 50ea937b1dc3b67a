"""Storage upper level, discretized bilevel search and the smoothing utility.

Sign convention: ``p_es = p_ch - p_dis`` (positive charges, drawing power
like a load).  ``lam1``/``lam2`` are the balance multipliers of the lower
level in its primal orientation, i.e. the negatives of the nodal prices.
Under that orientation ``sum p_es*lam1 + q_es*lam2`` is revenue from
discharging minus the cost of charging; this is the "audited" profit.  The
"literal" mode reads the multiplier as the price itself and flips the sign.
"""
from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .netcase import NetworkCase, StorageUnit

log = logging.getLogger(__name__)

PROFIT_MODES = ("audited", "literal")


# ------------------------------------------------------------- schedules

@dataclass
class StorageSchedule:
    p_es: np.ndarray
    q_es: np.ndarray
    p_ch: np.ndarray
    p_dis: np.ndarray
    soe: np.ndarray
    x_p: np.ndarray | None = None

    @classmethod
    def from_net(cls, p_es, q_es, unit: StorageUnit) -> "StorageSchedule":
        """Split net power into charge/discharge and integrate the energy state."""
        p = np.asarray(p_es, float).copy()
        q = np.asarray(q_es, float).copy()
        ch, dis = np.maximum(p, 0.0), np.maximum(-p, 0.0)
        soe = unit.soe_init + np.cumsum(ch * unit.eta_ch - dis / unit.eta_dis)
        return cls(p, q, ch, dis, soe)

    @classmethod
    def passive(cls, unit: StorageUnit, horizon: int) -> "StorageSchedule":
        return cls.from_net(np.zeros(horizon), np.zeros(horizon), unit)

    @property
    def horizon(self) -> int:
        return len(self.p_es)

    def to_dict(self) -> dict:
        out = {k: np.asarray(v).tolist() for k, v in asdict(self).items() if v is not None}
        return out


def storage_feasible(schedule: StorageSchedule, unit: StorageUnit, tol: float = 1e-9) -> list[str]:
    """Violations of the storage model; empty when every constraint holds."""
    out = []
    s = schedule
    if np.any(s.p_ch < -tol) or np.any(s.p_dis < -tol):
        out.append("charge and discharge power must be nonnegative")
    net = s.p_ch - s.p_dis
    if np.any(np.abs(net - s.p_es) > tol):
        out.append("net power differs from charge minus discharge")
    prev = np.concatenate([[unit.soe_init], s.soe[:-1]])
    bal = s.soe - prev - s.p_ch * unit.eta_ch + s.p_dis / unit.eta_dis
    for t in np.flatnonzero(np.abs(bal) > tol):
        out.append(f"t={t}: energy balance off by {bal[t]:.3g}")
    for t in np.flatnonzero((s.soe < -tol) | (s.soe > unit.soe_max + tol)):
        out.append(f"t={t}: state of energy {s.soe[t]:.6g} outside [0, {unit.soe_max}]")
    app = s.p_es**2 + s.q_es**2 - unit.s_max**2
    for t in np.flatnonzero(app > tol):
        out.append(f"t={t}: apparent power exceeds {unit.s_max}")
    if s.x_p is not None:
        x = np.asarray(s.x_p, float)
        if np.any((x < -tol) | (x > 1 + tol) | (np.abs(x - np.round(x)) > tol)):
            out.append("charge indicator must be binary")
        if np.any(s.p_ch > unit.s_max * x + tol) or np.any(s.p_dis > unit.s_max * (1 - x) + tol):
            out.append("simultaneous charge and discharge against the indicator")
    return out


# ----------------------------------------------------------------- profit

@dataclass
class ProfitEvaluation:
    profit: float
    lam1: np.ndarray  # [T] active balance multiplier at the storage bus
    lam2: np.ndarray
    schedule: StorageSchedule
    mode: str = "audited"
    per_t: np.ndarray = field(default_factory=lambda: np.zeros(0))
    predicted_cost: float | None = None

    def to_dict(self) -> dict:
        return {
            "profit": self.profit, "mode": self.mode,
            "lam1": self.lam1.tolist(), "lam2": self.lam2.tolist(), "per_t": self.per_t.tolist(),
            "predicted_cost": self.predicted_cost, "schedule": self.schedule.to_dict(),
        }


def prices_at_storage(dual, case: NetworkCase):
    """``(lam1, lam2)`` at the storage bus from a dual solution."""
    k = case.bus_position()[case.storage.bus]
    return dual.lam1[:, k], dual.lam2[:, k]


def evaluate_profit(schedule: StorageSchedule, market_prices, mode: str = "audited") -> ProfitEvaluation:
    """Profit of ``schedule`` under ``market_prices = (lam1, lam2)`` at the storage bus."""
    if mode not in PROFIT_MODES:
        raise ValueError(f"mode must be one of {PROFIT_MODES}")
    lam1, lam2 = (np.asarray(a, float) for a in market_prices)
    per_t = schedule.p_es * lam1 + schedule.q_es * lam2
    # q_es = 0 must not pick up nan/inf from an unused reactive price
    per_t = np.where(schedule.q_es == 0, schedule.p_es * lam1, per_t)
    if mode == "literal":
        per_t = -per_t
    return ProfitEvaluation(float(np.sum(per_t)), lam1, lam2, schedule, mode, per_t)


# ------------------------------------------------------- candidate grids

def candidate_grid(unit: StorageUnit, grid_points: int, q_points: int = 1) -> list[tuple[float, float]]:
    """Candidate ``(p_es, q_es)`` pairs, passive first, then by distance from it.

    The order makes the lowest-index tie-break favour small actions.
    """
    s = unit.s_max
    ps = {0.0} if grid_points <= 1 else set(np.linspace(-s, s, grid_points).round(12).tolist()) | {0.0}
    qs = {0.0} if q_points <= 1 else {-s, 0.0, s}
    cands = [(p, q) for p in ps for q in qs if p * p + q * q <= s * s * (1 + 1e-12)]
    return sorted(cands, key=lambda c: (abs(c[0]) + abs(c[1]), c[0], c[1]))


# --------------------------------------------------------- market clearing

@dataclass
class StepClearing:
    lam1: float
    lam2: float
    primal_objective: float
    dual_objective: float
    iterations: int


class LowerLevelClearing:
    """Re-clears the lower level per time step with a candidate injection.

    The lower level decouples over time, so the clearing of step ``t`` only
    depends on the storage action at ``t``; results are cached on that key.
    """

    def __init__(self, case: NetworkCase, presolve, config):
        self.case, self.pre, self.config = case, presolve, config
        self.cache: dict[tuple[int, float, float], StepClearing | None] = {}
        self.k_beta = case.bus_position()[case.storage.bus]

    def _schedule(self, t, p, q):
        ps, qs = np.zeros(self.case.horizon), np.zeros(self.case.horizon)
        ps[t], qs[t] = p, q
        return ps, qs

    def clear(self, t: int, p: float, q: float) -> StepClearing | None:
        key = (t, float(p), float(q))
        if key in self.cache:
            return self.cache[key]
        from .dualmodel import extract_dual
        from .presolve import LowerLevelError, solve_dual_step, solve_primal_step

        pre, cfg = self.pre, self.config
        sched = self._schedule(t, p, q)
        try:
            _, pr = solve_primal_step(self.case, pre.op, pre.coeffs, pre.flags, sched, t, pre.warm.primal[t],
                                      cfg.solver_tol)
            dp, dr = solve_dual_step(self.case, pre.op, pre.coeffs, pre.flags, sched, t, pre.warm.dual[t],
                                     cfg.solver_tol, cfg.shunt_form)
        except LowerLevelError as exc:
            log.warning("candidate (t=%d, p=%g, q=%g) skipped: %s", t, p, q, exc)
            self.cache[key] = None
            return None
        ds = extract_dual(self.case, pre.op, dp, dr, prefixes=[""], steps=[t])
        out = StepClearing(float(ds.lam1[0, self.k_beta]), float(ds.lam2[0, self.k_beta]), pr.objective,
                           dr.objective, pr.iterations + dr.iterations)
        self.cache[key] = out
        return out

    def contribution(self, t, p, q, mode="audited") -> float | None:
        c = self.clear(t, p, q)
        if c is None:
            return None
        val = p * c.lam1 + q * c.lam2
        return -val if mode == "literal" else val

    def evaluate(self, schedule: StorageSchedule, mode="audited") -> ProfitEvaluation | None:
        parts = [self.clear(t, schedule.p_es[t], schedule.q_es[t]) for t in range(schedule.horizon)]
        if any(c is None for c in parts):
            return None
        ev = evaluate_profit(schedule, (np.array([c.lam1 for c in parts]), np.array([c.lam2 for c in parts])), mode)
        ev.predicted_cost = float(sum(c.primal_objective for c in parts))
        return ev


# ------------------------------------------------------------------ search

@dataclass
class SearchTraceRow:
    sweep: int
    t: int
    p_es: float
    q_es: float
    profit: float | None  # total profit with this candidate at t; None if skipped
    accepted: bool
    best_profit: float  # incumbent after this coordinate step
    note: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("p_es", "q_es", "profit", "best_profit"):
            d[k] = None if d[k] is None else float(d[k])
        return d


TRACE_HEADER = ["sweep", "t", "p_es", "q_es", "profit", "accepted", "best_profit", "note"]


def write_trace_csv(trace: list[SearchTraceRow], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for r in trace:
            w.writerow([r.sweep, r.t, repr(r.p_es), repr(r.q_es), "" if r.profit is None else repr(r.profit),
                        int(r.accepted), repr(r.best_profit), r.note])
    return path


def discretized_bilevel_search(case: NetworkCase, config=None, presolve=None, clearing: LowerLevelClearing | None = None):
    """Coordinate search over time steps on the candidate grid.

    Starts from the passive schedule; at each step ``t`` every candidate is
    cleared with the others fixed and the best feasible one is kept if it
    improves the incumbent by more than ``profit_tol``.  Sweeps repeat until
    a full sweep makes no move.  Returns ``(schedule, evaluation, trace)``.
    """
    from .presolve import AlgorithmConfig, run_presolve

    config = config or AlgorithmConfig()
    unit = case.storage
    if unit is None:
        raise ValueError("case has no storage unit")
    presolve = presolve or run_presolve(case, config)
    clearing = clearing or LowerLevelClearing(case, presolve, config)
    mode = config.profit_mode
    T = case.horizon
    cands = candidate_grid(unit, config.grid_points, config.q_grid_points)
    p, q = np.zeros(T), np.zeros(T)
    contrib = np.zeros(T)  # passive action contributes nothing
    best = 0.0
    trace: list[SearchTraceRow] = []
    for sweep in range(1, config.sweeps + 1):
        moved = False
        for t in range(T):
            base = best - contrib[t]
            rows = []
            arg, arg_val, arg_c = None, -np.inf, 0.0
            for cand in cands:
                pt, qt = p.copy(), q.copy()
                pt[t], qt[t] = cand
                sched = StorageSchedule.from_net(pt, qt, unit)
                if storage_feasible(sched, unit):
                    rows.append(SearchTraceRow(sweep, t, cand[0], cand[1], None, False, 0.0, "infeasible"))
                    continue
                c = clearing.contribution(t, cand[0], cand[1], mode)
                if c is None:
                    rows.append(SearchTraceRow(sweep, t, cand[0], cand[1], None, False, 0.0, "solve failed"))
                    continue
                val = base + c
                rows.append(SearchTraceRow(sweep, t, cand[0], cand[1], val, False, 0.0))
                if val > arg_val:  # strict: lowest index wins ties
                    arg, arg_val, arg_c = cand, val, c
            if arg is not None and arg_val > best + config.profit_tol and arg != (p[t], q[t]):
                p[t], q[t] = arg
                contrib[t] = arg_c
                best = float(np.sum(contrib))
                moved = True
                for r in rows:
                    r.accepted = (r.p_es, r.q_es) == arg
            for r in rows:
                r.best_profit = best
            trace.extend(rows)
        if not moved:
            break
    schedule = StorageSchedule.from_net(p, q, unit)
    evaluation = clearing.evaluate(schedule, mode)
    return schedule, evaluation, trace


def exhaustive_search(case: NetworkCase, config, clearing: LowerLevelClearing, max_points: int = 5, max_horizon: int = 3):
    """Best schedule over the full grid product (small cases only)."""
    unit = case.storage
    cands = candidate_grid(unit, config.grid_points, config.q_grid_points)
    if config.grid_points > max_points or case.horizon > max_horizon:
        raise ValueError("grid too large for exhaustive enumeration")
    best, best_sched = -np.inf, None
    for combo in itertools.product(cands, repeat=case.horizon):
        sched = StorageSchedule.from_net([c[0] for c in combo], [c[1] for c in combo], unit)
        if storage_feasible(sched, unit):
            continue
        ev = clearing.evaluate(sched, config.profit_mode)
        if ev is not None and ev.profit > best:
            best, best_sched = ev.profit, sched
    return best_sched, best


# -------------------------------------------------------------- smoothing

def smoothed_complementarity(x, y, eps=0.0):
    """``x + y - sqrt(x^2 + y^2 + 2 eps^2)``; zero at eps=0 iff x, y >= 0 and x*y = 0."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    # hypot keeps tiny arguments from underflowing when squared
    r = np.hypot(np.hypot(x, y), math.sqrt(2.0) * eps)
    s = x + y
    # for s > 0 the direct difference cancels; (s^2 - r^2) / (s + r) does not.
    # The product x*y is formed as small * (large / den) so it cannot underflow to zero.
    big = np.where(np.abs(x) >= np.abs(y), x, y)
    small = np.where(np.abs(x) >= np.abs(y), y, x)
    with np.errstate(invalid="ignore", divide="ignore"):
        den = s + r
        stable = (2.0 * small) * (big / den) - (2.0 * eps) * (eps / den)
    return np.where(s > 0, stable, s - r)


def smoothed_complementarity_grad(x, y, eps):
    """Gradient with respect to ``(x, y)``; defined everywhere for eps > 0."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    r = np.hypot(np.hypot(x, y), math.sqrt(2.0) * eps)
    return 1.0 - x / r, 1.0 - y / r
