"""Exact-model verification of a storage schedule and the run report."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .bilevel import ProfitEvaluation, StorageSchedule, evaluate_profit
from .netcase import NetworkCase, build_index_sets
from .pfexact import BranchEnds, ExactSolution, solve_exact_polar_opf

SCHEMA_VERSION = "1.0"
TIMING_FIELDS = ("seconds",)
SCHEDULE_HEADER = ["t", "p_es", "q_es", "p_ch", "p_dis", "soe"]
PRICES_HEADER = ["t", "predicted_lmp_p", "predicted_lmp_q", "exact_lmp_p", "exact_lmp_q"]
FLOWS_HEADER = ["t", "branch", "from_bus", "to_bus", "p", "q", "loading"]


def load_schema() -> dict:
    text = resources.files("acbilevel").joinpath("schemas/run_report.schema.json").read_text()
    return json.loads(text)


def _rel(a: float, b: float) -> float | None:
    """``|a - b| / |b|``; None when ``b`` is zero and they differ."""
    d = abs(a - b)
    if d == 0:
        return 0.0
    return d / abs(b) if b != 0 else None


# ---------------------------------------------------------- verification

@dataclass
class VerificationRecord:
    exact: ExactSolution
    exact_cost: float
    exact_lmp_p: np.ndarray  # [T] at the storage bus
    exact_lmp_q: np.ndarray
    exact_profit: float
    predicted_cost: float | None
    predicted_profit: float | None
    cost_gap_rel: float | None
    profit_gap: float | None
    profit_gap_rel: float | None
    overload_mask: np.ndarray  # [T, 2*nbr] dropped limits that bind or are exceeded
    overloaded: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "exact_cost": self.exact_cost, "predicted_cost": self.predicted_cost,
            "cost_gap_rel": self.cost_gap_rel, "exact_profit": self.exact_profit,
            "predicted_profit": self.predicted_profit, "profit_gap": self.profit_gap,
            "profit_gap_rel": self.profit_gap_rel, "overloaded": list(self.overloaded),
        }


def verify_solution(case: NetworkCase, schedule, *, predicted: ProfitEvaluation | None = None,
                    predicted_flows=None, phi: np.ndarray | None = None, mode: str = "audited",
                    opf_tol: float = 1e-6, warm_start: ExactSolution | None = None,
                    bind_tol: float = 1e-6) -> VerificationRecord:
    """Re-solve the exact model with ``schedule`` fixed and compare.

    ``predicted_flows = (P, Q)`` from the convex model and ``phi`` (which
    limits the convex model kept) enable overload detection: a dropped limit
    is flagged when the exact re-solve binds on it or the convex flows
    exceed it.
    """
    if not isinstance(schedule, StorageSchedule):
        schedule = StorageSchedule.from_net(*schedule, case.storage)
    exact = solve_exact_polar_opf(case, (schedule.p_es, schedule.q_es), opf_tol=opf_tol, warm_start=warm_start)
    k = case.bus_position()[case.storage.bus]
    lmp_p, lmp_q = exact.price_p[:, k], exact.price_q[:, k]
    # prices are the negatives of the balance multipliers
    ex_profit = evaluate_profit(schedule, (-lmp_p, -lmp_q), mode).profit

    ends = BranchEnds.from_case(case)
    rated = ends.s_max > 0
    dropped = np.ones_like(exact.P, dtype=bool) if phi is None else ~np.asarray(phi, bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        load_ex = np.where(rated, np.hypot(exact.P, exact.Q) / np.where(rated, ends.s_max, 1.0), 0.0)
        over = load_ex >= 1.0 - bind_tol
        if predicted_flows is not None:
            P, Q = predicted_flows
            load_pr = np.where(rated, np.hypot(P, Q) / np.where(rated, ends.s_max, 1.0), 0.0)
            over |= load_pr > 1.0 + bind_tol
    mask = rated[None, :] & dropped & over
    idx = build_index_sets(case)
    names = [f"t={t} end={idx.E_all[e]}" for t, e in zip(*np.nonzero(mask))]

    pc = predicted.predicted_cost if predicted is not None else None
    pp = predicted.profit if predicted is not None else None
    return VerificationRecord(
        exact, exact.objective, lmp_p.copy(), lmp_q.copy(), ex_profit, pc, pp,
        None if pc is None else _rel(pc, exact.objective),
        None if pp is None else abs(pp - ex_profit),
        None if pp is None else _rel(pp, ex_profit),
        mask, names,
    )


# ---------------------------------------------------------------- report

@dataclass
class RunReport:
    case_name: str = ""
    horizon: int = 0
    schema_version: str = SCHEMA_VERSION
    config: dict = field(default_factory=dict)
    stages: list[dict] = field(default_factory=list)
    flags_census: dict = field(default_factory=dict)
    approximation: dict = field(default_factory=dict)
    profit: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    prices: dict = field(default_factory=dict)
    flows: list[dict] = field(default_factory=list)
    loop_trace: list[dict] = field(default_factory=list)
    search_trace: list[dict] = field(default_factory=list)
    converged: bool = False
    hook_triggered: bool = False
    failed_stage: str | None = None
    error: str | None = None

    def add_stages(self, records) -> None:
        for r in records:
            self.stages.append(_clean(r.to_dict() if hasattr(r, "to_dict") else dict(r)))

    def record_iteration(self, case: NetworkCase, iteration: int, pre, best: StorageSchedule,
                         predicted: ProfitEvaluation, ver: VerificationRecord) -> None:
        from .cpsota import evaluate_flow_error

        fe = evaluate_flow_error(pre.primal, case, pre.exact.op)
        self.approximation = _clean({
            "predicted_cost": ver.predicted_cost, "exact_cost": ver.exact_cost, "cost_gap_rel": ver.cost_gap_rel,
            "step1_cost": pre.exact.objective, "ll_primal_objective": pre.primal.objective,
            "ll_dual_objective": pre.dual.objective, "duality_gap": pre.gap,
            "flow_error": {"max_p": fe.max_p, "max_q": fe.max_q, "mean_p": fe.mean_p, "mean_q": fe.mean_q},
        })
        self.profit = _clean({
            "mode": predicted.mode, "market_predicted": predicted.profit, "exact_repriced": ver.exact_profit,
            "gap": ver.profit_gap, "rel_gap": ver.profit_gap_rel,
        })
        self.schedule = _clean(best.to_dict())
        self.prices = _clean({
            "predicted_lmp_p": (-predicted.lam1).tolist(), "predicted_lmp_q": (-predicted.lam2).tolist(),
            "exact_lmp_p": ver.exact_lmp_p.tolist(), "exact_lmp_q": ver.exact_lmp_q.tolist(),
        })
        self.flows = _flow_rows(ver.exact, BranchEnds.from_case(case).s_max)
        self.loop_trace.append(_clean({
            "iteration": iteration, "market_predicted_profit": predicted.profit,
            "exact_repriced_profit": ver.exact_profit, "exact_cost": ver.exact_cost,
            "p_es": best.p_es.tolist(), "q_es": best.q_es.tolist(), "overloaded": list(ver.overloaded),
            "schedule_change": None,
        }))

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False)

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        return cls(**{f.name: data[f.name] for f in fields(cls) if f.name in data})

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls.from_dict(json.loads(text))

    def validate(self) -> None:
        jsonschema.validate(json.loads(self.to_json()), load_schema())


def _flow_rows(exact: ExactSolution, s_max: np.ndarray) -> list[dict]:
    rows = []
    for t in range(exact.P.shape[0]):
        for e, (br, a, b) in enumerate(exact.flow_index):
            s = math.hypot(exact.P[t, e], exact.Q[t, e])
            rows.append({"t": t, "branch": int(br), "from_bus": int(a), "to_bus": int(b),
                         "p": float(exact.P[t, e]), "q": float(exact.Q[t, e]),
                         "loading": s / s_max[e] if s_max[e] > 0 else None})
    return rows


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def strip_timing(data):
    """Report dict without timing fields, for determinism comparisons."""
    if isinstance(data, dict):
        return {k: strip_timing(v) for k, v in data.items() if k not in TIMING_FIELDS}
    if isinstance(data, list):
        return [strip_timing(v) for v in data]
    return data


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def emit_report(report: RunReport, out_dir, ratings=None) -> dict[str, Path]:
    """Write ``report.json`` and CSV extracts (schedule, prices, flows, search trace)."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {k: out / f"{k}.{'json' if k == 'report' else 'csv'}"
                 for k in ("report", "schedule", "prices", "flows", "search_trace")}
        text = report.to_json()
        jsonschema.validate(json.loads(text), load_schema())
        paths["report"].write_text(text + "\n")
        s = report.schedule
        T = len(s.get("p_es", []))
        _write_csv(paths["schedule"], SCHEDULE_HEADER,
                   [[t] + [repr(float(s[k][t])) for k in SCHEDULE_HEADER[1:]] for t in range(T)])
        pr = report.prices
        Tp = len(pr.get("exact_lmp_p", []))
        _write_csv(paths["prices"], PRICES_HEADER,
                   [[t] + [_fmt(pr[k][t]) for k in PRICES_HEADER[1:]] for t in range(Tp)])
        _write_csv(paths["flows"], FLOWS_HEADER,
                   [[r["t"], r["branch"], r["from_bus"], r["to_bus"], repr(r["p"]), repr(r["q"]),
                     _fmt(r.get("loading"))] for r in report.flows])
        _write_csv(paths["search_trace"], ["sweep", "t", "p_es", "q_es", "profit", "accepted", "best_profit", "note"],
                   [[r["sweep"], r["t"], repr(r["p_es"]), repr(r["q_es"]), _fmt(r["profit"]), int(r["accepted"]),
                     _fmt(r["best_profit"]), r["note"]] for r in report.search_trace])
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc
    return paths


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))
