"""Command-line entry point.

``--case`` takes a case file (``.json`` native or ``.m`` Matpower subset) or
the name of a built-in fixture.  Exit status: 0 on success, 1 when a stage
fails (a partial report is still written), 2 on bad input.
"""
from __future__ import annotations

import argparse
import csv
import inspect
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import fixtures
from .netcase import (
    CaseParseError,
    CaseValidationError,
    NetworkCase,
    StorageUnit,
    attach_load_series,
    ensure_valid,
    load_case,
    serialize_case,
)

log = logging.getLogger("acbilevel")


class InputError(ValueError):
    pass


# ------------------------------------------------------------------ inputs

def parse_storage(text: str) -> StorageUnit:
    """``bus=3,soe_max=1,s_max=0.5[,eta_ch=..,eta_dis=..,soe_init=..]`` or a JSON file."""
    path = Path(text)
    if path.suffix == ".json" and path.exists():
        data = json.loads(path.read_text())
    else:
        data = {}
        for part in filter(None, text.split(",")):
            if "=" not in part:
                raise InputError(f"--storage item {part!r} is not key=value")
            k, v = part.split("=", 1)
            data[k.strip()] = v.strip()
    known = {"bus", "soe_max", "s_max", "eta_ch", "eta_dis", "soe_init"}
    unknown = set(data) - known
    if unknown:
        raise InputError(f"unknown storage field(s) {sorted(unknown)}")
    try:
        return StorageUnit(bus=int(data["bus"]), **{k: float(v) for k, v in data.items() if k != "bus"})
    except KeyError as exc:
        raise InputError(f"--storage lacks {exc.args[0]!r}") from None
    except TypeError:
        raise InputError("--storage needs bus, soe_max and s_max") from None
    except ValueError as exc:
        raise InputError(f"bad storage value: {exc}") from None


def resolve_case(args) -> NetworkCase:
    name = args.case
    if name in fixtures.FIXTURES:
        maker = fixtures.FIXTURES[name]
        if args.horizon and "horizon" in inspect.signature(maker).parameters:
            case = maker(horizon=args.horizon)
        else:
            case = maker()
    else:
        if not Path(name).exists():
            raise InputError(f"{name}: no such file or fixture (fixtures: {', '.join(sorted(fixtures.FIXTURES))})")
        case = load_case(name)
    if getattr(args, "loads", None):
        case = attach_load_series(case, args.loads)
    if args.horizon and args.horizon != case.horizon:
        if args.horizon > case.horizon:
            raise InputError(f"case has {case.horizon} step(s); supply --loads to extend it to {args.horizon}")
        case = case.truncated(args.horizon)
    if args.storage:
        case = case.with_storage(parse_storage(args.storage))
    return ensure_valid(case)


def read_schedule(path, horizon: int):
    """CSV with columns ``t,p_es[,q_es]``; missing steps are passive."""
    p, q = np.zeros(horizon), np.zeros(horizon)
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            try:
                t = int(row["t"])
                p[t] = float(row["p_es"])
                q[t] = float(row.get("q_es") or 0.0)
            except (KeyError, ValueError, IndexError):
                raise InputError(f"{path}, line {lineno}: bad schedule row {row}") from None
    return p, q


def make_config(args):
    from .presolve import AlgorithmConfig

    kw = {"seed": args.seed}
    if args.phi_threshold is not None:
        kw["phi_threshold"] = args.phi_threshold
    if args.grid_points is not None:
        kw["grid_points"] = args.grid_points
    if args.tol is not None:
        kw["solver_tol"] = args.tol
    if args.loop_max is not None:
        kw["loop_max"] = args.loop_max
    try:
        return AlgorithmConfig(**kw)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(path: Path, data) -> None:
    from .report import _clean

    path.write_text(json.dumps(_clean(data), indent=2, sort_keys=True) + "\n")


def _write_flags(out: Path, pre) -> None:
    for fam in ("lam", "gam", "phi"):
        arr = getattr(pre.flags, fam).astype(int)
        with (out / f"flags_{fam}.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"c{k}" for k in range(arr.shape[1])])
            for t, row in enumerate(arr):
                w.writerow([t] + row.tolist())


# -------------------------------------------------------------- commands

def cmd_import(args) -> int:
    case = resolve_case(args)
    out = _out(args)
    (out / "case.json").write_text(serialize_case(case) + "\n")
    print(f"{case.name}: {len(case.buses)} buses, {len(case.branches)} branches, "
          f"{len(case.generators)} generators, horizon {case.horizon}, "
          f"storage {'at bus ' + str(case.storage.bus) if case.storage else 'none'}")
    return 0


def cmd_presolve(args) -> int:
    from .presolve import run_presolve

    case, cfg = resolve_case(args), make_config(args)
    pre = run_presolve(case, cfg)
    out = _out(args)
    _write_flags(out, pre)
    _dump(out / "presolve.json", {
        "stages": [s.to_dict() for s in pre.stages], "flags_census": pre.flags.census(),
        "voltage_marginals": pre.marginals.voltage, "cosine_marginals": pre.marginals.cosine,
        "duality_gap": pre.gap,
    })
    print(f"flags {pre.flags.census()}, duality gap {pre.gap:.3e}")
    return 0


def cmd_clear(args) -> int:
    from .presolve import run_presolve

    case, cfg = resolve_case(args), make_config(args)
    sched = read_schedule(args.schedule, case.horizon) if args.schedule else None
    pre = run_presolve(case, cfg, sched)
    out = _out(args)
    _dump(out / "clear.json", {
        "primal_objective": pre.primal.objective, "dual_objective": pre.dual.objective, "duality_gap": pre.gap,
        "lmp_p": pre.dual.lmp_p, "lmp_q": pre.dual.lmp_q, "bus_ids": case.bus_ids, "Pg": pre.primal.Pg,
    })
    with (out / "prices.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "bus", "lmp_p", "lmp_q"])
        for t in range(case.horizon):
            for k, b in enumerate(case.bus_ids):
                w.writerow([t, b, repr(float(pre.dual.lmp_p[t, k])), repr(float(pre.dual.lmp_q[t, k]))])
    print(f"primal {pre.primal.objective:.10g}, dual {pre.dual.objective:.10g}, gap {pre.gap:.3e}")
    return 0


def _need_storage(case):
    if case.storage is None:
        raise InputError("this command needs a storage unit (--storage)")


def cmd_bilevel(args) -> int:
    from .bilevel import discretized_bilevel_search, write_trace_csv
    from .presolve import run_presolve

    case, cfg = resolve_case(args), make_config(args)
    _need_storage(case)
    pre = run_presolve(case, cfg)
    best, ev, trace = discretized_bilevel_search(case, cfg, pre)
    out = _out(args)
    write_trace_csv(trace, out / "search_trace.csv")
    _write_schedule(out / "schedule.csv", best)
    _dump(out / "bilevel.json", ev.to_dict())
    print(f"profit {ev.profit:.10g} ({ev.mode}), p_es {np.round(best.p_es, 6).tolist()}")
    return 0


def _write_schedule(path, s) -> None:
    from .report import SCHEDULE_HEADER

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCHEDULE_HEADER)
        for t in range(s.horizon):
            w.writerow([t] + [repr(float(getattr(s, k)[t])) for k in SCHEDULE_HEADER[1:]])


def cmd_verify(args) -> int:
    from .bilevel import StorageSchedule
    from .report import verify_solution

    case, cfg = resolve_case(args), make_config(args)
    _need_storage(case)
    p, q = read_schedule(args.schedule, case.horizon) if args.schedule else (np.zeros(case.horizon),) * 2
    ver = verify_solution(case, StorageSchedule.from_net(p, q, case.storage), mode=cfg.profit_mode,
                          opf_tol=cfg.opf_tol)
    out = _out(args)
    _dump(out / "verify.json", dict(ver.to_dict(), exact_lmp_p=ver.exact_lmp_p, exact_lmp_q=ver.exact_lmp_q))
    print(f"exact cost {ver.exact_cost:.10g}, exact-repriced profit {ver.exact_profit:.10g}")
    return 0


def cmd_pipeline(args) -> int:
    from .presolve import run_algorithm1
    from .report import emit_report

    case, cfg = resolve_case(args), make_config(args)
    _need_storage(case)
    report = run_algorithm1(case, cfg)
    paths = emit_report(report, _out(args))
    if report.failed_stage:
        print(f"stage {report.failed_stage} failed: {report.error}; partial report at {paths['report']}",
              file=sys.stderr)
        return 1
    pr = report.profit
    print(f"profit: market-predicted {pr['market_predicted']:.10g}, exact-repriced {pr['exact_repriced']:.10g}; "
          f"report at {paths['report']}")
    return 0


COMMANDS = {
    "import": (cmd_import, "read, validate and normalize a case"),
    "presolve": (cmd_presolve, "operating point, flags and warm starts"),
    "clear": (cmd_clear, "single lower-level primal and dual clearing"),
    "bilevel": (cmd_bilevel, "discretized storage schedule search"),
    "verify": (cmd_verify, "exact re-solve with a fixed schedule"),
    "pipeline": (cmd_pipeline, "all stages with report output"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--case", required=True, help="case file or fixture name")
    common.add_argument("--storage", help="bus=..,soe_max=..,s_max=..[,eta_ch,eta_dis,soe_init] or JSON file")
    common.add_argument("--horizon", type=int, help="number of time steps")
    common.add_argument("--loads", help="load series CSV (load,t,p_d,q_d)")
    common.add_argument("--schedule", help="schedule CSV (t,p_es[,q_es]) for clear/verify")
    common.add_argument("--phi-threshold", type=float)
    common.add_argument("--grid-points", type=int)
    common.add_argument("--tol", type=float, help="conic solver tolerance")
    common.add_argument("--loop-max", type=int)
    common.add_argument("--out-dir", default="out")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="acbilevel", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.random.seed(args.seed)
    try:
        return COMMANDS[args.command][0](args)
    except (InputError, CaseParseError, CaseValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
