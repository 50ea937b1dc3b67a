"""Network case data: types, validation, index sets, and file I/O.

Two input formats are supported:

* ``native-json`` -- per-unit JSON mirroring the model nomenclature
  (see ``docs/case_format.md``).
* ``matpower-subset`` -- a Matpower version-2 ``.m`` file restricted to
  ``baseMVA``, ``bus``, ``gen``, ``branch`` and polynomial ``gencost``.

Load time series may be attached from a CSV file with columns
``load,t,p_d,q_d``.
"""
from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np


class CaseParseError(ValueError):
    """Malformed case file; the message carries the line or field location."""


class CaseValidationError(ValueError):
    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("invalid case:\n  " + "\n  ".join(self.violations))


@dataclass(frozen=True)
class Bus:
    id: int
    vmin: float
    vmax: float
    is_reference: bool = False


@dataclass(frozen=True)
class Branch:
    id: int
    from_bus: int
    to_bus: int
    g: float
    b: float
    g_fr: float = 0.0
    b_fr: float = 0.0
    g_to: float = 0.0
    b_to: float = 0.0
    tau: float = 1.0
    sigma: float = 0.0
    s_max: float = 0.0  # 0 means unrated


@dataclass(frozen=True)
class Generator:
    id: int
    bus: int
    c2: float
    c1: float
    c0: float
    pmin: float
    pmax: float
    qmin: float
    qmax: float


@dataclass(frozen=True)
class Load:
    id: int
    bus: int
    p_d: tuple[float, ...]
    q_d: tuple[float, ...]


@dataclass(frozen=True)
class Shunt:
    id: int
    bus: int
    g_sh: float
    b_sh: float


@dataclass(frozen=True)
class StorageUnit:
    bus: int
    soe_max: float
    s_max: float
    eta_ch: float = 1.0
    eta_dis: float = 1.0
    soe_init: float = 0.0


@dataclass(frozen=True)
class NetworkCase:
    name: str
    horizon: int
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    loads: tuple[Load, ...] = ()
    shunts: tuple[Shunt, ...] = ()
    storage: StorageUnit | None = None
    base_mva: float = 100.0

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    @property
    def reference_bus(self) -> int:
        refs = [b.id for b in self.buses if b.is_reference]
        if len(refs) != 1:
            raise CaseValidationError([f"expected one reference bus, found {refs}"])
        return refs[0]

    def bus_position(self) -> dict[int, int]:
        return {b.id: n for n, b in enumerate(self.buses)}

    def load_p(self, t: int) -> np.ndarray:
        """Total active load per bus (ordered like ``buses``) at step ``t``."""
        pos = self.bus_position()
        out = np.zeros(len(self.buses))
        for ld in self.loads:
            out[pos[ld.bus]] += ld.p_d[t]
        return out

    def load_q(self, t: int) -> np.ndarray:
        pos = self.bus_position()
        out = np.zeros(len(self.buses))
        for ld in self.loads:
            out[pos[ld.bus]] += ld.q_d[t]
        return out

    def shunt_g(self) -> np.ndarray:
        pos = self.bus_position()
        out = np.zeros(len(self.buses))
        for sh in self.shunts:
            out[pos[sh.bus]] += sh.g_sh
        return out

    def shunt_b(self) -> np.ndarray:
        pos = self.bus_position()
        out = np.zeros(len(self.buses))
        for sh in self.shunts:
            out[pos[sh.bus]] += sh.b_sh
        return out

    def with_storage(self, storage: StorageUnit | None) -> "NetworkCase":
        return replace(self, storage=storage)

    def truncated(self, horizon: int) -> "NetworkCase":
        """First ``horizon`` time steps of the case."""
        if not 1 <= horizon <= self.horizon:
            raise ValueError(f"horizon {horizon} outside 1..{self.horizon}")
        loads = tuple(replace(ld, p_d=ld.p_d[:horizon], q_d=ld.q_d[:horizon]) for ld in self.loads)
        return replace(self, horizon=horizon, loads=loads)


@dataclass(frozen=True)
class IndexSets:
    """Orientation-aware index sets.

    ``E`` holds forward tuples ``(e, i, j)`` with ``i`` the from-bus, ``E_rev`` the
    reversed tuples in the same order.  ``N_P`` lists the bus pairs of ``E``
    (parallel branches share one pair) and ``N_PR`` the reversed pairs.
    """

    E: tuple[tuple[int, int, int], ...]
    E_rev: tuple[tuple[int, int, int], ...]
    N_P: tuple[tuple[int, int], ...]
    N_PR: tuple[tuple[int, int], ...]
    G_i: dict[int, tuple[int, ...]] = field(default_factory=dict)
    L_i: dict[int, tuple[int, ...]] = field(default_factory=dict)
    S_i: dict[int, tuple[int, ...]] = field(default_factory=dict)

    @property
    def E_all(self) -> tuple[tuple[int, int, int], ...]:
        return self.E + self.E_rev


def build_index_sets(case: NetworkCase) -> IndexSets:
    branches = sorted(case.branches, key=lambda br: br.id)
    E = tuple((br.id, br.from_bus, br.to_bus) for br in branches)
    E_rev = tuple((e, j, i) for e, i, j in E)
    pairs: list[tuple[int, int]] = []
    for _, i, j in E:
        if (i, j) not in pairs:
            pairs.append((i, j))
    N_P = tuple(pairs)
    N_PR = tuple((j, i) for i, j in N_P)

    def group(items) -> dict[int, tuple[int, ...]]:
        out: dict[int, list[int]] = {b.id: [] for b in sorted(case.buses, key=lambda b: b.id)}
        for it in sorted(items, key=lambda x: x.id):
            out[it.bus].append(it.id)
        return {k: tuple(v) for k, v in out.items()}

    return IndexSets(
        E=E,
        E_rev=E_rev,
        N_P=N_P,
        N_PR=N_PR,
        G_i=group(case.generators),
        L_i=group(case.loads),
        S_i=group(case.shunts),
    )


def validate_case(case: NetworkCase) -> list[str]:
    """Return every violated invariant; an empty list means the case is valid."""
    out: list[str] = []
    ids = [b.id for b in case.buses]
    bus_set = set(ids)
    if len(bus_set) != len(ids):
        out.append("duplicate bus ids")
    if case.horizon < 1:
        out.append(f"horizon must be >= 1, got {case.horizon}")
    refs = [b.id for b in case.buses if b.is_reference]
    if len(refs) != 1:
        out.append(f"exactly one reference bus required, found {len(refs)}: {refs}")
    for b in case.buses:
        if not b.vmin > 0:
            out.append(f"bus {b.id}: vmin must be > 0 (got {b.vmin})")
        if b.vmin > b.vmax:
            out.append(f"bus {b.id}: vmin {b.vmin} > vmax {b.vmax}")

    br_ids = [br.id for br in case.branches]
    if len(set(br_ids)) != len(br_ids):
        out.append("duplicate branch ids")
    for br in case.branches:
        if not br.tau > 0:
            out.append(f"branch {br.id}: tau must be > 0 (got {br.tau})")
        if br.from_bus == br.to_bus:
            out.append(f"branch {br.id}: from_bus equals to_bus ({br.from_bus})")
        if br.s_max < 0:
            out.append(f"branch {br.id}: s_max must be >= 0 (got {br.s_max})")
        for end in (br.from_bus, br.to_bus):
            if end not in bus_set:
                out.append(f"branch {br.id}: unknown bus {end}")
        vals = [br.g, br.b, br.g_fr, br.b_fr, br.g_to, br.b_to, br.tau, br.sigma, br.s_max]
        if not all(math.isfinite(v) for v in vals):
            out.append(f"branch {br.id}: non-finite parameter")

    gen_ids = [g.id for g in case.generators]
    if len(set(gen_ids)) != len(gen_ids):
        out.append("duplicate generator ids")
    for g in case.generators:
        if g.bus not in bus_set:
            out.append(f"generator {g.id}: unknown bus {g.bus}")
        if g.c2 < 0:
            out.append(f"generator {g.id}: c2 = {g.c2} < 0 breaks cost convexity")
        if g.pmin > g.pmax:
            out.append(f"generator {g.id}: pmin {g.pmin} > pmax {g.pmax}")
        if g.qmin > g.qmax:
            out.append(f"generator {g.id}: qmin {g.qmin} > qmax {g.qmax}")
        if not all(math.isfinite(v) for v in (g.pmin, g.pmax, g.qmin, g.qmax)):
            out.append(f"generator {g.id}: power bounds must be finite")

    for ld in case.loads:
        if ld.bus not in bus_set:
            out.append(f"load {ld.id}: unknown bus {ld.bus}")
        if len(ld.p_d) != case.horizon or len(ld.q_d) != case.horizon:
            out.append(
                f"load {ld.id}: series length ({len(ld.p_d)}, {len(ld.q_d)}) != horizon {case.horizon}"
            )
    for sh in case.shunts:
        if sh.bus not in bus_set:
            out.append(f"shunt {sh.id}: unknown bus {sh.bus}")

    st = case.storage
    if st is not None:
        if st.bus not in bus_set:
            out.append(f"storage: unknown bus {st.bus}")
        if not 0 <= st.soe_init <= st.soe_max:
            out.append(f"storage: soe_init {st.soe_init} outside [0, {st.soe_max}]")
        if not 0 < st.eta_ch <= 1:
            out.append(f"storage: eta_ch {st.eta_ch} outside (0, 1]")
        if not 0 < st.eta_dis <= 1:
            out.append(f"storage: eta_dis {st.eta_dis} outside (0, 1]")
        if st.s_max < 0:
            out.append(f"storage: s_max {st.s_max} < 0")
    return out


def ensure_valid(case: NetworkCase) -> NetworkCase:
    problems = validate_case(case)
    if problems:
        raise CaseValidationError(problems)
    return case


# ---------------------------------------------------------------- native JSON

_BUS_FIELDS = ("id", "vmin", "vmax")
_BRANCH_FIELDS = ("id", "from_bus", "to_bus", "g", "b")
_GEN_FIELDS = ("id", "bus", "c2", "c1", "c0", "pmin", "pmax", "qmin", "qmax")


def _require(obj: dict, keys, where: str) -> None:
    if not isinstance(obj, dict):
        raise CaseParseError(f"{where}: expected an object")
    missing = [k for k in keys if k not in obj]
    if missing:
        raise CaseParseError(f"{where}: missing field(s) {', '.join(missing)}")


def _build(cls, obj: dict, where: str):
    names = set(cls.__dataclass_fields__)
    extra = set(obj) - names
    if extra:
        raise CaseParseError(f"{where}: unknown field(s) {', '.join(sorted(extra))}")
    try:
        return cls(**obj)
    except TypeError as exc:  # pragma: no cover - guarded by _require
        raise CaseParseError(f"{where}: {exc}") from None


def case_from_dict(data: dict) -> NetworkCase:
    _require(data, ("horizon", "buses", "branches", "generators"), "case")
    horizon = int(data["horizon"])
    buses = []
    for n, b in enumerate(data["buses"]):
        _require(b, _BUS_FIELDS, f"buses[{n}]")
        buses.append(_build(Bus, b, f"buses[{n}]"))
    branches = []
    for n, br in enumerate(data["branches"]):
        _require(br, _BRANCH_FIELDS, f"branches[{n}]")
        branches.append(_build(Branch, br, f"branches[{n}]"))
    gens = []
    for n, g in enumerate(data["generators"]):
        _require(g, _GEN_FIELDS, f"generators[{n}]")
        gens.append(_build(Generator, g, f"generators[{n}]"))
    loads = []
    for n, ld in enumerate(data.get("loads", [])):
        _require(ld, ("id", "bus", "p_d", "q_d"), f"loads[{n}]")
        ld = dict(ld, p_d=tuple(float(v) for v in ld["p_d"]), q_d=tuple(float(v) for v in ld["q_d"]))
        loads.append(_build(Load, ld, f"loads[{n}]"))
    shunts = []
    for n, sh in enumerate(data.get("shunts", [])):
        _require(sh, ("id", "bus", "g_sh", "b_sh"), f"shunts[{n}]")
        shunts.append(_build(Shunt, sh, f"shunts[{n}]"))
    storage = None
    if data.get("storage") is not None:
        _require(data["storage"], ("bus", "soe_max", "s_max"), "storage")
        storage = _build(StorageUnit, data["storage"], "storage")
    return NetworkCase(
        name=str(data.get("name", "case")),
        horizon=horizon,
        buses=tuple(buses),
        branches=tuple(branches),
        generators=tuple(gens),
        loads=tuple(loads),
        shunts=tuple(shunts),
        storage=storage,
        base_mva=float(data.get("base_mva", 100.0)),
    )


def case_to_dict(case: NetworkCase) -> dict:
    out = {
        "name": case.name,
        "base_mva": case.base_mva,
        "horizon": case.horizon,
        "buses": [asdict(b) for b in case.buses],
        "branches": [asdict(b) for b in case.branches],
        "generators": [asdict(g) for g in case.generators],
        "loads": [dict(asdict(ld), p_d=list(ld.p_d), q_d=list(ld.q_d)) for ld in case.loads],
        "shunts": [asdict(s) for s in case.shunts],
        "storage": asdict(case.storage) if case.storage is not None else None,
    }
    return out


def serialize_case(case: NetworkCase) -> str:
    return json.dumps(case_to_dict(case), indent=2)


# ----------------------------------------------------------- Matpower subset

_MATRIX_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\]\s*;", re.S)
_SCALAR_RE = re.compile(r"mpc\.(\w+)\s*=\s*([^\[\n;]+);")


def _strip_comments(text: str) -> str:
    return "\n".join(line.split("%", 1)[0] for line in text.splitlines())


def _parse_matrix(body: str, name: str, first_line: int) -> list[list[float]]:
    rows = []
    for k, raw in enumerate(body.replace(";", "\n").splitlines()):
        raw = raw.strip()
        if not raw:
            continue
        try:
            rows.append([float(tok) for tok in raw.split()])
        except ValueError:
            raise CaseParseError(f"mpc.{name}, near line {first_line + k}: bad number in '{raw}'") from None
    return rows


def parse_matpower(text: str, name: str = "case") -> NetworkCase:
    clean = _strip_comments(text)
    matrices = {}
    for m in _MATRIX_RE.finditer(clean):
        line = clean.count("\n", 0, m.start()) + 1
        matrices[m.group(1)] = _parse_matrix(m.group(2), m.group(1), line)
    scalars = {m.group(1): m.group(2).strip() for m in _SCALAR_RE.finditer(clean)}
    for key in ("bus", "gen", "branch"):
        if key not in matrices:
            raise CaseParseError(f"mpc.{key} matrix not found")
    try:
        base = float(scalars.get("baseMVA", "100"))
    except ValueError:
        raise CaseParseError(f"mpc.baseMVA: bad value {scalars['baseMVA']!r}") from None

    def need(rows, ncol, key):
        for n, r in enumerate(rows):
            if len(r) < ncol:
                raise CaseParseError(f"mpc.{key} row {n + 1}: expected >= {ncol} columns, got {len(r)}")

    need(matrices["bus"], 13, "bus")
    need(matrices["gen"], 10, "gen")
    need(matrices["branch"], 11, "branch")

    buses, loads, shunts = [], [], []
    for r in matrices["bus"]:
        bid = int(r[0])
        buses.append(Bus(id=bid, vmin=r[12], vmax=r[11], is_reference=int(r[1]) == 3))
        if r[2] or r[3]:
            loads.append(Load(id=bid, bus=bid, p_d=(r[2] / base,), q_d=(r[3] / base,)))
        if r[4] or r[5]:
            shunts.append(Shunt(id=bid, bus=bid, g_sh=r[4] / base, b_sh=r[5] / base))

    costs = matrices.get("gencost", [])
    gens = []
    kept = 0
    for n, r in enumerate(matrices["gen"]):
        if int(r[7]) <= 0:
            continue
        c2 = c1 = c0 = 0.0
        if n < len(costs):
            cr = costs[n]
            if int(cr[0]) != 2:
                raise CaseParseError(f"mpc.gencost row {n + 1}: only polynomial model 2 is supported")
            ncoef = int(cr[3])
            coef = list(cr[4 : 4 + ncoef])
            if len(coef) != ncoef or ncoef > 3:
                raise CaseParseError(f"mpc.gencost row {n + 1}: expected <= 3 coefficients")
            coef = [0.0] * (3 - ncoef) + coef
            c2, c1, c0 = coef[0] * base**2, coef[1] * base, coef[2]
        kept += 1
        gens.append(
            Generator(
                id=kept, bus=int(r[0]), c2=c2, c1=c1, c0=c0,
                pmin=r[9] / base, pmax=r[8] / base, qmin=r[4] / base, qmax=r[3] / base,
            )
        )

    branches = []
    kept = 0
    for n, r in enumerate(matrices["branch"]):
        if int(r[10]) <= 0:
            continue
        rr, xx, bc = r[2], r[3], r[4]
        z2 = rr * rr + xx * xx
        if z2 == 0:
            raise CaseParseError(f"mpc.branch row {n + 1}: zero impedance")
        kept += 1
        branches.append(
            Branch(
                id=kept, from_bus=int(r[0]), to_bus=int(r[1]),
                g=rr / z2, b=-xx / z2,
                g_fr=0.0, b_fr=bc / 2, g_to=0.0, b_to=bc / 2,
                tau=r[8] if r[8] != 0 else 1.0,
                sigma=math.radians(r[9]),
                s_max=r[5] / base,
            )
        )
    return NetworkCase(
        name=name, horizon=1, buses=tuple(buses), branches=tuple(branches),
        generators=tuple(gens), loads=tuple(loads), shunts=tuple(shunts), base_mva=base,
    )


def attach_load_series(case: NetworkCase, path: str | Path) -> NetworkCase:
    """Replace load series from a CSV with columns ``load,t,p_d,q_d`` (per unit, t from 0)."""
    series: dict[int, dict[int, tuple[float, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"load", "t", "p_d", "q_d"} - set(reader.fieldnames or [])
        if missing:
            raise CaseParseError(f"{path}: missing column(s) {', '.join(sorted(missing))}")
        for lineno, row in enumerate(reader, start=2):
            try:
                lid, t = int(row["load"]), int(row["t"])
                series.setdefault(lid, {})[t] = (float(row["p_d"]), float(row["q_d"]))
            except ValueError:
                raise CaseParseError(f"{path}, line {lineno}: bad value in {row}") from None
    known = {ld.id: ld for ld in case.loads}
    unknown = set(series) - set(known)
    if unknown:
        raise CaseParseError(f"{path}: unknown load id(s) {sorted(unknown)}")
    horizon = 1 + max((t for s in series.values() for t in s), default=case.horizon - 1)
    loads = []
    for ld in case.loads:
        if ld.id in series:
            s = series[ld.id]
            if sorted(s) != list(range(horizon)):
                raise CaseParseError(f"{path}: load {ld.id} does not cover t = 0..{horizon - 1}")
            loads.append(replace(ld, p_d=tuple(s[t][0] for t in range(horizon)), q_d=tuple(s[t][1] for t in range(horizon))))
        else:
            loads.append(replace(ld, p_d=(ld.p_d[0],) * horizon, q_d=(ld.q_d[0],) * horizon))
    return replace(case, horizon=horizon, loads=tuple(loads))


def load_case(path: str | Path, format: str | None = None, *, validate: bool = True) -> NetworkCase:
    """Read a case file.

    ``format`` is ``"native-json"`` or ``"matpower-subset"``; when omitted it is
    inferred from the suffix (``.json`` / ``.m``).
    """
    path = Path(path)
    if format is None:
        format = "matpower-subset" if path.suffix == ".m" else "native-json"
    text = path.read_text()
    if format == "native-json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CaseParseError(f"{path}, line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        case = case_from_dict(data)
    elif format == "matpower-subset":
        case = parse_matpower(text, name=path.stem)
    else:
        raise ValueError(f"unknown case format {format!r}")
    return ensure_valid(case) if validate else case
