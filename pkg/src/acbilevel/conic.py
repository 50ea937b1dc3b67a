"""Primal-dual interior-point solver for convex QPs with second-order cones.

Programs have the form::

    minimize    1/2 x'Hx + c'x + c0
    subject to  A x = b
                lb <= x <= ub
                (head_k, tail_k) in SOC   for every cone block k

where ``H = diag(q_diag) + sum_r w_r v_r v_r'`` and a cone block is
``||x[tail]|| <= x[head]`` (or ``<= head_const`` when the head is a constant).
Maximization programs are accepted and solved as ``minimize -f``.

Multiplier conventions (used by :class:`SolveResult` and :func:`check_kkt`)
follow the Lagrangian::

    L = f + y'(Ax - b) + zl'(lb - x) + zu'(x - ub) - sum_k <zc_k, (head_k, tail_k)>

so ``zl, zu >= 0``, every ``zc_k`` lies in the (self-dual) cone and the
sensitivity of the optimal value to ``b`` is ``-y``.

The iteration is a Mehrotra predictor-corrector with Nesterov-Todd scaling on
the standard form ``Gx + s = h, s in K``.  Each Newton system is the full
quasi-definite matrix ``[[H, A', G'], [A, 0, 0], [G, 0, -W'W]]``, regularized
on the diagonal and factorized with a sparse LU, followed by iterative
refinement against the unregularized matrix.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import structural_rank


@dataclass(frozen=True)
class SOCBlock:
    head: int | None
    tail: tuple[int, ...]
    head_const: float = 0.0
    name: str = ""

    @property
    def size(self) -> int:
        return 1 + len(self.tail)


@dataclass
class LowRankTerm:
    """Objective term ``1/2 * weight * (v'x)^2`` with sparse ``v``."""

    idx: np.ndarray
    val: np.ndarray
    weight: float


@dataclass
class ConicProgram:
    names: list[str]
    lb: np.ndarray
    ub: np.ndarray
    c: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray
    q_diag: np.ndarray | None = None
    low_rank: list[LowRankTerm] = field(default_factory=list)
    c0: float = 0.0
    socs: list[SOCBlock] = field(default_factory=list)
    row_names: list[str] = field(default_factory=list)
    sense: str = "min"

    @property
    def n(self) -> int:
        return len(self.names)

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def index(self) -> dict[str, int]:
        return {nm: k for k, nm in enumerate(self.names)}

    def hessian(self) -> sp.csr_matrix:
        n = self.n
        H = sp.diags(self.q_diag if self.q_diag is not None else np.zeros(n), format="csr")
        for term in self.low_rank:
            v = sp.csr_matrix((term.val, (np.zeros(len(term.idx), dtype=int), term.idx)), shape=(1, n))
            H = H + term.weight * (v.T @ v)
        return sp.csr_matrix(H)

    def objective(self, x: np.ndarray) -> float:
        val = float(self.c @ x) + self.c0
        if self.q_diag is not None:
            val += 0.5 * float(self.q_diag @ (x * x))
        for term in self.low_rank:
            val += 0.5 * term.weight * float(term.val @ x[term.idx]) ** 2
        return val

    def gradient(self, x: np.ndarray) -> np.ndarray:
        g = self.c.astype(float).copy()
        if self.q_diag is not None:
            g += self.q_diag * x
        for term in self.low_rank:
            g[term.idx] += term.weight * float(term.val @ x[term.idx]) * term.val
        return g

    def validate(self) -> list[str]:
        out = []
        n = self.n
        sign = 1.0 if self.sense == "min" else -1.0
        if self.sense not in ("min", "max"):
            out.append(f"unknown sense {self.sense!r}")
        if self.q_diag is not None and np.any(sign * self.q_diag < 0):
            out.append("quadratic term is not convex (diagonal entries of wrong sign)")
        for term in self.low_rank:
            if sign * term.weight < 0:
                out.append("quadratic low-rank term is not convex")
        if np.any(self.lb > self.ub):
            out.append("lb > ub for some variables")
        heads = {}
        in_cone = set()
        for k, blk in enumerate(self.socs):
            if blk.head is not None:
                if blk.head in heads:
                    out.append(f"variable {self.names[blk.head]} heads cones {heads[blk.head]} and {k}")
                heads[blk.head] = k
            members = ([blk.head] if blk.head is not None else []) + list(blk.tail)
            for j in members:
                if not 0 <= j < n:
                    out.append(f"cone {k}: bad variable index {j}")
            if blk.head is None and blk.head_const < 0:
                out.append(f"cone {k}: negative constant head")
            in_cone.update(members)
        if self.A.shape[1] != n or len(self.b) != self.A.shape[0]:
            out.append("equality dimensions do not match")
        return out


class ProgramBuilder:
    """Incremental assembly of a :class:`ConicProgram` with named variables/rows."""

    def __init__(self) -> None:
        self.names: list[str] = []
        self._lb: list[float] = []
        self._ub: list[float] = []
        self._c: list[float] = []
        self._q: list[float] = []
        self.c0 = 0.0
        self._rows: list[dict[int, float]] = []
        self._rhs: list[float] = []
        self.row_names: list[str] = []
        self.socs: list[SOCBlock] = []
        self.low_rank: list[LowRankTerm] = []
        self._index: dict[str, int] = {}
        self._row_index: dict[str, int] = {}

    def var(self, name: str, lb: float = -np.inf, ub: float = np.inf, cost: float = 0.0, quad: float = 0.0) -> int:
        if name in self._index:
            raise KeyError(f"duplicate variable {name}")
        k = len(self.names)
        self.names.append(name)
        self._lb.append(lb)
        self._ub.append(ub)
        self._c.append(cost)
        self._q.append(quad)
        self._index[name] = k
        return k

    def add_cost(self, k: int, cost: float) -> None:
        self._c[k] += cost

    def eq(self, terms, rhs: float, name: str) -> int:
        row: dict[int, float] = {}
        items = terms.items() if isinstance(terms, dict) else terms
        for k, v in items:
            row[k] = row.get(k, 0.0) + v
        if name in self._row_index:
            raise KeyError(f"duplicate row {name}")
        self._row_index[name] = len(self._rows)
        self._rows.append(row)
        self._rhs.append(rhs)
        self.row_names.append(name)
        return len(self._rows) - 1

    def soc(self, head: int | None, tail, head_const: float = 0.0, name: str = "") -> int:
        self.socs.append(SOCBlock(head=head, tail=tuple(tail), head_const=head_const, name=name))
        return len(self.socs) - 1

    def lowrank(self, terms: dict[int, float], weight: float) -> None:
        idx = np.fromiter(terms.keys(), dtype=int)
        val = np.fromiter(terms.values(), dtype=float)
        self.low_rank.append(LowRankTerm(idx, val, weight))

    def index(self, name: str) -> int:
        return self._index[name]

    def row(self, name: str) -> int:
        return self._row_index[name]

    def build(self, sense: str = "min") -> ConicProgram:
        n = len(self.names)
        r, cidx, v = [], [], []
        for i, row in enumerate(self._rows):
            for k, val in row.items():
                if val != 0.0:
                    r.append(i)
                    cidx.append(k)
                    v.append(val)
        A = sp.csr_matrix((v, (r, cidx)), shape=(len(self._rows), n))
        q = np.asarray(self._q, float)
        return ConicProgram(
            names=list(self.names),
            lb=np.asarray(self._lb, float),
            ub=np.asarray(self._ub, float),
            c=np.asarray(self._c, float),
            A=A,
            b=np.asarray(self._rhs, float),
            q_diag=q if np.any(q) else None,
            low_rank=list(self.low_rank),
            c0=self.c0,
            socs=list(self.socs),
            row_names=list(self.row_names),
            sense=sense,
        )


def stack_programs(programs: list[ConicProgram], prefixes: list[str] | None = None) -> ConicProgram:
    """Block-diagonal concatenation (used to form the full-horizon program)."""
    if not programs:
        raise ValueError("nothing to stack")
    sense = programs[0].sense
    if any(p.sense != sense for p in programs):
        raise ValueError("cannot stack programs of different sense")
    prefixes = prefixes or [""] * len(programs)
    names, rows, lr, socs = [], [], [], []
    off = 0
    for p, pre in zip(programs, prefixes):
        names += [pre + nm for nm in p.names]
        rows += [pre + nm for nm in p.row_names]
        lr += [LowRankTerm(t.idx + off, t.val, t.weight) for t in p.low_rank]
        socs += [
            SOCBlock(None if s.head is None else s.head + off, tuple(j + off for j in s.tail), s.head_const, pre + s.name)
            for s in p.socs
        ]
        off += p.n
    q = [p.q_diag if p.q_diag is not None else np.zeros(p.n) for p in programs]
    qd = np.concatenate(q)
    return ConicProgram(
        names=names,
        lb=np.concatenate([p.lb for p in programs]),
        ub=np.concatenate([p.ub for p in programs]),
        c=np.concatenate([p.c for p in programs]),
        A=sp.block_diag([p.A for p in programs], format="csr"),
        b=np.concatenate([p.b for p in programs]),
        q_diag=qd if np.any(qd) else None,
        low_rank=lr,
        c0=sum(p.c0 for p in programs),
        socs=socs,
        row_names=rows,
        sense=sense,
    )


# ------------------------------------------------------------------ results


@dataclass
class SolveResult:
    status: str  # optimal | infeasible | max_iter
    x: np.ndarray
    y: np.ndarray
    z_lower: np.ndarray
    z_upper: np.ndarray
    z_cones: list[np.ndarray]
    objective: float
    iterations: int
    residuals: dict[str, float]
    certificate: str | None = None  # "primal" / "dual" when infeasible
    message: str = ""
    tol_iterations: int | None = None  # iteration at which ``tol`` was first met

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"

    def value(self, program: ConicProgram, name: str) -> float:
        return float(self.x[program.index()[name]])


# ------------------------------------------------------------- cone algebra


class _Cones:
    """Nonnegative orthant of size ``ml`` followed by second-order cones."""

    def __init__(self, ml: int, soc_sizes: list[int]):
        self.ml = ml
        self.sizes = soc_sizes
        self.m = ml + sum(soc_sizes)
        self.degree = ml + len(soc_sizes)
        offs = np.cumsum([ml] + soc_sizes)[:-1]
        groups: dict[int, list[int]] = {}
        for off, k in zip(offs, soc_sizes):
            groups.setdefault(k, []).append(off)
        self.groups = {k: np.asarray(o)[:, None] + np.arange(k)[None, :] for k, o in groups.items()}
        self.offsets = offs
        self.e = np.zeros(self.m)
        self.e[:ml] = 1.0
        for idx in self.groups.values():
            self.e[idx[:, 0]] = 1.0

    def min_eig(self, u: np.ndarray) -> float:
        vals = [np.min(u[: self.ml])] if self.ml else []
        for idx in self.groups.values():
            blk = u[idx]
            vals.append(np.min(blk[:, 0] - np.linalg.norm(blk[:, 1:], axis=1)))
        return float(min(vals)) if vals else np.inf

    def prod(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        out = np.empty_like(u)
        out[: self.ml] = u[: self.ml] * v[: self.ml]
        for idx in self.groups.values():
            U, V = u[idx], v[idx]
            res = np.empty_like(U)
            res[:, 0] = np.sum(U * V, axis=1)
            res[:, 1:] = U[:, :1] * V[:, 1:] + V[:, :1] * U[:, 1:]
            out[idx] = res
        return out

    def inv_prod(self, lam: np.ndarray, r: np.ndarray) -> np.ndarray:
        """Solve ``lam o x = r`` for ``x``."""
        out = np.empty_like(r)
        out[: self.ml] = r[: self.ml] / lam[: self.ml]
        for idx in self.groups.values():
            L, R = lam[idx], r[idx]
            det = _jdet(L)
            x0 = (L[:, 0] * R[:, 0] - np.sum(L[:, 1:] * R[:, 1:], axis=1)) / det
            res = np.empty_like(R)
            res[:, 0] = x0
            res[:, 1:] = (R[:, 1:] - x0[:, None] * L[:, 1:]) / L[:, :1]
            out[idx] = res
        return out

    def max_step(self, u: np.ndarray, du: np.ndarray) -> float:
        """Largest ``a >= 0`` with ``u + a du`` in the cone (``u`` interior)."""
        amax = np.inf
        if self.ml:
            neg = du[: self.ml] < 0
            if np.any(neg):
                amax = min(amax, float(np.min(-u[: self.ml][neg] / du[: self.ml][neg])))
        for idx in self.groups.values():
            U, D = u[idx], du[idx]
            a = D[:, 0] ** 2 - np.sum(D[:, 1:] ** 2, axis=1)
            bq = U[:, 0] * D[:, 0] - np.sum(U[:, 1:] * D[:, 1:], axis=1)
            c = _jdet(U)
            for ak, bk, ck, d0, u0 in zip(a, bq, c, D[:, 0], U[:, 0]):
                amax = min(amax, _soc_root(ak, bk, ck, d0, u0))
        return amax


def _jdet(U: np.ndarray) -> np.ndarray:
    # x0^2 - ||x1||^2 without cancellation
    nrm = np.linalg.norm(U[:, 1:], axis=1)
    return (U[:, 0] - nrm) * (U[:, 0] + nrm)


def _soc_root(a: float, b: float, c: float, d0: float, u0: float) -> float:
    # smallest positive root of c + 2 b t + a t^2 (c > 0), also bounded by u0 + t d0 >= 0
    best = np.inf
    if d0 < 0:
        best = -u0 / d0
    if abs(a) < 1e-300:
        if b < 0:
            best = min(best, -c / (2 * b))
        return best
    disc = b * b - a * c
    if disc < 0:
        return best
    sq = math.sqrt(disc)
    # numerically stable roots
    q = -(b + math.copysign(sq, b))
    roots = [q / a, c / q] if q != 0 else [-b / a]
    pos = [r for r in roots if r > 0]
    if pos:
        best = min(best, min(pos))
    return best


def _nt_blocks(S: np.ndarray, Z: np.ndarray):
    """NT scaling matrices ``(W, W^-1)`` for a group of equal-size cone blocks."""
    nb, k = S.shape
    aa = np.sqrt(_jdet(S))
    bb = np.sqrt(_jdet(Z))
    beta = np.sqrt(aa / bb)
    Sb, Zb = S / aa[:, None], Z / bb[:, None]
    gam = np.sqrt((1.0 + np.sum(Sb * Zb, axis=1)) / 2.0)
    w = Sb.copy()
    w[:, 0] += Zb[:, 0]
    w[:, 1:] -= Zb[:, 1:]
    w /= (2.0 * gam)[:, None]
    w0, w1 = w[:, 0], w[:, 1:]
    Wb = np.zeros((nb, k, k))
    Wb[:, 0, 0] = w0
    Wb[:, 0, 1:] = w1
    Wb[:, 1:, 0] = w1
    Wb[:, 1:, 1:] = np.eye(k - 1)[None] + np.einsum("ni,nj->nij", w1, w1) / (1.0 + w0)[:, None, None]
    Jm = np.diag([1.0] + [-1.0] * (k - 1))
    return beta[:, None, None] * Wb, (1.0 / beta)[:, None, None] * (Jm[None] @ Wb @ Jm[None])


class _Scaling:
    """Nesterov-Todd scaling ``W`` with ``W z = W^-T s = lam``.

    After the first iteration the scaling is updated multiplicatively from the
    scaled iterates, which stays accurate when ``s`` and ``z`` approach the
    cone boundary.
    """

    def __init__(self, cones: _Cones, s: np.ndarray, z: np.ndarray):
        self.cones = cones
        ml = cones.ml
        self.d = np.sqrt(s[:ml] / z[:ml])
        self.blocks = {k: _nt_blocks(s[idx], z[idx]) for k, idx in cones.groups.items()}
        self.lam = self.apply(z)

    def update(self, st: np.ndarray, zt: np.ndarray) -> None:
        """Rescale given the new iterates in the current scaled coordinates."""
        ml = self.cones.ml
        self.d = self.d * np.sqrt(st[:ml] / zt[:ml])
        lam = np.empty_like(st)
        lam[:ml] = np.sqrt(st[:ml] * zt[:ml])
        for k, idx in self.cones.groups.items():
            W, Winv = self.blocks[k]
            Wt, Wtinv = _nt_blocks(st[idx], zt[idx])
            self.blocks[k] = (Wt @ W, Winv @ Wtinv)
            lam[idx] = np.einsum("nij,nj->ni", Wt, zt[idx])
        self.lam = lam

    def apply(self, u: np.ndarray, inverse: bool = False, trans: bool = False) -> np.ndarray:
        out = np.empty_like(u)
        ml = self.cones.ml
        out[:ml] = u[:ml] / self.d if inverse else u[:ml] * self.d
        for k, idx in self.cones.groups.items():
            W, Winv = self.blocks[k]
            M = Winv if inverse else W
            out[idx] = np.einsum("nji,nj->ni" if trans else "nij,nj->ni", M, u[idx])
        return out

    def wtw_data(self) -> np.ndarray:
        parts = [self.d**2]
        for k in self.cones.groups:
            W = self.blocks[k][0]
            parts.append((np.swapaxes(W, 1, 2) @ W).reshape(-1))
        return np.concatenate(parts)


@dataclass
class _StdForm:
    P: sp.csr_matrix
    q: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray
    G: sp.csr_matrix
    h: np.ndarray
    cones: _Cones
    lower_idx: np.ndarray
    upper_idx: np.ndarray
    sign: float
    d_rows: np.ndarray
    d_cols: np.ndarray
    soc_rows: list[np.ndarray]


def _standard_form(prog: ConicProgram) -> _StdForm:
    problems = prog.validate()
    if problems:
        raise ValueError("invalid conic program: " + "; ".join(problems))
    n = prog.n
    sign = 1.0 if prog.sense == "min" else -1.0
    P = sign * prog.hessian()
    q = sign * prog.c
    lower_idx = np.flatnonzero(np.isfinite(prog.lb))
    upper_idx = np.flatnonzero(np.isfinite(prog.ub))
    ml = len(lower_idx) + len(upper_idx)
    rows, cols, vals, h = [], [], [], []
    r = 0
    for j in lower_idx:
        rows.append(r)
        cols.append(j)
        vals.append(-1.0)
        h.append(-prog.lb[j])
        r += 1
    for j in upper_idx:
        rows.append(r)
        cols.append(j)
        vals.append(1.0)
        h.append(prog.ub[j])
        r += 1
    sizes = []
    soc_rows = []
    for blk in prog.socs:
        start = r
        if blk.head is None:
            h.append(blk.head_const)
        else:
            rows.append(r)
            cols.append(blk.head)
            vals.append(-1.0)
            h.append(0.0)
        r += 1
        for j in blk.tail:
            rows.append(r)
            cols.append(j)
            vals.append(-1.0)
            h.append(0.0)
            r += 1
        sizes.append(blk.size)
        soc_rows.append(np.arange(start, r))
    G = sp.csr_matrix((vals, (rows, cols)), shape=(r, n))
    cones = _Cones(ml, sizes)
    dr = [np.arange(ml)]
    dc = [np.arange(ml)]
    for k, idx in cones.groups.items():
        dr.append(np.repeat(idx, k, axis=1).reshape(-1))
        dc.append(np.tile(idx, (1, k)).reshape(-1))
    return _StdForm(
        P=sp.csr_matrix(P), q=q, A=sp.csr_matrix(prog.A), b=np.asarray(prog.b, float), G=G,
        h=np.asarray(h, float), cones=cones, lower_idx=lower_idx, upper_idx=upper_idx, sign=sign,
        d_rows=np.concatenate(dr), d_cols=np.concatenate(dc), soc_rows=soc_rows,
    )


class _Breakdown(RuntimeError):
    pass


class _KKTSolver:
    """Sparse LU of the regularized quasi-definite Newton matrix

    ``[[P, A', G'], [A, 0, 0], [G, 0, -W'W]]`` with iterative refinement
    against the unregularized matrix.
    """

    def __init__(self, sf: _StdForm, wtw: np.ndarray, reg: float):
        n, p, m = sf.P.shape[0], sf.A.shape[0], sf.G.shape[0]
        self.n, self.p, self.m = n, p, m
        H = sp.csr_matrix((wtw, (sf.d_rows, sf.d_cols)), shape=(m, m))
        self.K = sp.bmat([[sf.P, sf.A.T, sf.G.T], [sf.A, None, None], [sf.G, None, -H]], format="csc")
        diag = np.concatenate([np.full(n, reg), np.full(p, -reg), np.full(m, -reg)])
        Kreg = (self.K + sp.diags(diag)).tocsc()
        if not np.all(np.isfinite(Kreg.data)):
            raise _Breakdown("non-finite Newton matrix")
        try:
            self.lu = spla.splu(Kreg)
        except RuntimeError as exc:
            raise _Breakdown(str(exc)) from exc

    def _raw(self, rhs):
        return self.lu.solve(rhs)

    def solve(self, f1, f2, f3, refine: int = 5):
        rhs = np.concatenate([f1, f2, f3])
        sol = self._raw(rhs)
        tol = 1e-15 * max(1.0, np.max(np.abs(rhs), initial=0.0))
        for _ in range(refine):
            res = rhs - self.K @ sol
            if np.max(np.abs(res), initial=0.0) <= tol:
                break
            sol = sol + self._raw(res)
        n, p = self.n, self.p
        return sol[:n], sol[n : n + p], sol[n + p :]


@dataclass
class WarmStart:
    x: np.ndarray
    y: np.ndarray
    z_lower: np.ndarray
    z_upper: np.ndarray
    z_cones: list[np.ndarray]

    @classmethod
    def from_result(cls, res: SolveResult) -> "WarmStart":
        return cls(res.x.copy(), res.y.copy(), res.z_lower.copy(), res.z_upper.copy(), [z.copy() for z in res.z_cones])


def _shift_interior(cones: _Cones, u: np.ndarray) -> np.ndarray:
    # cold-start shift
    a = -cones.min_eig(u)
    if a >= -1e-8 * max(1.0, np.linalg.norm(u)):
        u = u + (1.0 + a) * cones.e
    return u


def _internal_z(sf: _StdForm, prog: ConicProgram, ws: WarmStart) -> np.ndarray:
    z = np.empty(sf.cones.m)
    nl = len(sf.lower_idx)
    z[:nl] = ws.z_lower[sf.lower_idx]
    z[nl : sf.cones.ml] = ws.z_upper[sf.upper_idx]
    for rows, zc in zip(sf.soc_rows, ws.z_cones):
        z[rows] = zc
    return z


def solve_conic(
    program: ConicProgram,
    warm_start: WarmStart | SolveResult | None = None,
    *,
    tol: float = 1e-8,
    max_iter: int = 200,
    reg: float = 1e-9,
    blend: float = 0.9999,
    margin: float = 1e-8,
    polish: bool = True,
    tight: float = 1e-11,
) -> SolveResult:
    """Solve ``program``; see the module docstring for conventions.

    Once the residuals are below ``tol`` the iteration continues towards
    ``tight`` as long as every step still improves them, and the best
    iterate is returned.

    With ``polish`` an optimal interior-point answer is refined by Newton's
    method on the KKT system of the identified active set; the refined point
    replaces it only if it is feasible, sign-consistent and has smaller KKT
    residuals.
    """
    sf = _standard_form(program)
    cones = sf.cones
    n, p, m = program.n, sf.A.shape[0], cones.m
    P, q, A, b, G, h = sf.P, sf.q, sf.A, sf.b, sf.G, sf.h

    if warm_start is not None:
        if isinstance(warm_start, SolveResult):
            warm_start = WarmStart.from_result(warm_start)
        if len(warm_start.x) != n or len(warm_start.y) != p or len(warm_start.z_cones) != len(program.socs):
            raise ValueError("warm start does not match the program dimensions")
        x = warm_start.x.astype(float).copy()
        y = warm_start.y.astype(float).copy()
        s = h - G @ x
        z = _internal_z(sf, program, warm_start)
        s = blend * s + (1.0 - blend) * cones.e
        z = blend * z + (1.0 - blend) * cones.e
        for u in (s, z):
            lo = cones.min_eig(u)
            if lo < margin:
                u += (margin - lo) * cones.e
    else:
        ident = [np.ones(cones.ml)] + [np.tile(np.eye(k).ravel(), len(idx)) for k, idx in cones.groups.items()]
        kkt = _KKTSolver(sf, np.concatenate(ident), reg)
        x, y, _ = kkt.solve(-q, b, h)
        s = h - G @ x
        z = -s.copy()
        s = _shift_interior(cones, s)
        z = _shift_interior(cones, z)

    resx0 = max(1.0, np.max(np.abs(q)) if n else 1.0)
    resy0 = max(1.0, np.max(np.abs(b)) if p else 1.0)
    resz0 = max(1.0, np.max(np.abs(h)) if m else 1.0)
    status, cert, message = "max_iter", None, ""
    it = 0
    resid = {}
    W = None
    best = None
    tol_it = None
    for it in range(max_iter + 1):
        Px = P @ x
        rx = Px + q + A.T @ y + G.T @ z
        ry = A @ x - b
        rz = G @ x + s - h
        gap = float(s @ z)
        pcost = 0.5 * float(x @ Px) + float(q @ x)
        pres = max(np.max(np.abs(ry)) / resy0 if p else 0.0, np.max(np.abs(rz)) / resz0 if m else 0.0)
        dres = np.max(np.abs(rx)) / resx0 if n else 0.0
        relgap = gap / max(1.0, abs(pcost))
        resid = {"primal": float(pres), "dual": float(dres), "gap": float(relgap)}
        merit = max(pres, dres, abs(relgap))
        improved = best is None or merit < best[0]
        if improved:
            best = (merit, it, x.copy(), y.copy(), s.copy(), z.copy(), dict(resid))
        if pres <= tol and dres <= tol and relgap <= tol:
            status = "optimal"
            tol_it = it if tol_it is None else tol_it
            if merit <= tight or not improved or m == 0:
                break
        # infeasibility certificates
        hz_by = float(h @ z + b @ y)
        if hz_by < 0 and status != "optimal":
            pinf = np.max(np.abs(A.T @ y + G.T @ z)) / (-hz_by) if n else 0.0
            if pinf <= tol:
                status, cert = "infeasible", "primal"
                break
        qx = float(q @ x)
        if qx < 0 and status != "optimal":
            dinf = max(
                np.max(np.abs(Px)) if n else 0.0,
                np.max(np.abs(A @ x)) if p else 0.0,
                np.max(np.abs(G @ x + s)) if m else 0.0,
            ) / (-qx)
            if dinf <= tol:
                status, cert = "infeasible", "dual"
                break
        if it == max_iter:
            break
        if m == 0:
            # equality-constrained QP: a single Newton step is exact
            kkt = _KKTSolver(sf, np.zeros(0), reg)
            dx, dy, _ = kkt.solve(-rx, -ry, np.zeros(0))
            x, y = x + dx, y + dy
            continue

        mu = gap / cones.degree
        try:
            x, y, s, z, W, alpha = _pd_step(sf, x, y, s, z, W, rx, ry, rz, mu, reg)
        except _Breakdown as exc:
            if status != "optimal":
                message = f"numerical breakdown: {exc}"
            break
        if alpha < 1e-12:
            if status != "optimal":
                message = "step length vanished"
            break

    if status in ("max_iter", "optimal") and best is not None:
        # fall back to the best iterate seen
        _, _, x, y, s, z, resid = best
        if max(resid["primal"], resid["dual"], resid["gap"]) <= tol:
            status = "optimal"
    res = _pack_result(program, sf, x, y, z, status, it, resid, cert, message)
    res.tol_iterations = tol_it
    if polish and status == "optimal":
        res = polish_solution(program, res)
    return res


def _pd_step(sf, x, y, s, z, W, rx, ry, rz, mu, reg):
    """One predictor-corrector step; returns the new iterate and step length."""
    cones, G = sf.cones, sf.G
    if W is None:
        W = _Scaling(cones, s, z)
    lam = W.lam
    kkt = _KKTSolver(sf, W.wtw_data(), reg)

    def newton(rs):
        u = cones.inv_prod(lam, rs)
        dx, dy, dz = kkt.solve(-rx, -ry, -rz - W.apply(u, trans=True))
        # scaled directions without forming W dz (avoids cancellation)
        ds = -(G @ dx + rz)
        dst = W.apply(ds, inverse=True, trans=True)
        dzt = u - dst
        return dx, dy, dz, ds, dst, dzt

    lam2 = cones.prod(lam, lam)
    dx, dy, dz, ds, dst, dzt = newton(-lam2)
    a_aff = min(1.0, cones.max_step(lam, dst), cones.max_step(lam, dzt))
    mu_aff = float((lam + a_aff * dst) @ (lam + a_aff * dzt)) / cones.degree
    sigma = min(1.0, max(0.0, mu_aff / mu)) ** 3
    rs = -lam2 - cones.prod(dst, dzt) + sigma * mu * cones.e
    dx, dy, dz, ds, dst, dzt = newton(rs)
    amax = min(cones.max_step(lam, dst), cones.max_step(lam, dzt))
    alpha = min(1.0, 0.99 * amax)
    new = (x + alpha * dx, y + alpha * dy, s + alpha * ds, z + alpha * dz)
    if not all(np.all(np.isfinite(v)) for v in new):
        raise _Breakdown("non-finite iterate")
    W.update(lam + alpha * dst, lam + alpha * dzt)
    if not np.all(np.isfinite(W.lam)) or cones.min_eig(W.lam) <= 0:
        raise _Breakdown("scaling left the cone interior")
    return (*new, W, alpha)


def _pack_result(program, sf, x, y, z, status, it, resid, cert, message):
    n, cones = program.n, sf.cones
    nl = len(sf.lower_idx)
    zl = np.zeros(n)
    zu = np.zeros(n)
    zl[sf.lower_idx] = z[:nl]
    zu[sf.upper_idx] = z[nl : cones.ml]
    zc = [z[rows].copy() for rows in sf.soc_rows]
    return SolveResult(
        status=status,
        x=x,
        y=y,
        z_lower=zl,
        z_upper=zu,
        z_cones=zc,
        objective=program.objective(x),
        iterations=it,
        residuals=resid,
        certificate=cert,
        message=message,
    )


# ------------------------------------------------------------- KKT checking


def _cone_violation(head: float, tail: np.ndarray) -> float:
    return max(0.0, float(np.linalg.norm(tail)) - head)


def check_kkt(program: ConicProgram, result: SolveResult) -> dict[str, float]:
    """Infinity-norm KKT residuals of ``result`` (min-form multipliers)."""
    x = result.x
    sign = 1.0 if program.sense == "min" else -1.0
    grad = sign * program.gradient(x) + program.A.T @ result.y - result.z_lower + result.z_upper
    cone_heads = []
    for blk, zc in zip(program.socs, result.z_cones):
        if blk.head is not None:
            grad[blk.head] -= zc[0]
        for j, zj in zip(blk.tail, zc[1:]):
            grad[j] -= zj
        head = x[blk.head] if blk.head is not None else blk.head_const
        cone_heads.append((head, x[list(blk.tail)]))
    primal = [np.max(np.abs(program.A @ x - program.b)) if program.m else 0.0]
    lo = np.isfinite(program.lb)
    up = np.isfinite(program.ub)
    primal.append(float(np.max(np.maximum(program.lb[lo] - x[lo], 0.0), initial=0.0)))
    primal.append(float(np.max(np.maximum(x[up] - program.ub[up], 0.0), initial=0.0)))
    primal += [_cone_violation(hd, tl) for hd, tl in cone_heads]
    dual = [float(np.max(np.maximum(-result.z_lower, 0.0), initial=0.0)), float(np.max(np.maximum(-result.z_upper, 0.0), initial=0.0))]
    dual += [_cone_violation(zc[0], zc[1:]) for zc in result.z_cones]
    comp = [
        float(np.max(np.abs((x[lo] - program.lb[lo]) * result.z_lower[lo]), initial=0.0)),
        float(np.max(np.abs((program.ub[up] - x[up]) * result.z_upper[up]), initial=0.0)),
    ]
    comp += [abs(hd * zc[0] + float(tl @ zc[1:])) for (hd, tl), zc in zip(cone_heads, result.z_cones)]
    return {
        "stationarity": float(np.max(np.abs(grad), initial=0.0)),
        "primal_feasibility": float(max(primal)),
        "dual_feasibility": float(max(dual)),
        "complementarity": float(max(comp)),
    }


# ---------------------------------------------------------------- polishing


def _cone_point(program: ConicProgram, blk: SOCBlock, x: np.ndarray):
    head = x[blk.head] if blk.head is not None else blk.head_const
    return head, x[list(blk.tail)]


def polish_solution(program: ConicProgram, result: SolveResult, max_newton: int = 8) -> SolveResult:
    """Active-set Newton refinement of an optimal result (see :func:`solve_conic`)."""
    n = program.n
    x = result.x
    sign = 1.0 if program.sense == "min" else -1.0
    lo_act = np.flatnonzero(np.isfinite(program.lb) & (x - program.lb < result.z_lower))
    up_act = np.flatnonzero(np.isfinite(program.ub) & (program.ub - x < result.z_upper))
    cone_act, apex = [], []
    for k, (blk, zc) in enumerate(zip(program.socs, result.z_cones)):
        hv, tv = _cone_point(program, blk, x)
        if hv - np.linalg.norm(tv) < zc[0]:
            # at the apex the quadratic form has no gradient: pin all members
            (apex if hv <= 1e-6 * max(1.0, zc[0]) else cone_act).append(k)
    apex_rows = []  # (cone, position in block, variable)
    for k in apex:
        blk = program.socs[k]
        members = ([(0, blk.head)] if blk.head is not None else []) + [(1 + r, j) for r, j in enumerate(blk.tail)]
        apex_rows += [(k, pos, j) for pos, j in members]
    H0 = sign * program.hessian()
    A = program.A
    p = A.shape[0]
    nl, nu, nc, na = len(lo_act), len(up_act), len(cone_act), len(apex_rows)
    Ea = sp.csr_matrix((np.ones(na), (np.arange(na), [j for _, _, j in apex_rows])), shape=(na, n))
    El = sp.csr_matrix((np.ones(nl), (np.arange(nl), lo_act)), shape=(nl, n))
    Eu = sp.csr_matrix((np.ones(nu), (np.arange(nu), up_act)), shape=(nu, n))

    def cone_parts(xv):
        rows, cols, vals, cvals = [], [], [], []
        hd, hv_ = [], []
        for r, k in enumerate(cone_act):
            blk = program.socs[k]
            hv, tv = _cone_point(program, blk, xv)
            cvals.append(0.5 * (tv @ tv - hv * hv))
            for j, tj in zip(blk.tail, tv):
                rows.append(r)
                cols.append(j)
                vals.append(tj)
            if blk.head is not None:
                rows.append(r)
                cols.append(blk.head)
                vals.append(-hv)
        Jc = sp.csr_matrix((vals, (rows, cols)), shape=(nc, n))
        return Jc, np.asarray(cvals)

    def hess_c(nu_):
        d = np.zeros(n)
        for r, k in enumerate(cone_act):
            blk = program.socs[k]
            d[list(blk.tail)] += nu_[r]
            if blk.head is not None:
                d[blk.head] -= nu_[r]
        return sp.diags(d)

    y = result.y.copy()
    zl = result.z_lower[lo_act].copy()
    zu = result.z_upper[up_act].copy()
    nu_ = np.array([
        result.z_cones[k][0] / max(_cone_point(program, program.socs[k], x)[0], 1e-300) for k in cone_act
    ])
    za = np.array([result.z_cones[k][pos] for k, pos, _ in apex_rows])
    xv = x.copy()
    for _ in range(max_newton):
        Jc, cv = cone_parts(xv)
        grad = sign * program.gradient(xv)
        F = np.concatenate([
            grad + A.T @ y - El.T @ zl + Eu.T @ zu + Jc.T @ nu_ - Ea.T @ za,
            A @ xv - program.b,
            xv[lo_act] - program.lb[lo_act],
            xv[up_act] - program.ub[up_act],
            cv,
            Ea @ xv,
        ])
        if np.max(np.abs(F), initial=0.0) <= 1e-14 * max(1.0, np.max(np.abs(grad), initial=0.0)):
            break
        J = sp.bmat([
            [H0 + hess_c(nu_), A.T, -El.T, Eu.T, Jc.T, -Ea.T],
            [A, None, None, None, None, None],
            [El, None, None, None, None, None],
            [Eu, None, None, None, None, None],
            [Jc, None, None, None, None, None],
            [Ea, None, None, None, None, None],
        ], format="csc")
        if structural_rank(J.tocsr()) < J.shape[0]:
            return result  # degenerate active set; keep the interior-point answer
        try:
            step = spla.splu(J).solve(-F)
        except RuntimeError:
            return result
        if not np.all(np.isfinite(step)):
            return result
        xv = xv + step[:n]
        o = n
        y = y + step[o : o + p]
        o += p
        zl = zl + step[o : o + nl]
        o += nl
        zu = zu + step[o : o + nu]
        o += nu
        nu_ = nu_ + step[o : o + nc]
        za = za + step[o + nc :]
    if np.any(zl < 0) or np.any(zu < 0) or np.any(nu_ < 0):
        return result
    cand_zl = np.zeros(n)
    cand_zu = np.zeros(n)
    cand_zl[lo_act] = zl
    cand_zu[up_act] = zu
    cand_zc = [np.zeros_like(zc) for zc in result.z_cones]
    for r, k in enumerate(cone_act):
        hv, tv = _cone_point(program, program.socs[k], xv)
        cand_zc[k] = nu_[r] * np.concatenate([[hv], -tv])
    for (k, pos, _), v in zip(apex_rows, za):
        cand_zc[k][pos] = v
    for k in apex:
        blk = program.socs[k]
        if blk.head is None:
            cand_zc[k][0] = np.linalg.norm(cand_zc[k][1:])  # constant head: any dual head works
        if np.linalg.norm(cand_zc[k][1:]) > cand_zc[k][0]:
            return result
    cand = SolveResult(
        status=result.status, x=xv, y=y, z_lower=cand_zl, z_upper=cand_zu, z_cones=cand_zc,
        objective=program.objective(xv), iterations=result.iterations, residuals=dict(result.residuals),
        certificate=None, message="polished", tol_iterations=result.tol_iterations,
    )
    before = check_kkt(program, result)
    after = check_kkt(program, cand)
    if max(after.values()) < max(before.values()):
        cand.residuals = {"primal": after["primal_feasibility"], "dual": after["stationarity"],
                          "gap": after["complementarity"] / max(1.0, abs(program.objective(xv)))}
        return cand
    return result


# ------------------------------------------------------------- text format

_FMT_HEADER = "# acbilevel conic program v1"


def _fmt(v: float) -> str:
    return repr(float(v))


def dump_program(program: ConicProgram, path: str | Path | None = None) -> str:
    """Portable text form; see ``docs/conic_format.md``."""
    lines = [_FMT_HEADER, f"SENSE {program.sense}", f"CONST {_fmt(program.c0)}", f"VARS {program.n}"]
    qd = program.q_diag if program.q_diag is not None else np.zeros(program.n)
    for k, nm in enumerate(program.names):
        lines.append(f"{k} {nm} {_fmt(program.lb[k])} {_fmt(program.ub[k])} {_fmt(program.c[k])} {_fmt(qd[k])}")
    lines.append(f"LOWRANK {len(program.low_rank)}")
    for t in program.low_rank:
        lines.append(f"{_fmt(t.weight)} {len(t.idx)} " + " ".join(f"{i}:{_fmt(v)}" for i, v in zip(t.idx, t.val)))
    A = program.A.tocsr()
    lines.append(f"EQS {A.shape[0]}")
    names = program.row_names or [f"r{i}" for i in range(A.shape[0])]
    for i in range(A.shape[0]):
        lo, hi = A.indptr[i], A.indptr[i + 1]
        ent = " ".join(f"{j}:{_fmt(v)}" for j, v in zip(A.indices[lo:hi], A.data[lo:hi]))
        lines.append(f"{names[i]} {_fmt(program.b[i])} {hi - lo} {ent}".rstrip())
    lines.append(f"SOCS {len(program.socs)}")
    for k, blk in enumerate(program.socs):
        head = "-" if blk.head is None else str(blk.head)
        lines.append(f"{blk.name or f'soc{k}'} {head} {_fmt(blk.head_const)} {len(blk.tail)} " + " ".join(map(str, blk.tail)))
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def load_program(text: str) -> ConicProgram:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != _FMT_HEADER:
        raise ValueError("not a conic program dump")
    pos = 1

    def take(tag):
        nonlocal pos
        key, _, rest = lines[pos].partition(" ")
        if key != tag:
            raise ValueError(f"line {pos + 1}: expected {tag}, got {key}")
        pos += 1
        return rest

    sense = take("SENSE")
    c0 = float(take("CONST"))
    n = int(take("VARS"))
    names, lb, ub, c, qd = [], [], [], [], []
    for _ in range(n):
        _, nm, a, bb, cc, dd = lines[pos].split()
        names.append(nm)
        lb.append(float(a))
        ub.append(float(bb))
        c.append(float(cc))
        qd.append(float(dd))
        pos += 1
    lr = []
    for _ in range(int(take("LOWRANK"))):
        parts = lines[pos].split()
        pairs = [tok.split(":") for tok in parts[2:]]
        lr.append(LowRankTerm(np.array([int(i) for i, _ in pairs]), np.array([float(v) for _, v in pairs]), float(parts[0])))
        pos += 1
    m = int(take("EQS"))
    rows, cols, vals, rhs, rnames = [], [], [], [], []
    for i in range(m):
        parts = lines[pos].split()
        rnames.append(parts[0])
        rhs.append(float(parts[1]))
        for tok in parts[3:]:
            j, v = tok.split(":")
            rows.append(i)
            cols.append(int(j))
            vals.append(float(v))
        pos += 1
    socs = []
    for _ in range(int(take("SOCS"))):
        parts = lines[pos].split()
        head = None if parts[1] == "-" else int(parts[1])
        socs.append(SOCBlock(head, tuple(int(j) for j in parts[4:]), float(parts[2]), parts[0]))
        pos += 1
    qd_arr = np.asarray(qd)
    return ConicProgram(
        names=names, lb=np.asarray(lb), ub=np.asarray(ub), c=np.asarray(c),
        A=sp.csr_matrix((vals, (rows, cols)), shape=(m, n)), b=np.asarray(rhs),
        q_diag=qd_arr if np.any(qd_arr) else None, low_rank=lr, c0=c0, socs=socs,
        row_names=rnames, sense=sense,
    )
