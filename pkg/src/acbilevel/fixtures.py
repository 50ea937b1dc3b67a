"""Small reference networks used by the tests, the acceptance suite and the CLI.

All quantities are per unit on a 100 MVA base.  ``write_all`` dumps every
fixture as native JSON (``python3 -m acbilevel.fixtures OUT_DIR``).
"""
from __future__ import annotations

import math
import sys
from pathlib import Path

from .netcase import NetworkCase, case_from_dict, ensure_valid, serialize_case


def _bus(i, ref=False, vmin=0.9, vmax=1.1):
    return {"id": i, "vmin": vmin, "vmax": vmax, "is_reference": ref}


def _line(e, i, j, r, x, bc=0.0, s_max=0.0, tau=1.0, sigma=0.0):
    z2 = r * r + x * x
    return {
        "id": e, "from_bus": i, "to_bus": j, "g": r / z2, "b": -x / z2,
        "g_fr": 0.0, "b_fr": bc / 2, "g_to": 0.0, "b_to": bc / 2,
        "tau": tau, "sigma": sigma, "s_max": s_max,
    }


def _gen(k, bus, c2, c1, pmax, pmin=0.0, qmax=2.0, qmin=-2.0, c0=0.0):
    return {"id": k, "bus": bus, "c2": c2, "c1": c1, "c0": c0, "pmin": pmin, "pmax": pmax, "qmin": qmin, "qmax": qmax}


def _load(k, bus, p, q):
    return {"id": k, "bus": bus, "p_d": list(p), "q_d": list(q)}


def one_bus() -> NetworkCase:
    return ensure_valid(case_from_dict({
        "name": "one_bus", "horizon": 1,
        "buses": [_bus(1, True)], "branches": [],
        "generators": [_gen(1, 1, 0.5, 10.0, 2.0)],
        "loads": [_load(1, 1, [0.8], [0.1])],
    }))


def two_bus() -> NetworkCase:
    """Cheap and expensive unit joined by a lossless tie."""
    return ensure_valid(case_from_dict({
        "name": "two_bus", "horizon": 1,
        "buses": [_bus(1, True), _bus(2)],
        "branches": [{"id": 1, "from_bus": 1, "to_bus": 2, "g": 0.0, "b": -10.0}],
        "generators": [_gen(1, 1, 0.0, 10.0, 3.0), _gen(2, 2, 0.0, 50.0, 3.0)],
        "loads": [_load(1, 2, [1.0], [0.2])],
    }))


def three_bus(horizon: int = 1, limit: float = 0.45, storage: bool = True) -> NetworkCase:
    """Meshed triangle: cheap unit at bus 1, dearer unit at bus 2, load at bus 3.

    Line 1-3 is rated ``limit`` so the cheap unit cannot serve the load alone.
    """
    base_p = [1.0, 1.1, 0.9, 1.2]
    p = [base_p[t % 4] for t in range(horizon)]
    data = {
        "name": "three_bus", "horizon": horizon,
        "buses": [_bus(1, True), _bus(2), _bus(3)],
        "branches": [
            _line(1, 1, 2, 0.02, 0.20, 0.02, s_max=2.0),
            _line(2, 1, 3, 0.02, 0.25, 0.02, s_max=limit),
            _line(3, 2, 3, 0.02, 0.25, 0.02, s_max=2.0),
        ],
        "generators": [_gen(1, 1, 2.0, 10.0, 2.0), _gen(2, 2, 4.0, 30.0, 2.0)],
        "loads": [_load(1, 3, p, [0.3 * v for v in p])],
    }
    if storage:
        data["storage"] = {"bus": 3, "soe_max": 1.0, "s_max": 0.3, "eta_ch": 1.0, "eta_dis": 1.0, "soe_init": 0.0}
    return ensure_valid(case_from_dict(data))


def arbitrage_three_bus() -> NetworkCase:
    """Two-step triangle for the discretized bilevel search.

    Step 0 has surplus must-run generation at a negative offer, so charging is
    paid; step 1 has an expensive peak, so discharging earns the peak price.
    """
    data = {
        "name": "arbitrage_three_bus", "horizon": 2,
        "buses": [_bus(1, True), _bus(2), _bus(3)],
        "branches": [
            _line(1, 1, 2, 0.02, 0.20, 0.02, s_max=3.0),
            _line(2, 1, 3, 0.02, 0.25, 0.02, s_max=3.0),
            _line(3, 2, 3, 0.02, 0.25, 0.02, s_max=3.0),
        ],
        "generators": [
            _gen(1, 1, 1.0, -5.0, 1.1, pmin=0.0),
            _gen(2, 2, 5.0, 60.0, 2.0),
        ],
        "loads": [_load(1, 3, [0.4, 1.6], [0.1, 0.3])],
        "storage": {"bus": 3, "soe_max": 0.4, "s_max": 0.4, "eta_ch": 1.0, "eta_dis": 1.0, "soe_init": 0.2},
    }
    return ensure_valid(case_from_dict(data))


_FIVE_BUS_PROFILE = [
    0.62, 0.58, 0.55, 0.54, 0.56, 0.62, 0.72, 0.85, 0.93, 0.97, 0.99, 1.00,
    0.98, 0.96, 0.95, 0.96, 0.99, 1.05, 1.10, 1.08, 1.00, 0.90, 0.78, 0.68,
]


def five_bus(horizon: int = 24) -> NetworkCase:
    """Meshed five-bus system (two loops) with a daily load profile."""
    prof = [_FIVE_BUS_PROFILE[t % 24] for t in range(horizon)]
    peak = {2: (1.2, 0.35), 3: (1.0, 0.30), 4: (1.3, 0.40)}
    loads = [_load(b, b, [pk[0] * f for f in prof], [pk[1] * f for f in prof]) for b, pk in peak.items()]
    data = {
        "name": "five_bus", "horizon": horizon,
        "buses": [_bus(1, True, 0.95, 1.06), _bus(2, vmin=0.94), _bus(3, vmin=0.94), _bus(4, vmin=0.94), _bus(5, vmin=0.95, vmax=1.06)],
        "branches": [
            _line(1, 1, 2, 0.02, 0.06, 0.06, s_max=2.0),
            _line(2, 1, 3, 0.08, 0.24, 0.05, s_max=1.2),
            _line(3, 2, 3, 0.06, 0.18, 0.04, s_max=1.0),
            _line(4, 2, 4, 0.06, 0.18, 0.04, s_max=1.4),
            _line(5, 3, 4, 0.01, 0.03, 0.02, s_max=1.0),
            _line(6, 4, 5, 0.04, 0.12, 0.03, s_max=1.5),
            _line(7, 2, 5, 0.05, 0.15, 0.04, s_max=1.2),
        ],
        "generators": [
            _gen(1, 1, 3.0, 12.0, 3.0, qmax=2.5, qmin=-1.0),
            _gen(2, 5, 2.5, 25.0, 2.0, qmax=1.5, qmin=-1.0),
            _gen(3, 3, 6.0, 40.0, 0.8, qmax=0.6, qmin=-0.4),
        ],
        "loads": loads,
        "shunts": [{"id": 1, "bus": 4, "g_sh": 0.0, "b_sh": 0.10}, {"id": 2, "bus": 2, "g_sh": 0.01, "b_sh": 0.0}],
        "storage": {"bus": 4, "soe_max": 1.5, "s_max": 0.5, "eta_ch": 0.95, "eta_dis": 0.95, "soe_init": 0.5},
    }
    return ensure_valid(case_from_dict(data))


def overload_three_bus() -> NetworkCase:
    """Triangle whose rated line carries about 70% of its rating when passive.

    With a 0.8 threshold the limit is dropped from the convex model.  The
    cheap unit bids negatively, so charging at bus 3 pays and the search
    pushes the dropped line past its rating.
    """
    data = {
        "name": "overload_three_bus", "horizon": 1,
        "buses": [_bus(1, True), _bus(2), _bus(3)],
        "branches": [
            _line(1, 1, 2, 0.02, 0.20, 0.02, s_max=3.0),
            _line(2, 1, 3, 0.02, 0.25, 0.02, s_max=0.8),
            _line(3, 2, 3, 0.02, 0.25, 0.02, s_max=3.0),
        ],
        "generators": [_gen(1, 1, 1.0, -20.0, 3.0), _gen(2, 2, 1.0, 40.0, 3.0)],
        "loads": [_load(1, 3, [0.9], [0.2])],
        "storage": {"bus": 3, "soe_max": 2.0, "s_max": 0.8, "soe_init": 0.0},
    }
    return ensure_valid(case_from_dict(data))


def phase_shift_three_bus() -> NetworkCase:
    """Triangle with an off-nominal tap and a phase shifter on line 1-2."""
    data = {
        "name": "phase_shift_three_bus", "horizon": 1,
        "buses": [_bus(1, True), _bus(2), _bus(3)],
        "branches": [
            _line(1, 1, 2, 0.02, 0.20, 0.02, s_max=2.0, tau=1.02, sigma=math.radians(2.0)),
            _line(2, 1, 3, 0.03, 0.25, 0.02, s_max=2.0),
            _line(3, 2, 3, 0.02, 0.25, 0.02, s_max=2.0),
        ],
        "generators": [_gen(1, 1, 2.0, 10.0, 2.0), _gen(2, 2, 4.0, 30.0, 2.0)],
        "loads": [_load(1, 3, [1.0], [0.3])],
        "shunts": [{"id": 1, "bus": 3, "g_sh": 0.02, "b_sh": 0.05}],
    }
    return ensure_valid(case_from_dict(data))


FIXTURES = {
    "one_bus": one_bus,
    "two_bus": two_bus,
    "three_bus": three_bus,
    "arbitrage_three_bus": arbitrage_three_bus,
    "five_bus": five_bus,
    "overload_three_bus": overload_three_bus,
    "phase_shift_three_bus": phase_shift_three_bus,
}


def write_all(out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, make in FIXTURES.items():
        p = out / f"{name}.json"
        p.write_text(serialize_case(make()) + "\n")
        paths.append(p)
    return paths


if __name__ == "__main__":  # pragma: no cover
    for p in write_all(sys.argv[1] if len(sys.argv) > 1 else "cases"):
        print(p)
