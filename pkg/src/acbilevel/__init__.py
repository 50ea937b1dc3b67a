"""Bilevel storage arbitrage on a convex AC power flow approximation.

Modules
-------
netcase      case data, parsing and index sets
pfexact      exact polar power flow and OPF
conic        interior-point solver for SOC-constrained QPs
cpsota       convex lower-level primal model
dualmodel    explicit dual of the lower level
presolve     operating point, flags, warm starts and the outer loop
bilevel      storage model, discretized search, smoothing utility
report       verification and the run report
cli          command-line entry point
"""
from .netcase import NetworkCase, load_case
from .presolve import AlgorithmConfig, run_algorithm1, run_presolve

__version__ = "0.1.0"
__all__ = ["AlgorithmConfig", "NetworkCase", "load_case", "run_algorithm1", "run_presolve"]
