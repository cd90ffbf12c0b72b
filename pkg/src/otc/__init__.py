"""Numerical tools for regularity questions in optimal transport with general costs.

Submodules: cost_kernel (costs, domains, constants), curvature (cross-curvature
and classification), geometry (charts, c-segments, John ellipsoids), potential
(c-convex semidiscrete potentials, measures, solver), estimates (sections,
c-cones, Alexandrov-type bounds) and harness (probes, campaigns, CLI).
"""
from .cost_kernel import (Ball, CostConstants, CostError, CostOracle, DomainSpec, Polytope,
                          builtin_cost, compute_constants)
from .curvature import classify, cross_curvature
from .geometry import make_chart, john_ellipsoid, renormalize
from .potential import SemidiscretePotential, ma_measure, solve_semidiscrete

__version__ = "0.1.0"
