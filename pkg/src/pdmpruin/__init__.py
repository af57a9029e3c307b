"""Ruin / first-passage solvers for piecewise deterministic processes with
phase-type downward jumps.

The package decides integrability of the first-passage linear ODE system
through a matrix Lie-algebra closure computation, evaluates the closed-form
killed ruin probabilities where they exist (constant drift, the zero-kill
quadrature family, and the exponentially relaxing drift family), and checks
every analytic result against independent ODE-integration and Monte Carlo
oracles.
"""

from .phase_type import PhaseType, matrix_exp
from .passage_model import (
    ConstantDrift,
    SegerdahlDrift,
    TabulatedDrift,
    ModelSpec,
    PassageProblem,
    SolutionCurve,
)
from .lie_algebra import ClosureReport, closure, commutator, is_solvable
from .riccati import asymptotic_rate, phi_k_closed_form, phi_k_drift
from .mc_sim import SimConfig, PassageEstimate, estimate

__version__ = "0.1.0"

__all__ = [
    "PhaseType",
    "matrix_exp",
    "ConstantDrift",
    "SegerdahlDrift",
    "TabulatedDrift",
    "ModelSpec",
    "PassageProblem",
    "SolutionCurve",
    "ClosureReport",
    "closure",
    "commutator",
    "is_solvable",
    "asymptotic_rate",
    "phi_k_closed_form",
    "phi_k_drift",
    "SimConfig",
    "PassageEstimate",
    "estimate",
    "__version__",
]
