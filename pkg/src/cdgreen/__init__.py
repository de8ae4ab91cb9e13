"""Green's functions of singularly perturbed convection-diffusion on the unit cube.

Modules
-------
problem
    Coefficients, domains and problem validation.
fundamental
    Constant-coefficient kernel and its closed-form derivatives.
parametrix
    Frozen-coefficient image constructions on the slab and the cube.
quadrature
    Adaptive L1 norms of singular, anisotropic fields.
fdsolver
    Layer-adapted upwind finite differences for discrete Green's functions.
studies
    Epsilon sweeps, scaling fits, verdicts and figure data.
"""

from .errors import (
    BudgetError,
    CDGreenError,
    CoefficientEvaluationError,
    ConfigurationError,
    CutoffDomainError,
    DivergenceError,
    MeshBudgetError,
    NumericalError,
    SingularityError,
    SolverError,
)
from .fdsolver import (
    GridFunction,
    Strategy,
    TensorMesh,
    Which,
    assemble,
    build_mesh,
    discrete_norms,
    read_grid_function,
    solve_green,
    solve_system,
)
from .fundamental import FundamentalJet, eval_g, eval_jet, eval_weights, frozen_residual, hat_coords
from .parametrix import Cutoff, ResidualKind, Variant, Want, cutoff_eval, eval_parametrix, residual_phi
from .problem import CoefficientField, Domain, ProblemSpec, expression_field, preset, validate_problem
from .quadrature import Base, Ball, MeshHints, NormReport, QuadResult, Region, crossplane_integral, l1_norm, norm_suite
from .studies import FitModel, ScalingFit, StudyConfig, fit, judge, sweep, verdict_table, verify

__version__ = "0.1.0"

__all__ = [
    "BudgetError",
    "CDGreenError",
    "CoefficientEvaluationError",
    "ConfigurationError",
    "CutoffDomainError",
    "DivergenceError",
    "MeshBudgetError",
    "NumericalError",
    "SingularityError",
    "SolverError",
    "GridFunction",
    "Strategy",
    "TensorMesh",
    "Which",
    "assemble",
    "build_mesh",
    "discrete_norms",
    "read_grid_function",
    "solve_green",
    "solve_system",
    "FundamentalJet",
    "eval_g",
    "eval_jet",
    "eval_weights",
    "frozen_residual",
    "hat_coords",
    "Cutoff",
    "ResidualKind",
    "Variant",
    "Want",
    "cutoff_eval",
    "eval_parametrix",
    "residual_phi",
    "CoefficientField",
    "Domain",
    "ProblemSpec",
    "expression_field",
    "preset",
    "validate_problem",
    "Base",
    "Ball",
    "MeshHints",
    "NormReport",
    "QuadResult",
    "Region",
    "crossplane_integral",
    "l1_norm",
    "norm_suite",
    "FitModel",
    "ScalingFit",
    "StudyConfig",
    "fit",
    "judge",
    "sweep",
    "verdict_table",
    "verify",
]
