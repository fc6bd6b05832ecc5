"""Spatial regression models as balancing-weights estimators.

Builds spatial covariance structures (random effects, intrinsic
autoregressive, Gaussian process), derives the implied unit-level weights of
generalized least squares in closed form, verifies their quadratic-programming
and ridge-regression equivalents, quantifies the bias from spatially
structured unmeasured confounders via Moran's I, and provides a sample-bounded
spatial weighting ATT estimator with bootstrap inference plus a simulation
harness.
"""

__version__ = "0.1.0"

from .data import (
    DistanceMatrix,
    SpatialDataset,
    load_dataset,
    pairwise_distances,
    save_dataset,
)
from .diagnostics import (
    BiasBoundInput,
    MoranResult,
    balance_report,
    bias_bound,
    bias_bound_input,
    effective_sample_size,
    localization_report,
    max_bias_curve,
    morans_i,
)
from .errors import DegenerateError, InfeasibleError, ValidationError
from .estimator import (
    AugmentedDesign,
    SWFit,
    augment,
    auto_deltas,
    select_eigenvectors,
    sw_bias_variance_bound,
    sw_fit,
)
from .gls import (
    GlsFit,
    ImpliedWeights,
    balance_dispersion_curve,
    gls_fit,
    implied_weights,
    minimal_dispersion_problem,
    ridge_fit,
)
from .qp import QPProblem, QPSolution, solve_eq, solve_ineq
from .simulate import (
    SimulationConfig,
    SimulationReport,
    gen_confounder,
    gen_outcome,
    make_synthetic_dataset,
    run_battery,
)
from .structures import (
    SpatialStructure,
    build_custom,
    build_gp_matern,
    build_icar,
    build_re,
    eig_psd,
    identity_structure,
    load_structure_csv,
)

__all__ = [
    "__version__",
    "AugmentedDesign",
    "BiasBoundInput",
    "DegenerateError",
    "DistanceMatrix",
    "GlsFit",
    "ImpliedWeights",
    "InfeasibleError",
    "MoranResult",
    "QPProblem",
    "QPSolution",
    "SimulationConfig",
    "SimulationReport",
    "SpatialDataset",
    "SpatialStructure",
    "SWFit",
    "ValidationError",
    "augment",
    "auto_deltas",
    "balance_dispersion_curve",
    "balance_report",
    "bias_bound",
    "bias_bound_input",
    "build_custom",
    "build_gp_matern",
    "build_icar",
    "build_re",
    "effective_sample_size",
    "eig_psd",
    "gen_confounder",
    "gen_outcome",
    "gls_fit",
    "identity_structure",
    "implied_weights",
    "load_dataset",
    "load_structure_csv",
    "localization_report",
    "make_synthetic_dataset",
    "max_bias_curve",
    "minimal_dispersion_problem",
    "morans_i",
    "pairwise_distances",
    "ridge_fit",
    "run_battery",
    "save_dataset",
    "select_eigenvectors",
    "solve_eq",
    "solve_ineq",
    "sw_bias_variance_bound",
    "sw_fit",
]
