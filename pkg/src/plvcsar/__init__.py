"""Instrumental-variable quantile regression for partially linear
varying-coefficient spatial autoregressive models."""
from .errors import (
    DegenerateDesignError,
    DegenerateSupportError,
    DgpError,
    DimensionError,
    HarnessError,
    ParameterDomainError,
    PlvcsarError,
    SingularMatrixError,
    SolverError,
    UnusableInstrumentsError,
)
from .ivqr import (
    IVQREstimate,
    IvqrConfig,
    RhoGrid,
    asymptotic_cov,
    confidence_intervals,
    estimate,
    estimate_naive_qr,
)
from .model import Dataset, assemble_design, build_weight_matrix, read_dataset, read_weights
from .qr import CheckLossProblem, SolverConfig, solve_qr
from .ranktest import rs_beta_test, rs_constancy_test
from .sim import DgpSpec, generate, run_monte_carlo
from .spline import make_knots, select_knots

__version__ = "0.1.0"

__all__ = [
    "CheckLossProblem",
    "Dataset",
    "DegenerateDesignError",
    "DegenerateSupportError",
    "DgpError",
    "DgpSpec",
    "DimensionError",
    "HarnessError",
    "IVQREstimate",
    "IvqrConfig",
    "ParameterDomainError",
    "PlvcsarError",
    "RhoGrid",
    "SingularMatrixError",
    "SolverConfig",
    "SolverError",
    "UnusableInstrumentsError",
    "assemble_design",
    "asymptotic_cov",
    "build_weight_matrix",
    "confidence_intervals",
    "estimate",
    "estimate_naive_qr",
    "generate",
    "make_knots",
    "read_dataset",
    "read_weights",
    "rs_beta_test",
    "rs_constancy_test",
    "run_monte_carlo",
    "select_knots",
    "solve_qr",
]
