"""Spherical-radial decomposition for joint chance constraints on elliptic PDE states."""

from .errors import (ConfigError, DefinitenessError, GridMismatchError, InfeasibleStartError,
                     InvalidGridError, SlaterError, SrdChanceError, TruncationError)
from .optimizer import SolveReport, SqpConfig, kkt_residual, solve_sqp
from .problems import BilinearProblem, LinearProblem
from .random_field import chi_cdf, chi_pdf, chi_quantile, sphere_samples
from .srd import (ProbabilityEstimate, RadialProfile, RayCaster, estimate_mc, estimate_srd, radial_profile,
                  variance_report)

__all__ = [
    "BilinearProblem", "ConfigError", "DefinitenessError", "GridMismatchError", "InfeasibleStartError",
    "InvalidGridError", "LinearProblem", "ProbabilityEstimate", "RadialProfile", "RayCaster", "SlaterError",
    "SolveReport", "SqpConfig", "SrdChanceError", "TruncationError", "chi_cdf", "chi_pdf", "chi_quantile",
    "estimate_mc", "estimate_srd", "kkt_residual", "radial_profile", "solve_sqp", "sphere_samples",
    "variance_report",
]
__version__ = "0.1.0"
