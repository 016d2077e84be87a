"""Quantile monitoring for clustered multi-sample strength data.

Fits a density ratio model across related populations by maximizing a
composite empirical likelihood, inverts the fitted CDFs for lower
quantiles, and runs cluster-bootstrap monitoring tests for quantile
decline.  Includes the classical comparators (empirical quantiles with
Wald intervals, Wilcoxon variants, random-effects ANOVA) and a Monte
Carlo study engine.
"""

__version__ = "0.1.0"

from .basis import BasisFunction, basis_by_name
from .data import ClusteredDataset, PopulationSample, load_csv, write_csv, validate
from .drm import DrmFit, FittedCdf, cel_quantile, fit, fitted_cdf, gradient, hessian, profile_log_cel
from .errors import (
    BootstrapUnreliableError,
    ConvergenceError,
    DataFormatError,
    DegenerateBasisError,
    DrmError,
    SeparationError,
)

__all__ = [
    "BasisFunction",
    "BootstrapUnreliableError",
    "ClusteredDataset",
    "ConvergenceError",
    "DataFormatError",
    "DegenerateBasisError",
    "DrmError",
    "DrmFit",
    "FittedCdf",
    "PopulationSample",
    "SeparationError",
    "basis_by_name",
    "cel_quantile",
    "fit",
    "fitted_cdf",
    "gradient",
    "hessian",
    "load_csv",
    "profile_log_cel",
    "validate",
    "write_csv",
    "__version__",
]
