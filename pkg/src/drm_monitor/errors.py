"""Exception types raised across the package."""


class DrmError(Exception):
    """Base class for all errors raised by drm_monitor."""


class DataFormatError(DrmError):
    """Malformed or invalid input data (CSV parsing, invariant violations)."""


class DegenerateBasisError(DrmError):
    """Basis components are numerically linearly dependent on the data."""


class ConvergenceError(DrmError):
    """Optimizer failed to converge; carries the last iterate for diagnosis."""

    def __init__(self, message, last_theta=None, gradient_norm=None, iterations=None):
        super().__init__(message)
        self.last_theta = last_theta
        self.gradient_norm = gradient_norm
        self.iterations = iterations


class SeparationError(DrmError):
    """Likelihood appears unbounded (quasi-separated samples)."""

    def __init__(self, message, population=None):
        super().__init__(message)
        self.population = population


class BootstrapUnreliableError(DrmError):
    """Too many bootstrap replicates failed to refit."""
