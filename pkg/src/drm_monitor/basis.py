"""Basis functions for the density ratio model.

A basis maps an observation value y to a q-vector whose first component
is identically one.  The log density ratio of population r against the
baseline is modelled as the inner product of a parameter block with
this vector.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateBasisError

_NAMED = {
    "y2": ("1, y, y^2", False),
    "ylogy": ("1, y, log y", True),
    "logy": ("1, log y", True),
    "logy2": ("1, log y, log^2 y", True),
}


@dataclass(frozen=True)
class BasisFunction:
    """Vector of component functions (1, f_1(y), ..., f_{q-1}(y))."""

    name: str
    components: tuple  # callables taking and returning float arrays
    requires_positive: bool = False
    description: str = field(default="", compare=False)

    @property
    def q(self):
        return len(self.components)

    def matrix(self, y):
        """Evaluate the basis at every value: an (N, q) design matrix."""
        y = np.asarray(y, dtype=np.float64)
        cols = [np.broadcast_to(np.asarray(f(y), dtype=np.float64), y.shape) for f in self.components]
        return np.column_stack(cols)

    def check_independence(self, y):
        """Raise if the non-constant components are numerically collinear.

        The Gram matrix of the centered components on the pooled sample
        must have smallest eigenvalue above 1e-10 times the largest.
        """
        if self.q < 2:
            return
        X = self.matrix(y)[:, 1:]
        X = X - X.mean(axis=0)
        gram = X.T @ X / max(len(y), 1)
        eigs = np.linalg.eigvalsh(gram)
        if eigs[0] <= 1e-10 * max(eigs[-1], 0.0):
            raise DegenerateBasisError(
                f"basis {self.name!r} is numerically degenerate on the data "
                f"(eigenvalue ratio {eigs[0]:.3e} / {eigs[-1]:.3e})"
            )


def _one(y):
    return np.ones_like(y)


def _identity(y):
    return y


def _square(y):
    return y * y


def _log_squared(y):
    return np.log(y) ** 2


_COMPONENTS = {
    "y2": (_one, _identity, _square),
    "ylogy": (_one, _identity, np.log),
    "logy": (_one, np.log),
    "logy2": (_one, np.log, _log_squared),
}


def basis_by_name(name):
    """Build one of the named bases: y2, ylogy, logy, logy2."""
    if name not in _NAMED:
        raise ValueError(f"unknown basis {name!r}; choose from {sorted(_NAMED)}")
    desc, needs_pos = _NAMED[name]
    return BasisFunction(name=name, components=_COMPONENTS[name],
                         requires_positive=needs_pos, description=desc)


def custom_basis(components, name="custom", requires_positive=False):
    """Wrap user-supplied component callables; the first must be constant 1."""
    comps = tuple(components)
    probe = np.array([0.5, 1.0, 2.0])
    first = np.asarray(comps[0](probe), dtype=np.float64)
    if not np.allclose(np.broadcast_to(first, probe.shape), 1.0):
        raise ValueError("first basis component must be identically 1")
    return BasisFunction(name=name, components=comps, requires_positive=requires_positive)
