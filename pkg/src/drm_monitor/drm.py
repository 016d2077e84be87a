"""Composite empirical likelihood fit of the density ratio model.

The m+1 population CDFs are linked through a baseline G_0 and a basis
vector q(y): dG_r/dG_0 = exp(theta_r' q(y)).  Maximizing the profile
log composite EL over theta yields probability weights on the pooled
observations and, from them, fitted step-function CDFs whose inverses
are the composite EL quantiles.

The public value/gradient/hessian functions are straightforward
vectorized NumPy on the raw basis; the optimizer itself runs a damped
Newton ascent on a QR-whitened copy of the basis matrix (an exact
linear reparametrization, mapped back on exit) inside a compiled
kernel, which keeps the Newton system well conditioned and bootstrap
refits cheap.
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import _kernel
from .errors import ConvergenceError, DataFormatError, DrmError, SeparationError

_CONSTRAINT_GUARD = 2e-9  # keeps sum(p_hat * exp(theta_r' q)) within 1e-8 of 1


@dataclass(frozen=True, eq=False)
class _Problem:
    """Whitened design shared by a fit and all its bootstrap refits.

    The optimizer sees Qs with orthonormal-up-to-sqrt(N) columns from a
    QR factorization of the raw basis matrix, which keeps the Newton
    system perfectly conditioned; T maps original parameter blocks to
    the whitened ones (theta_white = T theta) and is upper triangular,
    so the constant-component score keeps its meaning.
    """

    Qs: np.ndarray          # (N, q) whitened basis matrix
    pop: np.ndarray         # (N,) population index, int64
    T: np.ndarray           # (q, q) upper triangular, theta_white = T theta
    Tinv: np.ndarray
    order: np.ndarray       # argsort of the observation values
    values_sorted: np.ndarray
    Qs_sorted: np.ndarray
    pop_sorted: np.ndarray

    @property
    def n(self):
        return self.Qs.shape[0]

    def scale_theta(self, theta):
        return np.asarray(theta, dtype=np.float64) @ self.T.T

    def unscale_theta(self, theta_s):
        return np.asarray(theta_s, dtype=np.float64) @ self.Tinv.T


def _check_applicable(ds, basis, *, skip_independence=False):
    if basis.requires_positive:
        for p in ds.populations:
            if np.any(p.values <= 0.0):
                raise DataFormatError(
                    f"basis {basis.name!r} takes logarithms but population "
                    f"{p.label!r} has values <= 0"
                )
    if not skip_independence:
        basis.check_independence(ds.values)


def build_problem(ds, basis, *, skip_independence=False):
    """Validate (dataset, basis) and assemble the whitened design."""
    _check_applicable(ds, basis, skip_independence=skip_independence)
    Q = basis.matrix(ds.values)
    N = Q.shape[0]
    R = np.linalg.qr(Q, mode="r")
    # sign-normalize; rank-deficient directions (only reachable through the
    # degenerate single-support bypass, genuine collinearity errors earlier)
    # are frozen: their whitened columns are zeroed so the optimizer never
    # moves along them
    diag = np.diag(R).copy()
    scale = max(float(np.abs(diag).max()), 1.0)
    dead = np.abs(diag) < 1e-10 * scale
    signs = np.where(dead, 1.0, np.sign(diag))
    R = signs[:, None] * R
    d2 = np.diag(R).copy()
    d2[dead] = scale
    np.fill_diagonal(R, d2)
    T = R / np.sqrt(N)
    Tinv = np.linalg.solve(T, np.eye(T.shape[0]))
    Qs = Q @ Tinv
    Qs[:, dead] = 0.0
    Qs = np.ascontiguousarray(Qs)
    order = np.argsort(ds.values, kind="stable")
    return _Problem(
        Qs=Qs,
        pop=ds.pop_index.astype(np.int64),
        T=T,
        Tinv=Tinv,
        order=order,
        values_sorted=ds.values[order],
        Qs_sorted=np.ascontiguousarray(Qs[order]),
        pop_sorted=ds.pop_index[order].astype(np.int64),
    )


def _as_theta(ds, basis, theta):
    th = np.asarray(theta, dtype=np.float64)
    if th.size == 0:
        return np.zeros((0, basis.q))
    th = th.reshape(ds.m, basis.q)
    if not np.all(np.isfinite(th)):
        raise DrmError("theta contains non-finite entries")
    return th


def _log_mixture(ds, basis, theta):
    """Per-observation log sum_r rho_r exp(theta_r' q(y_i)) and the S matrix."""
    Q = basis.matrix(ds.values)
    S = Q @ theta.T if theta.size else np.zeros((len(ds.values), 0))
    Z = np.concatenate([np.zeros((S.shape[0], 1)), S], axis=1) + np.log(ds.rho)
    zmax = Z.max(axis=1)
    lse = zmax + np.log(np.exp(Z - zmax[:, None]).sum(axis=1))
    return Q, S, Z, lse


def profile_log_cel(ds, basis, theta):
    """Profile log composite EL at theta (m blocks of q parameters).

    Zero at theta = 0: each mixture term is then sum_r rho_r = 1.
    """
    th = _as_theta(ds, basis, theta)
    _check_applicable(ds, basis)
    _, S, _, lse = _log_mixture(ds, basis, th)
    pop = ds.pop_index
    own = S[np.arange(S.shape[0]), pop - 1][pop > 0].sum() if th.size else 0.0
    out = float(own - lse.sum())
    if not np.isfinite(out):
        raise DrmError(
            "non-finite log-likelihood; consider standardizing the data scale"
        )
    return out


def gradient(ds, basis, theta):
    """Gradient of the profile log composite EL, flattened over blocks.

    Block r is sum_i {1(pop_i = r) - h_r(y_i; theta)} q(y_i) with
    h_r(y) = rho_r exp(theta_r' q(y)) / sum_s rho_s exp(theta_s' q(y)).
    """
    th = _as_theta(ds, basis, theta)
    _check_applicable(ds, basis)
    Q, _, Z, lse = _log_mixture(ds, basis, th)
    H = np.exp(Z - lse[:, None])          # (N, m+1), rows sum to 1
    m = th.shape[0]
    pop = ds.pop_index
    out = np.empty((m, basis.q))
    for r in range(1, m + 1):
        out[r - 1] = Q[pop == r].sum(axis=0) - Q.T @ H[:, r]
    return out.ravel()


def hessian(ds, basis, theta):
    """Hessian of the profile log composite EL (negative semidefinite)."""
    th = _as_theta(ds, basis, theta)
    _check_applicable(ds, basis)
    Q, _, Z, lse = _log_mixture(ds, basis, th)
    H1 = np.exp(Z - lse[:, None])[:, 1:]  # (N, m)
    m, q = th.shape if th.size else (ds.m, basis.q)
    N = Q.shape[0]
    T = (H1[:, :, None] * Q[:, None, :]).reshape(N, m * q)
    M = T.T @ T                            # blocks sum_i h_r h_s q q'
    A = T.T @ Q                            # rows r*q:(r+1)*q give sum_i h_r q q'
    out = M.copy()
    for r in range(m):
        sl = slice(r * q, (r + 1) * q)
        out[sl, sl] -= A[sl, :]
    return out


@dataclass(frozen=True, eq=False)
class DrmFit:
    """Converged maximum composite EL estimate.

    `theta` has one row per non-baseline population, in the original
    basis scale.  `weights` are the EL probabilities on the pooled
    observations in dataset order; they are positive, sum to one, and
    satisfy sum_i weights_i exp(theta_r' q(y_i)) = 1 for every r.
    """

    dataset: object
    basis: object
    theta: np.ndarray
    rho: np.ndarray
    weights: np.ndarray
    loglik: float
    iterations: int
    gradient_norm: float
    converged: bool
    problem: _Problem = field(repr=False)
    theta_scaled: np.ndarray = field(repr=False)

    @property
    def m(self):
        return self.theta.shape[0]


def fit(ds, basis, *, tol=None, max_iter=200, init=None):
    """Maximize the profile log composite EL; returns a DrmFit.

    tol bounds the max-abs gradient at the solution (default 1e-8 times
    the total observation count).  init is an optional (m, q) starting
    value in the original basis scale.  Raises ConvergenceError (with
    the last iterate attached) after max_iter iterations, and
    SeparationError when the likelihood is unbounded along a direction,
    which happens when one sample's basis values quasi-separate from
    the rest.
    """
    # a single distinct value makes every population CDF the same point
    # mass whatever theta is; the basis is degenerate there by necessity,
    # so bypass the independence check and return the flat fit directly
    degenerate_support = np.unique(ds.values).size == 1
    problem = build_problem(ds, basis, skip_independence=degenerate_support)
    N = problem.n
    m, q = ds.m, basis.q
    if tol is None:
        tol = 1e-8 * N
    if m == 0 or degenerate_support:
        w = np.full(N, 1.0 / N)
        return DrmFit(
            dataset=ds, basis=basis, theta=np.zeros((m, q)), rho=ds.rho.copy(),
            weights=w, loglik=0.0, iterations=0, gradient_norm=0.0,
            converged=True, problem=problem, theta_scaled=np.zeros((m, q)),
        )
    theta0 = np.zeros((m, q)) if init is None else problem.scale_theta(_as_theta(ds, basis, init))
    rho = ds.rho
    tol_c = _CONSTRAINT_GUARD * N * float(rho.min())
    theta_s, f, iters, gnorm, status, bad = _kernel.newton(
        problem.Qs, problem.pop, np.ones(N), np.log(rho), theta0,
        tol, min(tol, tol_c), max_iter, problem.T, problem.Tinv,
    )
    theta_hat = problem.unscale_theta(theta_s)
    if status == _kernel.STATUS_SEPARATED:
        label = ds.labels[bad + 1]
        raise SeparationError(
            f"log-likelihood appears unbounded in the direction of population "
            f"{label!r} (quasi-separated samples)", population=label,
        )
    if status != _kernel.STATUS_CONVERGED:
        raise ConvergenceError(
            f"no convergence after {iters} iterations (scaled gradient norm {gnorm:.3e})",
            last_theta=theta_hat, gradient_norm=gnorm, iterations=iters,
        )
    weights = el_weights(problem, theta_s, rho)
    return DrmFit(
        dataset=ds, basis=basis, theta=theta_hat, rho=rho.copy(),
        weights=weights, loglik=float(f), iterations=int(iters),
        gradient_norm=float(np.abs(gradient(ds, basis, theta_hat)).max()),
        converged=True, problem=problem, theta_scaled=theta_s,
    )


def el_weights(problem, theta_s, rho):
    """EL probabilities p_i = (1/N) / sum_r rho_r exp(theta_r' q(y_i))."""
    lse = _lse_rows(problem.Qs, theta_s, rho)
    return np.exp(-lse) / problem.n


def _lse_rows(Qs, theta_s, rho):
    S = Qs @ theta_s.T if theta_s.size else np.zeros((Qs.shape[0], 0))
    Z = np.concatenate([np.zeros((S.shape[0], 1)), S], axis=1) + np.log(rho)
    zmax = Z.max(axis=1)
    return zmax + np.log(np.exp(Z - zmax[:, None]).sum(axis=1))


@dataclass(frozen=True, eq=False)
class FittedCdf:
    """Weighted step-function estimate of one population CDF."""

    support: np.ndarray   # sorted distinct observation values
    mass: np.ndarray      # jump at each support point
    population_index: int

    @cached_property
    def cumulative(self):
        return np.cumsum(self.mass)

    def evaluate(self, t):
        """Right-continuous CDF value(s) at t."""
        idx = np.searchsorted(self.support, t, side="right") - 1
        cum = np.concatenate([[0.0], self.cumulative])
        return cum[np.asarray(idx) + 1] if np.ndim(t) else float(cum[idx + 1])

    def quantile(self, alpha):
        """Smallest support point whose cumulative mass reaches alpha."""
        if not 0.0 < alpha < 1.0:
            raise ValueError("alpha must lie strictly between 0 and 1")
        # 1e-9 slack: cumulative masses inherit the EL-constraint precision,
        # so a boundary hit within that tolerance counts as reached
        i = np.searchsorted(self.cumulative, alpha - 1e-9, side="left")
        return float(self.support[min(i, self.support.size - 1)])


def fitted_cdf(fit, r):
    """Fitted CDF of population r: masses p_i exp(theta_r' q(y_i)), ties merged."""
    if not 0 <= r <= fit.m:
        raise ValueError(f"population index {r} out of range 0..{fit.m}")
    problem = fit.problem
    masses = _population_masses(problem, fit.theta_scaled, fit.rho)
    ms = masses[:, r]
    vs = problem.values_sorted
    first = np.flatnonzero(np.concatenate([[True], vs[1:] != vs[:-1]]))
    support = vs[first]
    agg = np.add.reduceat(ms, first)
    return FittedCdf(support=support, mass=agg, population_index=r)


def _population_masses(problem, theta_s, rho, w=None):
    """(N, m+1) masses of every fitted CDF, rows in sorted-value order.

    Column r holds w_i p_i exp(theta_r' q(y_i)) = w_i h_r(y_i) / (N rho_r)
    evaluated through the softmax for overflow safety.
    """
    Qs = problem.Qs_sorted
    S = Qs @ theta_s.T if theta_s.size else np.zeros((Qs.shape[0], 0))
    Z = np.concatenate([np.zeros((S.shape[0], 1)), S], axis=1) + np.log(rho)
    zmax = Z.max(axis=1)
    E = np.exp(Z - zmax[:, None])
    H = E / E.sum(axis=1)[:, None]
    out = H / (rho[None, :] * problem.n)
    if w is not None:
        out = out * w[:, None]
    return out


def cel_quantile(cdf, alpha):
    """Composite EL quantile: inf{t : G_hat_r(t) >= alpha}."""
    return cdf.quantile(alpha)


def quantiles_for(fit, alphas, populations=None):
    """Quantiles of every fitted population CDF at each alpha.

    Returns an (m+1, len(alphas)) array; rows follow dataset order.
    """
    pops = list(range(fit.m + 1)) if populations is None else list(populations)
    alphas = list(alphas)
    out = np.empty((len(pops), len(alphas)))
    for i, r in enumerate(pops):
        cdf = fitted_cdf(fit, r)
        for j, a in enumerate(alphas):
            out[i, j] = cdf.quantile(a)
    return out
