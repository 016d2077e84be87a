"""Plug-in estimators of the limiting covariances of the fitted CDFs
and composite EL quantiles under clustered sampling.

These serve as cross-checks on the bootstrap (the shipped inference
path) and to studentize diagnostics.  Integrals against the pooled
mixture distribution are replaced by averages over all observations,
with the fitted parameters plugged in; covariances across clusters are
estimated from per-cluster sums, which is exactly the exchangeable
all-ordered-pairs average of the within-cluster cross terms.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .drm import fitted_cdf, hessian
from .errors import DegenerateBasisError, DrmError


@dataclass(frozen=True, eq=False)
class AsymptoticComponents:
    """Shared ingredients: mixture shares h_k, score covariance W, and
    the indicator-weighted integrals feeding the influence functions."""

    dataset: object
    fit: object
    Q: np.ndarray        # (N, q) basis at the observations, original scale
    h: np.ndarray        # (N, m+1) fitted mixture shares at the observations
    W: np.ndarray        # (mq, mq) plug-in score covariance

    @cached_property
    def _W_factor(self):
        if self.W.size == 0:
            return None
        try:
            return cho_factor(self.W)
        except np.linalg.LinAlgError:
            raise DegenerateBasisError(
                "plug-in score covariance W is numerically singular"
            ) from None

    def h_at(self, y):
        """Mixture shares h_0..h_m at arbitrary values y."""
        Qy = self.fit.basis.matrix(np.atleast_1d(np.asarray(y, dtype=np.float64)))
        S = Qy @ self.fit.theta.T if self.fit.m else np.zeros((Qy.shape[0], 0))
        Z = np.concatenate([np.zeros((S.shape[0], 1)), S], axis=1) + np.log(self.fit.rho)
        zmax = Z.max(axis=1)
        E = np.exp(Z - zmax[:, None])
        return E / E.sum(axis=1)[:, None]

    def B_vector(self, r, y):
        """(mq,) indicator integral B_r(y); segment s is the partial
        score covariance between populations r and s below y."""
        m, q = self.fit.m, self.fit.basis.q
        mask = self.dataset.values <= y
        hr = self.h[mask, r]
        out = np.empty((m, q))
        Qm = self.Q[mask]
        for s in range(1, m + 1):
            coef = hr * ((1.0 if s == r else 0.0) - self.h[mask, s])
            out[s - 1] = coef @ Qm
        return out.ravel() / self.Q.shape[0]

    def influence(self, r, x):
        """Per-observation influence values for the fitted CDF of
        population r evaluated at x, as an (N,) array aligned to the
        dataset; observation i from population k gets gamma_{r,k}(y_i; x).
        """
        N = self.Q.shape[0]
        m = self.fit.m
        ind = (self.dataset.values <= x).astype(np.float64)
        base = self.h[:, r] * ind
        if m == 0:
            return base
        c = cho_solve(self._W_factor, self.B_vector(r, x)).reshape(m, self.fit.basis.q)
        U = self.Q @ c.T                      # (N, m); column t-1 = c_t' q(y_i)
        pop = self.dataset.pop_index
        own = np.where(pop > 0, U[np.arange(N), np.maximum(pop - 1, 0)], 0.0)
        return base + own - (self.h[:, 1:] * U).sum(axis=1)


def estimate_components(ds, fit):
    """Empirical plug-ins of the limiting covariance ingredients."""
    if not fit.converged:
        raise DrmError("components require a converged fit")
    Q = fit.basis.matrix(ds.values)
    S = Q @ fit.theta.T if fit.m else np.zeros((Q.shape[0], 0))
    Z = np.concatenate([np.zeros((S.shape[0], 1)), S], axis=1) + np.log(fit.rho)
    zmax = Z.max(axis=1)
    E = np.exp(Z - zmax[:, None])
    h = E / E.sum(axis=1)[:, None]
    W = -hessian(ds, fit.basis, fit.theta) / Q.shape[0]
    comp = AsymptoticComponents(dataset=ds, fit=fit, Q=Q, h=h, W=W)
    comp._W_factor  # fail fast on a degenerate basis
    return comp


def _cluster_sums(ds, values):
    return np.bincount(ds.cluster_of, weights=values, minlength=int(ds.n_clusters.sum()))


def _population_cov(ds, a, b):
    """Per-population covariance of two per-cluster statistics."""
    out = np.zeros(ds.m + 1)
    start = 0
    for k, nk in enumerate(ds.n_clusters):
        ak = a[start:start + nk]
        bk = b[start:start + nk]
        if nk >= 2:
            out[k] = np.sum((ak - ak.mean()) * (bk - bk.mean())) / (nk - 1)
        start += nk
    return out


def omega(components, r, s, x, y):
    """Plug-in limiting covariance of sqrt(n)(G_hat_r(x), G_hat_s(y)).

    Estimated from per-cluster sums of the influence values, which by
    exchangeability averages the same-index and the (d-1) cross-index
    terms over all ordered within-cluster pairs at once.
    """
    ds = components.dataset
    fitres = components.fit
    gr = _cluster_sums(ds, components.influence(r, x))
    gs = gr if (s == r and y == x) else _cluster_sums(ds, components.influence(s, y))
    covs = _population_cov(ds, gr, gs)
    dbar = ds.mean_cluster_size
    rho = fitres.rho
    return float((rho * covs).sum() / (dbar * dbar * rho[r] * rho[s]))


@dataclass(frozen=True, eq=False)
class QuantileCovariance:
    """Limiting covariance matrix of the composite EL quantiles at one
    level, with the densities used to studentize them."""

    alpha: float
    xi: np.ndarray        # (m+1,) fitted quantiles
    density: np.ndarray   # (m+1,) fitted density at each quantile
    sigma: np.ndarray     # (m+1, m+1) sigma_rs

    def matrix22(self, r, s):
        return np.array([
            [self.sigma[r, r], self.sigma[r, s]],
            [self.sigma[r, s], self.sigma[s, s]],
        ])

    def var_quantile(self, r):
        return float(self.sigma[r, r])

    def var_difference(self, r, s):
        return float(self.sigma[r, r] + self.sigma[s, s] - 2.0 * self.sigma[r, s])


def gaussian_kde_density(points, weights, at, n_obs=None):
    """Weighted Gaussian KDE with the Silverman bandwidth
    1.06 * sigma * n^(-1/5); sigma is the weighted standard deviation.
    """
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts) if n_obs is None else n_obs
    mu = float(w @ pts)
    sd = float(np.sqrt(w @ (pts - mu) ** 2))
    if sd <= 0.0:
        raise DrmError("degenerate sample: zero spread, density estimate undefined")
    bw = 1.06 * sd * n ** (-0.2)
    z = (np.atleast_1d(at)[:, None] - pts[None, :]) / bw
    dens = (np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)) @ w / bw
    return dens if np.ndim(at) else float(dens[0])


def quantile_covariance(components, alpha):
    """Limiting covariance matrix of the quantile vector at one level,
    assembled from the influence-function plug-ins."""
    ds = components.dataset
    fitres = components.fit
    m = fitres.m
    xi = np.empty(m + 1)
    dens = np.empty(m + 1)
    infl = []
    for r in range(m + 1):
        cdf = fitted_cdf(fitres, r)
        xi[r] = cdf.quantile(alpha)
        dens[r] = gaussian_kde_density(cdf.support, cdf.mass, xi[r], n_obs=ds.n_observations)
        if dens[r] < 1e-8:
            raise DrmError(
                f"fitted density of population {r} at its alpha={alpha} quantile "
                "is numerically zero; quantile variance is unstable"
            )
        infl.append(_cluster_sums(ds, components.influence(r, xi[r])))
    dbar = ds.mean_cluster_size
    rho = fitres.rho
    sigma = np.empty((m + 1, m + 1))
    for r in range(m + 1):
        for s in range(r, m + 1):
            covs = _population_cov(ds, infl[r], infl[s])
            om = (rho * covs).sum() / (dbar * dbar * rho[r] * rho[s])
            sigma[r, s] = sigma[s, r] = om / (dens[r] * dens[s])
    return QuantileCovariance(alpha=alpha, xi=xi, density=dens, sigma=sigma)
