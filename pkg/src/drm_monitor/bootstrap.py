"""Cluster-based bootstrap for quantile functionals and monitoring tests.

Each replicate redraws n_k whole clusters with replacement within every
population, refits the density ratio model warm-started at the original
estimate, and re-inverts the fitted CDFs.  Internally a resample is
represented by per-cluster multiplicities, so refits reuse the original
design matrix and sort order; this is distributionally identical to
materializing the resampled dataset (and uses the same random draws).

Replicate b is a pure function of (seed, b), so results are bit-identical
no matter how replicates are scheduled across workers.
"""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property, partial

import numpy as np

from . import _kernel
from .data import ClusteredDataset, PopulationSample
from .drm import fit as drm_fit, quantiles_for
from .errors import BootstrapUnreliableError, DrmError
from .rng import rng_for

_PHI = {
    "difference": lambda a, b: a - b,
    "ratio": lambda a, b: a / b - 1.0,
    "single": lambda a, b: a,
}


@dataclass(frozen=True)
class BootstrapPlan:
    """What to bootstrap: functional, populations, level, and budget."""

    B: int
    seed: int
    gamma: float = 0.05
    phi: str = "difference"
    r: int = 0
    s: int = 1
    alpha: float = 0.05

    def __post_init__(self):
        if self.B < 1:
            raise ValueError("B must be at least 1")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.phi not in _PHI:
            raise ValueError(f"phi must be one of {sorted(_PHI)}")
        if self.phi != "single" and self.r == self.s:
            raise ValueError("two-population functionals need r != s")


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    """Bootstrap distribution of the quantile functional."""

    replicates: np.ndarray          # realized functional values, failures dropped
    point: float                    # functional at the original fit
    ci_two_sided: tuple
    ci_one_sided_lower: float       # lower bound of [tau*_gamma, inf)
    p_value_one_sided: float
    n_failed: int
    gamma: float


@dataclass(frozen=True, eq=False)
class MonitoringTestResult:
    hypothesis: dict
    decision: str                   # "reject" | "fail-to-reject"
    result: BootstrapResult
    basis: str
    alpha: float
    gamma: float
    sided: str


def percentile(values, gamma):
    """Order-statistic ceil(gamma * (B + 1)) of the replicate values,
    clamped to [1, B] (inverse-CDF convention; exact dual of the
    (1 + #)/(B + 1) p-value)."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    B = v.size
    if B == 0:
        raise ValueError("no replicates")
    k = min(max(int(math.ceil(gamma * (B + 1) - 1e-12)), 1), B)
    return float(v[k - 1])


def _cluster_picks(ds, seed, b):
    """Uniform with-replacement cluster draws for replicate b, one array
    of n_k indices per population, in population order."""
    rng = rng_for(seed, b)
    return [rng.integers(0, p.n_clusters, p.n_clusters) for p in ds.populations]


def resample_clusters(ds, seed, replicate_index):
    """Materialize the cluster bootstrap resample as a dataset."""
    picks = _cluster_picks(ds, seed, replicate_index)
    pops = tuple(
        PopulationSample(label=p.label, clusters=tuple(p.clusters[i] for i in pick))
        for p, pick in zip(ds.populations, picks)
    )
    return ClusteredDataset(populations=pops, nominal_cluster_size=ds.nominal_cluster_size)


@dataclass(frozen=True, eq=False)
class _BootCore:
    """Everything a worker needs to run one weighted refit replicate."""

    problem: object
    theta_scaled: np.ndarray
    alphas: tuple
    n_clusters: np.ndarray       # per population
    cluster_sizes: np.ndarray    # per global cluster
    cluster_pop: np.ndarray      # per global cluster
    m: int
    order: np.ndarray = field(repr=False)

    @cached_property
    def cluster_of_sorted(self):
        return np.repeat(np.arange(self.cluster_sizes.size), self.cluster_sizes)[self.order]

    @cached_property
    def alphas_array(self):
        return np.asarray(self.alphas, dtype=np.float64)

    def run(self, seed, b):
        """Quantile matrix (m+1, len(alphas)) for replicate b, or None if
        the refit did not converge."""
        rng = rng_for(seed, b)
        counts = np.empty(self.cluster_sizes.size, dtype=np.int64)
        start = 0
        for nk in self.n_clusters:
            picks = rng.integers(0, nk, nk)
            counts[start:start + nk] = np.bincount(picks, minlength=nk)
            start += nk
        w = counts.astype(np.float64)
        nobs = np.bincount(self.cluster_pop, weights=w * self.cluster_sizes,
                           minlength=self.m + 1)
        total = nobs.sum()
        rho = nobs / total
        tol = 1e-8 * total
        tol_c = 2e-9 * total * float(rho.min())
        w_obs = np.repeat(w, self.cluster_sizes)
        theta_s, _, _, _, status, _ = _kernel.newton(
            self.problem.Qs, self.problem.pop, w_obs, np.log(rho),
            self.theta_scaled, tol, min(tol, tol_c), 200,
            self.problem.T, self.problem.Tinv,
        )
        if status != _kernel.STATUS_CONVERGED:
            return None
        return _kernel.weighted_quantiles(
            self.problem.Qs_sorted, w[self.cluster_of_sorted],
            self.problem.values_sorted, np.log(rho), theta_s, self.alphas_array,
        )


def _run_chunk(core, seed, indices):
    return [core.run(seed, b) for b in indices]


def bootstrap_quantile_samples(ds, basis, alphas, B, seed, *, fit=None, threads=1,
                               max_failed_frac=0.01):
    """Bootstrap draws of every population quantile at every alpha.

    Returns (samples, n_failed) where samples is (B_kept, m+1, len(alphas)).
    Raises BootstrapUnreliableError when more than max_failed_frac of the
    replicates fail to refit.
    """
    if fit is None:
        fit = drm_fit(ds, basis)
    if not fit.converged:
        raise DrmError("bootstrap requires a converged fit on the original data")
    core = _BootCore(
        problem=fit.problem,
        theta_scaled=fit.theta_scaled,
        alphas=tuple(alphas),
        n_clusters=ds.n_clusters,
        cluster_sizes=ds.cluster_sizes,
        cluster_pop=ds.cluster_pop,
        m=ds.m,
        order=fit.problem.order,
    )
    if threads and threads > 1:
        chunks = np.array_split(np.arange(B), min(B, threads * 4))
        with ProcessPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(partial(_run_chunk, core, seed), [c.tolist() for c in chunks]))
        results = [r for part in parts for r in part]
    else:
        results = [core.run(seed, b) for b in range(B)]
    kept = [r for r in results if r is not None]
    n_failed = B - len(kept)
    if n_failed > max_failed_frac * B:
        raise BootstrapUnreliableError(
            f"{n_failed} of {B} bootstrap refits failed to converge"
        )
    if not kept:
        raise BootstrapUnreliableError("every bootstrap refit failed")
    return np.stack(kept), n_failed


def bootstrap_distribution(ds, basis, plan, *, fit=None, threads=1):
    """Bootstrap distribution, intervals, and p-value for the planned
    functional of composite EL quantiles."""
    if fit is None:
        fit = drm_fit(ds, basis)
    phi = _PHI[plan.phi]
    samples, n_failed = bootstrap_quantile_samples(
        ds, basis, [plan.alpha], plan.B, plan.seed, fit=fit, threads=threads,
    )
    xi_r = samples[:, plan.r, 0]
    xi_s = samples[:, plan.s, 0] if plan.phi != "single" else np.zeros_like(xi_r)
    reps = phi(xi_r, xi_s)
    q = quantiles_for(fit, [plan.alpha])
    point = float(phi(q[plan.r, 0], q[plan.s, 0] if plan.phi != "single" else 0.0))
    g = plan.gamma
    lo, hi = percentile(reps, g / 2.0), percentile(reps, 1.0 - g / 2.0)
    one_lo = percentile(reps, g)
    p_one = (1.0 + int(np.sum(reps <= 0.0))) / (reps.size + 1.0)
    return BootstrapResult(
        replicates=reps, point=point, ci_two_sided=(lo, hi),
        ci_one_sided_lower=one_lo, p_value_one_sided=float(p_one),
        n_failed=n_failed, gamma=g,
    )


def monitoring_test(ds, basis, plan, *, sided="one", fit=None, threads=1):
    """Bootstrap monitoring test for decline of the quantile functional.

    One-sided: reject H0: phi <= 0 in favor of phi > 0 when the gamma-th
    bootstrap percentile is positive.  Two-sided: reject H0: phi = 0 when
    the percentile interval excludes zero.
    """
    if sided not in ("one", "two"):
        raise ValueError("sided must be 'one' or 'two'")
    result = bootstrap_distribution(ds, basis, plan, fit=fit, threads=threads)
    labels = ds.labels
    desc = {
        "difference": f"xi[{labels[plan.r]}] - xi[{labels[plan.s]}]",
        "ratio": f"xi[{labels[plan.r]}] / xi[{labels[plan.s]}] - 1",
        "single": f"xi[{labels[plan.r]}]",
    }[plan.phi]
    if sided == "one":
        reject = result.ci_one_sided_lower > 0.0
        hypothesis = {"null": f"{desc} <= 0", "alternative": f"{desc} > 0"}
    else:
        lo, hi = result.ci_two_sided
        reject = not (lo <= 0.0 <= hi)
        hypothesis = {"null": f"{desc} = 0", "alternative": f"{desc} != 0"}
    return MonitoringTestResult(
        hypothesis=hypothesis,
        decision="reject" if reject else "fail-to-reject",
        result=result,
        basis=basis.name,
        alpha=plan.alpha,
        gamma=plan.gamma,
        sided=sided,
    )
