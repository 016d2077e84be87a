"""Classical comparators: empirical quantiles with independence-type
Wald intervals, the one-sided Wilcoxon rank-sum family, and the
random-effects ANOVA screen for cluster effects.

The Wald variance alpha(1-alpha) / (n_r d g^2) is only correct for
independent observations; under clustering it understates the sampling
variance, which is exactly the failure mode the interval is included
to demonstrate.
"""

from dataclasses import dataclass

import math

import numpy as np
from scipy import stats

from .covariance import gaussian_kde_density
from .data import PopulationSample
from .errors import DrmError
from .rng import rng_for


@dataclass(frozen=True)
class WaldInterval:
    estimate: float
    variance: float
    ci: tuple
    method: str = "empirical-quantile-independence"


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float       # rank sum of sample0 in the pooled ranking
    p_value: float         # one-sided; for w3 the larger of the two halves
    variant: str
    decision: bool
    halves: tuple = None   # ((stat, p), (stat, p)) for w3


@dataclass(frozen=True)
class AnovaTable:
    df_lot: int
    df_resid: int
    ss_lot: float
    ss_resid: float
    ms_lot: float
    ms_resid: float
    f_value: float
    p_value: float
    sigma2_gamma_hat: float
    sigma2_eps_hat: float


def empirical_quantile(sample, alpha):
    """inf{t : F_n(t) >= alpha} on the unweighted empirical CDF."""
    v = np.sort(np.asarray(sample, dtype=np.float64))
    if v.size == 0:
        raise ValueError("empty sample")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    # 1e-9 slack keeps exact products like 0.05 * 120 from rounding up
    k = int(math.ceil(alpha * v.size - 1e-9))
    return float(v[max(k, 1) - 1])


def _flat_values(sample):
    return sample.values if isinstance(sample, PopulationSample) else np.asarray(sample, dtype=np.float64)


def wald_interval(sample, alpha, gamma):
    """Empirical-quantile Wald interval assuming independent observations."""
    v = _flat_values(sample)
    est = empirical_quantile(v, alpha)
    dens = gaussian_kde_density(v, np.ones_like(v), est)
    if dens <= 0.0:
        raise DrmError("zero density estimate at the empirical quantile")
    var = alpha * (1.0 - alpha) / (v.size * dens * dens)
    z = stats.norm.ppf(1.0 - gamma / 2.0)
    half = z * math.sqrt(var)
    return WaldInterval(estimate=est, variance=var, ci=(est - half, est + half))


def wald_difference_interval(sample_r, sample_s, alpha, gamma):
    """Wald interval for a quantile difference; variances add."""
    wr = wald_interval(sample_r, alpha, gamma)
    ws = wald_interval(sample_s, alpha, gamma)
    est = wr.estimate - ws.estimate
    var = wr.variance + ws.variance
    z = stats.norm.ppf(1.0 - gamma / 2.0)
    half = z * math.sqrt(var)
    return WaldInterval(estimate=est, variance=var, ci=(est - half, est + half))


def rank_sum_p(sample0, sample1):
    """One-sided rank-sum p-value for the alternative that sample0 is
    stochastically smaller than sample1.

    Normal approximation with tie-corrected variance and continuity
    correction; all-tied pooled data degenerates to p = 1.
    """
    x0 = np.asarray(sample0, dtype=np.float64)
    x1 = np.asarray(sample1, dtype=np.float64)
    n0, n1 = x0.size, x1.size
    if n0 == 0 or n1 == 0:
        raise ValueError("both samples must be nonempty")
    pooled = np.concatenate([x0, x1])
    ranks = stats.rankdata(pooled)
    r0 = float(ranks[:n0].sum())
    n = n0 + n1
    mean = n0 * (n + 1) / 2.0
    _, counts = np.unique(pooled, return_counts=True)
    tie_term = float(np.sum(counts.astype(np.float64) ** 3 - counts)) / (n * (n - 1.0)) if n > 1 else 0.0
    var = n0 * n1 / 12.0 * ((n + 1.0) - tie_term)
    if var <= 0.0:
        return r0, 1.0
    z = (r0 - mean + 0.5) / math.sqrt(var)
    return r0, float(stats.norm.cdf(z))


def _split_halves(sample, rng, split):
    """Random halves of a population, preserving clusters when asked."""
    if split == "cluster":
        if not isinstance(sample, PopulationSample):
            raise TypeError("cluster-level split needs a PopulationSample")
        order = rng.permutation(sample.n_clusters)
        cut = (sample.n_clusters + 1) // 2
        first = np.concatenate([sample.clusters[i] for i in order[:cut]])
        second = np.concatenate([sample.clusters[i] for i in order[cut:]])
    else:
        v = _flat_values(sample)
        order = rng.permutation(v.size)
        cut = (v.size + 1) // 2
        first, second = v[order[:cut]], v[order[cut:]]
    if first.size == 0 or second.size == 0:
        raise ValueError("sample too small to split in halves")
    return first, second


def wilcoxon(sample0, sample1, variant="w1", level=0.05, seed=0, split="cluster"):
    """Wilcoxon monitoring variants against 'sample0 smaller than sample1'.

    w1 rejects when the one-sided p is below `level`; w2 uses level/2;
    w3 splits each sample into random halves (whole clusters by default),
    tests the two half-pairs, and rejects only if both p-values are
    below `level`.
    """
    if variant not in ("w1", "w2", "w3"):
        raise ValueError("variant must be one of w1, w2, w3")
    if variant in ("w1", "w2"):
        stat, p = rank_sum_p(_flat_values(sample0), _flat_values(sample1))
        cut = level if variant == "w1" else level / 2.0
        return WilcoxonResult(statistic=stat, p_value=p, variant=variant, decision=p < cut)
    rng = rng_for(seed)
    a1, a2 = _split_halves(sample0, rng, split)
    b1, b2 = _split_halves(sample1, rng, split)
    s1, p1 = rank_sum_p(a1, b1)
    s2, p2 = rank_sum_p(a2, b2)
    p = max(p1, p2)
    return WilcoxonResult(
        statistic=s1 + s2, p_value=p, variant="w3",
        decision=(p1 < level and p2 < level), halves=((s1, p1), (s2, p2)),
    )


def anova_random_effects(pop):
    """One-way random-effects ANOVA with the cluster (lot) as the factor.

    F tests H0: sigma^2_gamma = 0.  Variance components come from the
    moment equations: sigma^2_eps = MS_resid and sigma^2_gamma =
    (MS_lot - MS_resid) / d_tilde truncated at zero, with d_tilde the
    usual unbalanced-design coefficient.
    """
    sizes = pop.cluster_sizes.astype(np.float64)
    C = pop.n_clusters
    N = float(pop.n_observations)
    if C < 2:
        raise DrmError("need at least two clusters for the ANOVA screen")
    means = np.array([c.mean() for c in pop.clusters])
    grand = pop.values.mean()
    ss_lot = float(np.sum(sizes * (means - grand) ** 2))
    ss_resid = float(sum(np.sum((c - mu) ** 2) for c, mu in zip(pop.clusters, means)))
    df_lot = C - 1
    df_resid = int(N) - C
    if df_resid < 1 or ss_resid <= 0.0:
        raise DrmError("no within-cluster variation; ANOVA screen undefined")
    ms_lot = ss_lot / df_lot
    ms_resid = ss_resid / df_resid
    f_value = ms_lot / ms_resid
    p_value = float(stats.f.sf(f_value, df_lot, df_resid))
    d_tilde = (N - float(np.sum(sizes ** 2)) / N) / df_lot
    s2_gamma = max(0.0, (ms_lot - ms_resid) / d_tilde)
    return AnovaTable(
        df_lot=df_lot, df_resid=df_resid, ss_lot=ss_lot, ss_resid=ss_resid,
        ms_lot=ms_lot, ms_resid=ms_resid, f_value=f_value, p_value=p_value,
        sigma2_gamma_hat=s2_gamma, sigma2_eps_hat=ms_resid,
    )
