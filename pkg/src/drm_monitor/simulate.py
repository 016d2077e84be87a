"""Random-effects data generators and the Monte Carlo study engine.

Two cluster-correlated families are supported: a normal random effects
model (cluster intercept plus iid errors) and a multivariate gamma
model (a common gamma total scaled by iid beta fractions).  The study
engine replays the estimation / interval / testing pipelines over many
generated datasets and tabulates average mean squared errors, interval
coverage, or test rejection rates, each with Monte Carlo standard
errors.  Every replicate is a pure function of (config, seed, index).
"""

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial

import numpy as np
from scipy import special

from .baselines import empirical_quantile, rank_sum_p, wald_difference_interval, wald_interval, wilcoxon
from .basis import basis_by_name
from .bootstrap import bootstrap_quantile_samples, percentile
from .data import ClusteredDataset, PopulationSample
from .drm import fit as drm_fit, quantiles_for
from .errors import DrmError
from .rng import derive_seed, rng_for


@dataclass(frozen=True)
class NormalREConfig:
    """y = mu_k + cluster effect + error, both normal, per population k."""

    mu: tuple
    sigma2_gamma: tuple
    sigma2_eps: tuple
    n: tuple            # clusters per population
    d: int              # observations per cluster

    family = "normal"
    default_basis = "y2"

    def __post_init__(self):
        k = len(self.mu)
        if not (len(self.sigma2_gamma) == len(self.sigma2_eps) == len(self.n) == k):
            raise ValueError("per-population parameter tuples must share a length")
        if min(self.sigma2_gamma) < 0 or min(self.sigma2_eps) < 0 or self.d < 1:
            raise ValueError("variances must be >= 0 and d >= 1")


@dataclass(frozen=True)
class GammaREConfig:
    """Clusters are W * (U_1..U_d) with U ~ Beta(a_k, b) iid and
    W ~ Gamma(a_k + b, rate beta_k); marginals are Gamma(a_k, beta_k)
    and the within-cluster correlation is a_k / (a_k + b)."""

    a: tuple
    b: float
    beta: tuple
    n: tuple
    d: int

    family = "gamma"
    default_basis = "ylogy"

    def __post_init__(self):
        k = len(self.a)
        if not (len(self.beta) == len(self.n) == k):
            raise ValueError("per-population parameter tuples must share a length")
        if min(self.a) <= 0 or self.b <= 0 or min(self.beta) <= 0 or self.d < 1:
            raise ValueError("shape and rate parameters must be positive")


def gen_normal_re(cfg, seed):
    """Deterministic normal random-effects sample for the given seed."""
    rng = rng_for(seed)
    pops = []
    for k in range(len(cfg.mu)):
        nk = cfg.n[k]
        g = rng.normal(0.0, np.sqrt(cfg.sigma2_gamma[k]), size=nk)
        e = rng.normal(0.0, np.sqrt(cfg.sigma2_eps[k]), size=(nk, cfg.d))
        y = cfg.mu[k] + g[:, None] + e
        pops.append(PopulationSample(label=f"P{k}", clusters=tuple(y)))
    return ClusteredDataset(populations=tuple(pops), nominal_cluster_size=cfg.d)


def gen_gamma_re(cfg, seed):
    """Deterministic multivariate-gamma sample for the given seed."""
    rng = rng_for(seed)
    pops = []
    for k in range(len(cfg.a)):
        nk = cfg.n[k]
        u = rng.beta(cfg.a[k], cfg.b, size=(nk, cfg.d))
        w = rng.gamma(cfg.a[k] + cfg.b, 1.0 / cfg.beta[k], size=nk)
        y = w[:, None] * u
        pops.append(PopulationSample(label=f"P{k}", clusters=tuple(y)))
    return ClusteredDataset(populations=tuple(pops), nominal_cluster_size=cfg.d)


def generate(model, seed):
    if isinstance(model, NormalREConfig):
        return gen_normal_re(model, seed)
    if isinstance(model, GammaREConfig):
        return gen_gamma_re(model, seed)
    raise TypeError(f"unknown model config {type(model).__name__}")


def true_quantiles(model, alpha):
    """Population quantiles implied by the model parameters.

    Normal family: mu + z_alpha * total sd.  Gamma family: the
    Gamma(a_k, rate beta_k) quantile via the inverse regularized
    incomplete gamma function.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if isinstance(model, NormalREConfig):
        z = special.ndtri(alpha)
        sd = np.sqrt(np.asarray(model.sigma2_gamma) + np.asarray(model.sigma2_eps))
        return np.asarray(model.mu) + z * sd
    if isinstance(model, GammaREConfig):
        return special.gammaincinv(np.asarray(model.a), alpha) / np.asarray(model.beta)
    raise TypeError(f"unknown model config {type(model).__name__}")


_DEFAULT_METHODS = {
    "amse": ("cel", "emp"),
    "coverage": ("cel", "wald"),
    "power": ("cel", "w1", "w2", "w3"),
}


@dataclass(frozen=True)
class StudyConfig:
    model: object
    study: str
    alphas: tuple = (0.05, 0.10)
    R: int = 2000
    B: int = 999
    gamma: float = 0.05
    seed: int = 0
    methods: tuple = None
    basis_name: str = None

    def __post_init__(self):
        if self.study not in _DEFAULT_METHODS:
            raise ValueError(f"study must be one of {sorted(_DEFAULT_METHODS)}")
        if self.R < 1:
            raise ValueError("R must be at least 1")
        if self.methods is None:
            object.__setattr__(self, "methods", _DEFAULT_METHODS[self.study])
        if self.basis_name is None:
            object.__setattr__(self, "basis_name", self.model.default_basis)


def _targets(m):
    """Rows of the AMSE / coverage tables: baseline quantile, the shifted
    populations' quantiles, and all differences against the baseline."""
    return [("xi", 0)] + [("xi", r) for r in range(2, m + 1)] + [("dxi", r) for r in range(1, m + 1)]


def _target_label(kind, r):
    return f"xi{r}" if kind == "xi" else f"dxi0{r}"


def _target_value(kind, r, quantile_matrix):
    if kind == "xi":
        return quantile_matrix[r]
    return quantile_matrix[0] - quantile_matrix[r]


def _amse_replicate(cfg, basis, t):
    ds = generate(cfg.model, derive_seed(cfg.seed, t, 0))
    try:
        f = drm_fit(ds, basis)
    except DrmError:
        return None
    alphas = list(cfg.alphas)
    cel = quantiles_for(f, alphas)
    emp = np.array([[empirical_quantile(p.values, a) for a in alphas] for p in ds.populations])
    return {"cel": cel, "emp": emp}


def _coverage_replicate(cfg, basis, t):
    ds = generate(cfg.model, derive_seed(cfg.seed, t, 0))
    try:
        f = drm_fit(ds, basis)
        samples, _ = bootstrap_quantile_samples(
            ds, basis, cfg.alphas, cfg.B, derive_seed(cfg.seed, t, 1), fit=f,
        )
    except DrmError:
        return None
    m = ds.m
    targets = _targets(m)
    g = cfg.gamma
    out = {}
    for method in cfg.methods:
        cover = np.zeros((len(targets), len(cfg.alphas)), dtype=bool)
        for j, alpha in enumerate(cfg.alphas):
            truth = true_quantiles(cfg.model, alpha)
            for i, (kind, r) in enumerate(targets):
                tv = truth[r] if kind == "xi" else truth[0] - truth[r]
                if method == "cel":
                    reps = _target_value(kind, r, samples[:, :, j].T)
                    lo, hi = percentile(reps, g / 2.0), percentile(reps, 1.0 - g / 2.0)
                elif method == "wald":
                    if kind == "xi":
                        w = wald_interval(ds.populations[r], alpha, g)
                    else:
                        w = wald_difference_interval(ds.populations[0], ds.populations[r], alpha, g)
                    lo, hi = w.ci
                else:
                    raise ValueError(f"method {method!r} not available in coverage studies")
                cover[i, j] = lo <= tv <= hi
        out[method] = cover
    return out


def _power_replicate(cfg, basis, t):
    ds = generate(cfg.model, derive_seed(cfg.seed, t, 0))
    need_boot = "cel" in cfg.methods
    samples = None
    try:
        if need_boot:
            f = drm_fit(ds, basis)
            samples, _ = bootstrap_quantile_samples(
                ds, basis, cfg.alphas, cfg.B, derive_seed(cfg.seed, t, 1), fit=f,
            )
    except DrmError:
        return None
    m = ds.m
    g = cfg.gamma
    out = {}
    for method in cfg.methods:
        rej = np.zeros((m, len(cfg.alphas)), dtype=bool)
        for i, r in enumerate(range(1, m + 1)):
            if method == "cel":
                for j in range(len(cfg.alphas)):
                    phi = samples[:, 0, j] - samples[:, r, j]
                    rej[i, j] = percentile(phi, g) > 0.0
            elif method in ("w1", "w2"):
                _, p = rank_sum_p(ds.populations[r].values, ds.populations[0].values)
                rej[i, :] = p < (g if method == "w1" else g / 2.0)
            elif method == "w3":
                res = wilcoxon(
                    ds.populations[r], ds.populations[0], variant="w3",
                    level=g, seed=derive_seed(cfg.seed, t, 2, r),
                )
                rej[i, :] = res.decision
            else:
                raise ValueError(f"method {method!r} not available in power studies")
        out[method] = rej
    return out


_REPLICATE = {
    "amse": _amse_replicate,
    "coverage": _coverage_replicate,
    "power": _power_replicate,
}


def _run_replicates(cfg, basis, threads):
    worker = partial(_REPLICATE[cfg.study], cfg, basis)
    if threads and threads > 1:
        chunk = max(1, cfg.R // (threads * 8))
        with ProcessPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(worker, range(cfg.R), chunksize=chunk))
    return [worker(t) for t in range(cfg.R)]


@dataclass(frozen=True, eq=False)
class StudyReport:
    study: str
    model: dict
    basis: str
    alphas: tuple
    R: int
    R_used: int
    B: int
    gamma: float
    seed: int
    n_failed: int
    methods: tuple
    cells: dict
    truth: dict
    elapsed_sec: float = field(compare=False)

    def to_dict(self, include_timing=True):
        out = {
            "study": self.study,
            "model": self.model,
            "basis": self.basis,
            "alphas": list(self.alphas),
            "R": self.R,
            "R_used": self.R_used,
            "B": self.B,
            "gamma": self.gamma,
            "seed": self.seed,
            "n_failed": self.n_failed,
            "methods": list(self.methods),
            "truth": self.truth,
            "cells": self.cells,
        }
        if include_timing:
            out["elapsed_sec"] = self.elapsed_sec
        return out


def _model_dict(model):
    out = {"family": model.family, "n": list(model.n), "d": model.d}
    if isinstance(model, NormalREConfig):
        out.update(mu=list(model.mu), sigma2_gamma=list(model.sigma2_gamma),
                   sigma2_eps=list(model.sigma2_eps))
    else:
        out.update(a=list(model.a), b=model.b, beta=list(model.beta))
    return out


def run_study(cfg, threads=1):
    """Run the configured Monte Carlo study; deterministic given cfg.seed.

    Replicates whose composite EL fit (or bootstrap) fails are dropped
    and counted; more than 1% failures aborts with an error.
    """
    t0 = time.perf_counter()
    basis = basis_by_name(cfg.basis_name)
    results = _run_replicates(cfg, basis, threads)
    kept = [r for r in results if r is not None]
    n_failed = cfg.R - len(kept)
    if n_failed > 0.01 * cfg.R:
        raise DrmError(f"{n_failed} of {cfg.R} study replicates failed to fit")
    if not kept:
        raise DrmError("every study replicate failed")
    R_used = len(kept)
    m = len(cfg.model.n) - 1
    alphas = list(cfg.alphas)
    truth = {
        str(a): {_target_label(kind, r): float(_scalar_truth(cfg.model, kind, r, a))
                 for kind, r in _targets(m)}
        for a in alphas
    }
    if cfg.study == "amse":
        cells = _reduce_amse(cfg, kept, m)
    elif cfg.study == "coverage":
        cells = _reduce_rates(cfg, kept, [_target_label(k, r) for k, r in _targets(m)], "coverage_pct")
    else:
        cells = _reduce_rates(cfg, kept, [f"H{r}0" for r in range(1, m + 1)], "rejection_pct")
    return StudyReport(
        study=cfg.study, model=_model_dict(cfg.model), basis=cfg.basis_name,
        alphas=cfg.alphas, R=cfg.R, R_used=R_used, B=cfg.B, gamma=cfg.gamma,
        seed=cfg.seed, n_failed=n_failed, methods=cfg.methods, cells=cells,
        truth=truth, elapsed_sec=time.perf_counter() - t0,
    )


def _scalar_truth(model, kind, r, alpha):
    tq = true_quantiles(model, alpha)
    return tq[r] if kind == "xi" else tq[0] - tq[r]


def _reduce_amse(cfg, kept, m):
    targets = _targets(m)
    cells = {}
    for method in cfg.methods:
        per_target = {}
        for i, (kind, r) in enumerate(targets):
            per_alpha = {}
            for j, alpha in enumerate(cfg.alphas):
                tv = _scalar_truth(cfg.model, kind, r, alpha)
                sq = np.array([
                    (_target_value(kind, r, rep[method][:, j]) - tv) ** 2 for rep in kept
                ]) * 100.0
                per_alpha[str(alpha)] = {
                    "amse": float(sq.mean()),
                    "se": float(sq.std(ddof=1) / np.sqrt(sq.size)) if sq.size > 1 else 0.0,
                }
            per_target[_target_label(kind, r)] = per_alpha
        cells[method] = per_target
    return cells


def _reduce_rates(cfg, kept, row_labels, value_key):
    cells = {}
    for method in cfg.methods:
        per_row = {}
        for i, label in enumerate(row_labels):
            per_alpha = {}
            for j, alpha in enumerate(cfg.alphas):
                hits = np.array([rep[method][i, j] for rep in kept], dtype=np.float64)
                p = float(hits.mean())
                per_alpha[str(alpha)] = {
                    value_key: 100.0 * p,
                    "se_pct": 100.0 * float(np.sqrt(p * (1.0 - p) / hits.size)),
                }
            per_row[label] = per_alpha
        cells[method] = per_row
    return cells
