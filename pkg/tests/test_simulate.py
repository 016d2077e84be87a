"""Generators, model quantiles, and the study engine."""

import numpy as np
import pytest
from scipy import stats

from drm_monitor.presets import make_study_config, preset_names
from drm_monitor.simulate import (
    GammaREConfig, NormalREConfig, StudyConfig, gen_gamma_re, gen_normal_re,
    run_study, true_quantiles,
)

NORMAL4 = NormalREConfig(
    mu=(15.5, 15.5, 14.7, 14.0),
    sigma2_gamma=(1.44, 1.44, 1.0, 1.0),
    sigma2_eps=(4.0, 4.0, 4.0, 4.0),
    n=(25, 30, 40, 40), d=5,
)
GAMMA4 = GammaREConfig(a=(8.0, 8.0, 7.0, 6.0), b=14.0, beta=(1.0, 1.0, 1.05, 1.1),
                       n=(25, 30, 40, 40), d=5)


def test_generators_deterministic():
    a = gen_normal_re(NORMAL4, 7)
    b = gen_normal_re(NORMAL4, 7)
    assert (a.values == b.values).all()
    c = gen_normal_re(NORMAL4, 8)
    assert not (a.values == c.values).all()
    g1 = gen_gamma_re(GAMMA4, 7)
    g2 = gen_gamma_re(GAMMA4, 7)
    assert (g1.values == g2.values).all()


def test_generator_shapes():
    ds = gen_normal_re(NORMAL4, 3)
    assert ds.m == 3
    assert list(ds.n_clusters) == [25, 30, 40, 40]
    assert (ds.cluster_sizes == 5).all()
    ds2 = gen_gamma_re(GAMMA4, 3)
    assert ds2.n_observations == (25 + 30 + 40 + 40) * 5
    assert (ds2.values > 0).all()


def test_zero_variance_collapses_to_means():
    cfg = NormalREConfig(mu=(15.5, 14.0), sigma2_gamma=(0.0, 0.0),
                         sigma2_eps=(0.0, 0.0), n=(3, 4), d=2)
    ds = gen_normal_re(cfg, 0)
    assert (ds.populations[0].values == 15.5).all()
    assert (ds.populations[1].values == 14.0).all()


def test_normal_intraclass_correlation():
    # population 0: rho_icc = 1.44 / (1.44 + 4) at many clusters
    cfg = NormalREConfig(mu=(15.5,), sigma2_gamma=(1.44,), sigma2_eps=(4.0,),
                         n=(100_000,), d=2)
    ds = gen_normal_re(cfg, 11)
    pairs = ds.values.reshape(-1, 2)
    icc = np.corrcoef(pairs[:, 0], pairs[:, 1])[0, 1]
    assert icc == pytest.approx(1.44 / 5.44, abs=0.01)


def test_normal_marginal_distribution():
    cfg = NormalREConfig(mu=(15.5,), sigma2_gamma=(1.44,), sigma2_eps=(4.0,),
                         n=(20_000,), d=5)
    ds = gen_normal_re(cfg, 13)
    ks = stats.kstest(ds.values, stats.norm(loc=15.5, scale=np.sqrt(5.44)).cdf)
    assert ks.statistic < 0.01


def test_gamma_within_cluster_correlation():
    cfg = GammaREConfig(a=(8.0,), b=14.0, beta=(1.0,), n=(100_000,), d=2)
    ds = gen_gamma_re(cfg, 17)
    pairs = ds.values.reshape(-1, 2)
    corr = np.corrcoef(pairs[:, 0], pairs[:, 1])[0, 1]
    assert corr == pytest.approx(8.0 / 22.0, abs=0.01)


def test_gamma_marginal_moments():
    cfg = GammaREConfig(a=(8.0,), b=14.0, beta=(2.0,), n=(50_000,), d=2)
    ds = gen_gamma_re(cfg, 19)
    v = ds.values
    se = v.std() / np.sqrt(v.size)
    assert abs(v.mean() - 8.0 / 2.0) < 3 * se
    # second moment of a gamma(8, rate 2): a(a+1)/rate^2
    m2 = (v ** 2).mean()
    se2 = (v ** 2).std() / np.sqrt(v.size)
    assert abs(m2 - 8.0 * 9.0 / 4.0) < 3 * se2


def test_gamma_large_b_loses_correlation():
    cfg = GammaREConfig(a=(8.0,), b=1e6, beta=(1.0,), n=(100_000,), d=2)
    ds = gen_gamma_re(cfg, 23)
    pairs = ds.values.reshape(-1, 2)
    corr = np.corrcoef(pairs[:, 0], pairs[:, 1])[0, 1]
    assert abs(corr) < 0.01


def test_true_quantiles_normal():
    q = true_quantiles(NORMAL4, 0.5)
    np.testing.assert_allclose(q, [15.5, 15.5, 14.7, 14.0], atol=1e-12)
    q05 = true_quantiles(NORMAL4, 0.05)
    assert q05[0] == q05[1]  # identical parameter populations
    sd = np.sqrt(5.44)
    assert q05[0] == pytest.approx(15.5 - 1.6448536269514722 * sd, rel=1e-10)


def test_true_quantiles_gamma_against_monte_carlo():
    rng = np.random.default_rng(5)
    draws = rng.gamma(8.0, 1.0, size=10_000_000)
    mc = np.quantile(draws, 0.05)
    cfg = GammaREConfig(a=(8.0,), b=14.0, beta=(1.0,), n=(2,), d=2)
    assert true_quantiles(cfg, 0.05)[0] == pytest.approx(mc, abs=0.005)


def test_population_exchangeability_under_matched_parameters():
    # populations 0 and 1 share distribution parameters; swapping their
    # slots in the config (sizes included) must leave the sampling
    # distribution of any per-population summary unchanged
    swapped = NormalREConfig(
        mu=(15.5, 15.5, 14.7, 14.0),
        sigma2_gamma=(1.44, 1.44, 1.0, 1.0),
        sigma2_eps=(4.0, 4.0, 4.0, 4.0),
        n=(30, 25, 40, 40), d=5,
    )
    q_direct, q_swapped = [], []
    for seed in range(80):
        q_direct.append(np.quantile(gen_normal_re(NORMAL4, seed).populations[0].values, 0.05))
        q_swapped.append(np.quantile(gen_normal_re(swapped, 1000 + seed).populations[1].values, 0.05))
    ks = stats.ks_2samp(q_direct, q_swapped)
    assert ks.pvalue > 0.01


# --------------------------------------------------------------- study engine


def test_run_study_single_replicate_complete():
    cfg = StudyConfig(model=NORMAL4, study="amse", alphas=(0.05,), R=1, B=9, seed=1)
    rep = run_study(cfg)
    assert rep.R_used == 1 and rep.n_failed == 0
    assert set(rep.cells) == {"cel", "emp"}
    for target in ("xi0", "xi2", "xi3", "dxi01", "dxi02", "dxi03"):
        cell = rep.cells["cel"][target]["0.05"]
        assert cell["amse"] >= 0.0
        assert "se" in cell
    d = rep.to_dict()
    assert "elapsed_sec" in d
    assert "elapsed_sec" not in rep.to_dict(include_timing=False)


def test_amse_study_has_se_everywhere_and_cel_wins():
    cfg = StudyConfig(model=NORMAL4, study="amse", alphas=(0.05, 0.10), R=120, seed=3)
    rep = run_study(cfg)
    for method, rows in rep.cells.items():
        for target, per_alpha in rows.items():
            for a, cell in per_alpha.items():
                assert cell["se"] > 0
    # headline effect at modest replication: pooled-information quantiles
    # beat raw empirical quantiles for the baseline population
    assert rep.cells["cel"]["xi0"]["0.05"]["amse"] < rep.cells["emp"]["xi0"]["0.05"]["amse"]


def test_coverage_study_smoke():
    cfg = StudyConfig(model=NORMAL4, study="coverage", alphas=(0.05,), R=12, B=99, seed=4)
    rep = run_study(cfg)
    for method in ("cel", "wald"):
        for target, per_alpha in rep.cells[method].items():
            val = per_alpha["0.05"]["coverage_pct"]
            assert 0.0 <= val <= 100.0


def test_power_study_smoke_and_determinism():
    cfg = StudyConfig(model=NORMAL4, study="power", alphas=(0.05,), R=6, B=59, seed=5)
    rep1 = run_study(cfg, threads=1)
    rep2 = run_study(cfg, threads=2)
    assert rep1.cells == rep2.cells
    assert set(rep1.cells) == {"cel", "w1", "w2", "w3"}
    assert set(rep1.cells["cel"]) == {"H10", "H20", "H30"}


def test_counterexample_presets_build():
    names = preset_names()
    assert "counterexample1" in names and "table5-block1" in names
    cfg = make_study_config("counterexample1", R=2, B=19, seed=1)
    assert cfg.model.d == 10
    assert cfg.model.family == "gamma"
    assert cfg.alphas == (0.05, 0.10)
    cfg2 = make_study_config("table1-block3", d=10, R=5)
    assert cfg2.model.n == (38, 45, 60, 60)
    assert cfg2.model.d == 10
    assert cfg2.study == "amse"
    with pytest.raises(KeyError):
        make_study_config("table9-block1")


def test_preset_study_types():
    assert make_study_config("table3-block2").study == "coverage"
    assert make_study_config("table6-block4").study == "power"
    g = make_study_config("table4-block2").model
    assert g.family == "gamma" and g.b == 63.0
    n = make_study_config("table5-block2").model
    assert n.family == "normal" and n.sigma2_gamma == (0.36, 0.36, 0.25, 0.25)


def test_study_failure_accounting(monkeypatch):
    import drm_monitor.simulate as sim

    calls = {"n": 0}
    real = sim._amse_replicate

    def flaky(cfg, basis, t):
        calls["n"] += 1
        return None if t == 0 else real(cfg, basis, t)

    monkeypatch.setattr(sim, "_REPLICATE", {**sim._REPLICATE, "amse": flaky})
    cfg = StudyConfig(model=NORMAL4, study="amse", alphas=(0.05,), R=10, seed=6)
    with pytest.raises(Exception, match="failed"):
        run_study(cfg)
    cfg = StudyConfig(model=NORMAL4, study="amse", alphas=(0.05,), R=200, seed=6)
    rep = run_study(cfg)
    assert rep.n_failed == 1 and rep.R_used == 199
