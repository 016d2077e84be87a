"""Named parameter blocks for the Monte Carlo studies.

Preset ids follow the report tables: table1/table2 are AMSE studies
(normal / gamma families), table3/table4 interval coverage, and
table5/table6 monitoring-test rejection rates; blocks 1-4 cycle the
sample-size and dependence settings.  The two counterexample presets
are the two-population designs where rank tests and quantile tests
disagree.
"""

from .simulate import GammaREConfig, NormalREConfig, StudyConfig

_N_SMALL = (25, 30, 40, 40)
_N_LARGE = (38, 45, 60, 60)
_MU = (15.5, 15.5, 14.7, 14.0)
_S2G_HIGH = (1.44, 1.44, 1.00, 1.00)
_S2G_LOW = (0.36, 0.36, 0.25, 0.25)
_S2E = (4.0, 4.0, 4.0, 4.0)
_A = (8.0, 8.0, 7.0, 6.0)
_BETA = (1.0, 1.0, 1.05, 1.1)


def _normal_block(i):
    n = _N_SMALL if i in (1, 2) else _N_LARGE
    s2g = _S2G_HIGH if i in (1, 3) else _S2G_LOW
    return lambda d: NormalREConfig(mu=_MU, sigma2_gamma=s2g, sigma2_eps=_S2E, n=n, d=d)


def _gamma_block(i):
    n = _N_SMALL if i in (1, 2) else _N_LARGE
    b = 14.0 if i in (1, 3) else 63.0
    return lambda d: GammaREConfig(a=_A, b=b, beta=_BETA, n=n, d=d)


_PRESETS = {}
for _i in range(1, 5):
    _PRESETS[f"table1-block{_i}"] = ("amse", _normal_block(_i), (0.05, 0.10), 5)
    _PRESETS[f"table2-block{_i}"] = ("amse", _gamma_block(_i), (0.05, 0.10), 5)
    _PRESETS[f"table3-block{_i}"] = ("coverage", _normal_block(_i), (0.05, 0.10), 5)
    _PRESETS[f"table4-block{_i}"] = ("coverage", _gamma_block(_i), (0.05, 0.10), 5)
    _PRESETS[f"table5-block{_i}"] = ("power", _normal_block(_i), (0.05,), 5)
    _PRESETS[f"table6-block{_i}"] = ("power", _gamma_block(_i), (0.05,), 5)

_PRESETS["counterexample1"] = (
    "power",
    lambda d: GammaREConfig(a=(8.0, 16.0), b=63.0, beta=(1.05, 2.511), n=(40, 40), d=d),
    (0.05, 0.10),
    10,
)
_PRESETS["counterexample2"] = (
    "power",
    lambda d: NormalREConfig(mu=(15.5, 15.5), sigma2_gamma=(0.1, 0.2),
                             sigma2_eps=(0.9, 1.8), n=(40, 40), d=d),
    (0.05, 0.10),
    10,
)


def preset_names():
    return sorted(_PRESETS)


def make_study_config(preset, *, d=None, R=2000, B=999, gamma=0.05, seed=0,
                      methods=None, alphas=None):
    """Instantiate a named preset as a runnable StudyConfig."""
    if preset not in _PRESETS:
        raise KeyError(f"unknown preset {preset!r}; choose from {preset_names()}")
    study, build, default_alphas, default_d = _PRESETS[preset]
    model = build(default_d if d is None else int(d))
    return StudyConfig(
        model=model, study=study,
        alphas=tuple(alphas) if alphas is not None else default_alphas,
        R=R, B=B, gamma=gamma, seed=seed,
        methods=tuple(methods) if methods is not None else None,
    )
