"""Command line interface: fit, test, anova, and simulate workflows.

Every run emits a JSON report (or a plain-text table with
--format table) that embeds a provenance manifest.  Exit codes:
0 success, 1 usage error, 2 data or convergence error.
"""

import argparse
import csv
import os
import sys
import time

import numpy as np

from . import __version__
from .baselines import anova_random_effects, wald_difference_interval, wilcoxon
from .basis import basis_by_name
from .bootstrap import BootstrapPlan, bootstrap_quantile_samples, monitoring_test
from .covariance import estimate_components, quantile_covariance
from .data import load_csv, validate
from .drm import fit as drm_fit, fitted_cdf, quantiles_for
from .errors import DrmError
from .presets import make_study_config, preset_names
from .report import file_digest, manifest, params_digest, write_report
from .simulate import run_study

_PHI_ALIASES = {"diff": "difference", "difference": "difference", "ratio": "ratio", "single": "single"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _alpha_list(text):
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot parse alpha list {text!r}")
    if not vals or not all(0.0 < a < 1.0 for a in vals):
        raise argparse.ArgumentTypeError("alpha values must lie in (0, 1)")
    return vals


def _default_threads():
    env = os.environ.get("DRM_MONITOR_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def _add_common(sp):
    sp.add_argument("--out", default="-", help="report path, or - for stdout")
    sp.add_argument("--quiet", action="store_true", help="suppress progress messages")
    sp.add_argument("--no-timing", action="store_true",
                    help="omit timing fields (canonical output for determinism checks)")
    sp.add_argument("--threads", type=int, default=None,
                    help="worker pool size (default: DRM_MONITOR_THREADS or hardware)")
    sp.add_argument("--serial", action="store_true", help="single-process execution")
    sp.add_argument("--format", choices=("json", "table"), default="json")


def build_parser():
    p = _Parser(prog="drm-monitor", description=__doc__)
    p.add_argument("--version", action="version", version=f"drm-monitor {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit the density ratio model and report quantiles")
    f.add_argument("--input", required=True)
    f.add_argument("--basis", default="logy",
                   help="comma-separated basis names from {y2,ylogy,logy,logy2}")
    f.add_argument("--alpha", type=_alpha_list, default=[0.05, 0.10])
    f.add_argument("--baseline", default=None, help="population label to use as baseline")
    f.add_argument("--dump-cdf", default=None, help="write fitted CDF tables to this CSV")
    f.add_argument("--diagnostics", action="store_true",
                   help="append plug-in quantile variances and bootstrap ratio")
    f.add_argument("--B", type=int, default=500, help="bootstrap size for --diagnostics")
    f.add_argument("--seed", type=int, default=0)
    _add_common(f)

    t = sub.add_parser("test", help="monitoring test for a quantile functional")
    t.add_argument("--input", required=True)
    t.add_argument("--basis", default="logy")
    t.add_argument("--alpha", type=float, default=0.05)
    t.add_argument("--phi", choices=sorted(_PHI_ALIASES), default="diff")
    t.add_argument("--pop0", required=True, help="label of the reference population (r)")
    t.add_argument("--pop1", required=True, help="label of the monitored population (s)")
    t.add_argument("--gamma", type=float, default=0.05)
    t.add_argument("--B", type=int, default=9999)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--sided", choices=("one", "two"), default="one")
    t.add_argument("--method", choices=("cel", "wald", "w1", "w2", "w3"), default="cel")
    t.add_argument("--baseline", default=None)
    _add_common(t)

    a = sub.add_parser("anova", help="random-effects ANOVA screen per population")
    a.add_argument("--input", required=True)
    a.add_argument("--population", default=None, help="restrict to one population label")
    _add_common(a)

    s = sub.add_parser("simulate", help="Monte Carlo studies from named presets")
    s.add_argument("--study", default=None,
                   choices=("amse", "coverage", "power", "counterexample1", "counterexample2"))
    s.add_argument("--model", default=None, choices=("normal", "gamma"))
    s.add_argument("--preset", default=None, help=f"one of {', '.join(preset_names())}")
    s.add_argument("--d", type=int, default=None, help="cluster size (default: preset's)")
    s.add_argument("--R", type=int, default=2000)
    s.add_argument("--B", type=int, default=999)
    s.add_argument("--gamma", type=float, default=0.05)
    s.add_argument("--alpha", type=_alpha_list, default=None, help="override preset alphas")
    s.add_argument("--methods", default=None, help="comma-separated method subset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--full", action="store_true", help="full-scale run: R=10000")
    _add_common(s)
    return p


def _threads(args):
    if args.serial:
        return 1
    if args.threads is not None:
        return max(1, args.threads)
    return _default_threads()


def _say(args, msg):
    if not args.quiet:
        print(msg, file=sys.stderr)


def _cmd_fit(args):
    started = time.perf_counter()
    ds = load_csv(args.input, baseline=args.baseline)
    names = [b.strip() for b in args.basis.split(",") if b.strip()]
    blocks = []
    cdf_rows = []
    for name in names:
        basis = basis_by_name(name)
        diags = validate(ds, basis)
        f = drm_fit(ds, basis)
        quants = quantiles_for(f, args.alpha)
        block = {
            "basis": name,
            "theta": {ds.labels[r + 1]: [float(x) for x in f.theta[r]] for r in range(f.m)},
            "loglik": f.loglik,
            "convergence": {
                "converged": f.converged,
                "iterations": f.iterations,
                "gradient_norm": f.gradient_norm,
                "tolerance": 1e-8 * ds.n_observations,
            },
            "quantiles": {
                str(a): {ds.labels[r]: float(quants[r, j]) for r in range(f.m + 1)}
                for j, a in enumerate(args.alpha)
            },
            "warnings": [{"code": d.code, "message": d.message} for d in diags],
        }
        if args.diagnostics:
            comp = estimate_components(ds, f)
            n = int(ds.n_clusters.sum())
            diag_block = {}
            for a in args.alpha:
                qc = quantile_covariance(comp, a)
                samples, n_failed = bootstrap_quantile_samples(
                    ds, basis, [a], args.B, args.seed, fit=f, threads=_threads(args))
                boot_var = np.var(samples[:, :, 0], axis=0, ddof=1)
                diag_block[str(a)] = {
                    "n_failed": n_failed,
                    "per_population": {
                        ds.labels[r]: {
                            "sigma_rr": float(qc.sigma[r, r]),
                            "plugin_var": float(qc.sigma[r, r] / n),
                            "bootstrap_var": float(boot_var[r]),
                            "bootstrap_over_plugin": float(boot_var[r] / (qc.sigma[r, r] / n)),
                            "density_at_quantile": float(qc.density[r]),
                        }
                        for r in range(f.m + 1)
                    },
                }
            block["diagnostics"] = {"B": args.B, "per_alpha": diag_block}
        blocks.append(block)
        if args.dump_cdf:
            for r in range(f.m + 1):
                cdf = fitted_cdf(f, r)
                cum = 0.0
                for v, mass in zip(cdf.support, cdf.mass):
                    cum += float(mass)
                    cdf_rows.append([name, ds.labels[r], repr(float(v)), repr(float(mass)), repr(cum)])
    if args.dump_cdf:
        with open(args.dump_cdf, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["basis", "population", "value", "mass", "cdf"])
            w.writerows(cdf_rows)
    report = {
        "manifest": manifest(
            "fit",
            {"input": args.input, "basis": names, "alpha": args.alpha,
             "baseline": args.baseline, "diagnostics": args.diagnostics},
            seed=args.seed, input_digest=file_digest(args.input),
            started=started, include_timing=not args.no_timing),
        "populations": ds.labels,
        "n_clusters": [int(x) for x in ds.n_clusters],
        "n_observations": ds.n_observations,
        "fits": blocks,
    }
    _emit(args, report, _fit_table)
    return 0


def _cmd_test(args):
    started = time.perf_counter()
    ds = load_csv(args.input, baseline=args.baseline)
    basis = basis_by_name(args.basis)
    labels = ds.labels
    for lab in (args.pop0, args.pop1):
        if lab not in labels:
            raise DrmError(f"{args.input}: no population labelled {lab!r}")
    r, s = labels.index(args.pop0), labels.index(args.pop1)
    phi = _PHI_ALIASES[args.phi]
    threads = _threads(args)
    common = {
        "input": args.input, "basis": args.basis, "alpha": args.alpha,
        "phi": phi, "pop0": args.pop0, "pop1": args.pop1,
        "gamma": args.gamma, "B": args.B, "sided": args.sided,
        "method": args.method, "baseline": args.baseline,
    }
    if args.method == "cel":
        plan = BootstrapPlan(B=args.B, seed=args.seed, gamma=args.gamma,
                             phi=phi, r=r, s=s, alpha=args.alpha)
        res = monitoring_test(ds, basis, plan, sided=args.sided, threads=threads)
        body = {
            "hypothesis": res.hypothesis,
            "decision": res.decision,
            "point_estimate": res.result.point,
            "ci_two_sided": list(res.result.ci_two_sided),
            "ci_one_sided_lower": res.result.ci_one_sided_lower,
            "p_value_one_sided": res.result.p_value_one_sided,
            "n_failed": res.result.n_failed,
        }
    elif args.method == "wald":
        if phi != "difference":
            raise DrmError("the wald comparator supports only the difference functional")
        w = wald_difference_interval(ds.populations[r], ds.populations[s],
                                     args.alpha, args.gamma)
        zgap = w.ci[1] - w.estimate  # z_{1-gamma/2} * sd
        sd = zgap / _z(1.0 - args.gamma / 2.0)
        if args.sided == "one":
            lower = w.estimate - _z(1.0 - args.gamma) * sd
            reject = lower > 0.0
            ci = [lower, None]
        else:
            reject = not (w.ci[0] <= 0.0 <= w.ci[1])
            ci = list(w.ci)
        body = {
            "hypothesis": {"null": "xi difference <= 0" if args.sided == "one" else "xi difference = 0"},
            "decision": "reject" if reject else "fail-to-reject",
            "point_estimate": w.estimate,
            "variance": w.variance,
            "ci": ci,
        }
    else:
        if args.sided == "two":
            raise DrmError("Wilcoxon comparators are one-sided monitoring tests")
        res = wilcoxon(ds.populations[s], ds.populations[r], variant=args.method,
                       level=args.gamma, seed=args.seed)
        body = {
            "hypothesis": {"null": f"{args.pop1} not stochastically smaller than {args.pop0}"},
            "decision": "reject" if res.decision else "fail-to-reject",
            "statistic": res.statistic,
            "p_value": res.p_value,
        }
    report = {
        "manifest": manifest("test", common, seed=args.seed,
                             input_digest=file_digest(args.input),
                             started=started, include_timing=not args.no_timing),
        **body,
    }
    _emit(args, report, _test_table)
    return 0


def _z(p):
    from scipy.stats import norm

    return float(norm.ppf(p))


def _cmd_anova(args):
    started = time.perf_counter()
    ds = load_csv(args.input)
    pops = ds.populations
    if args.population is not None:
        pops = [ds.population(args.population)]
    tables = {}
    for p in pops:
        t = anova_random_effects(p)
        tables[p.label] = {
            "df": [t.df_lot, t.df_resid],
            "sum_sq": [t.ss_lot, t.ss_resid],
            "mean_sq": [t.ms_lot, t.ms_resid],
            "f_value": t.f_value,
            "p_value": t.p_value,
            "sigma2_gamma_hat": t.sigma2_gamma_hat,
            "sigma2_eps_hat": t.sigma2_eps_hat,
        }
    report = {
        "manifest": manifest("anova", {"input": args.input, "population": args.population},
                             input_digest=file_digest(args.input),
                             started=started, include_timing=not args.no_timing),
        "anova": tables,
    }
    _emit(args, report, _anova_table)
    return 0


def _cmd_simulate(args):
    started = time.perf_counter()
    preset = args.preset
    if preset is None:
        if args.study in ("counterexample1", "counterexample2"):
            preset = args.study
        else:
            return _usage_error("simulate needs --preset (or --study counterexample1/2)")
    if args.study in ("counterexample1", "counterexample2") and preset != args.study:
        return _usage_error("--study and --preset disagree")
    try:
        cfg = make_study_config(
            preset, d=args.d, R=10000 if args.full else args.R, B=args.B,
            gamma=args.gamma, seed=args.seed,
            methods=args.methods.split(",") if args.methods else None,
            alphas=args.alpha,
        )
    except KeyError as e:
        return _usage_error(str(e))
    if args.study in ("amse", "coverage", "power") and cfg.study != args.study:
        return _usage_error(f"preset {preset!r} is a {cfg.study} study, not {args.study}")
    if args.model is not None and cfg.model.family != args.model:
        return _usage_error(f"preset {preset!r} uses the {cfg.model.family} model")
    _say(args, f"running {cfg.study} study preset={preset} R={cfg.R} B={cfg.B} "
               f"d={cfg.model.d} seed={cfg.seed}")
    rep = run_study(cfg, threads=_threads(args))
    params = {"preset": preset, "d": cfg.model.d, "R": cfg.R, "B": cfg.B,
              "gamma": cfg.gamma, "alphas": list(cfg.alphas),
              "methods": list(cfg.methods)}
    report = {
        "manifest": manifest("simulate", params, seed=args.seed,
                             input_digest=params_digest(params | {"seed": args.seed}),
                             started=started, include_timing=not args.no_timing),
        "report": rep.to_dict(include_timing=not args.no_timing),
    }
    _emit(args, report, _simulate_table)
    return 0


def _usage_error(msg):
    print(f"drm-monitor: error: {msg}", file=sys.stderr)
    return 1


def _fmt(x, nd=4):
    return f"{x:.{nd}f}" if isinstance(x, float) else str(x)


def _fit_table(report):
    lines = []
    for block in report["fits"]:
        lines.append(f"basis: {block['basis']}   loglik: {_fmt(block['loglik'])}")
        for lab, th in block["theta"].items():
            lines.append(f"  theta[{lab}]: " + "  ".join(_fmt(x, 6) for x in th))
        for a, per_pop in block["quantiles"].items():
            row = "  ".join(f"{lab}={_fmt(v)}" for lab, v in per_pop.items())
            lines.append(f"  quantile alpha={a}: {row}")
    return "\n".join(lines) + "\n"


def _test_table(report):
    lines = [f"decision: {report['decision']}"]
    for key in ("point_estimate", "p_value_one_sided", "p_value", "ci_two_sided",
                "ci_one_sided_lower", "statistic"):
        if key in report:
            lines.append(f"{key}: {report[key]}")
    return "\n".join(lines) + "\n"


def _anova_table(report):
    lines = []
    for label, t in report["anova"].items():
        lines.append(f"{label} sample")
        lines.append(f"{'':12s}{'Df':>6s}{'Sum Sq':>10s}{'Mean Sq':>10s}{'F-value':>10s}{'P-value':>10s}")
        lines.append(f"{'factor(lot)':12s}{t['df'][0]:6d}{t['sum_sq'][0]:10.1f}"
                     f"{t['mean_sq'][0]:10.3f}{t['f_value']:10.3f}{t['p_value']:10.3f}")
        lines.append(f"{'Residuals':12s}{t['df'][1]:6d}{t['sum_sq'][1]:10.1f}{t['mean_sq'][1]:10.3f}")
        lines.append(f"sigma2_gamma_hat={t['sigma2_gamma_hat']:.3f} sigma2_eps_hat={t['sigma2_eps_hat']:.3f}")
    return "\n".join(lines) + "\n"


def _simulate_table(report):
    rep = report["report"]
    lines = [f"study: {rep['study']}  R={rep['R']} (used {rep['R_used']})  B={rep['B']}"]
    for method, rows in rep["cells"].items():
        lines.append(f"method: {method}")
        for target, per_alpha in rows.items():
            cells = "  ".join(
                f"alpha={a}: " + ", ".join(f"{k}={_fmt(v)}" for k, v in vals.items())
                for a, vals in per_alpha.items()
            )
            lines.append(f"  {target}:  {cells}")
    return "\n".join(lines) + "\n"


def _emit(args, report, to_table):
    if args.format == "table":
        write_report(to_table(report), args.out, as_json=False)
    else:
        write_report(report, args.out)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"fit": _cmd_fit, "test": _cmd_test, "anova": _cmd_anova,
                "simulate": _cmd_simulate}
    try:
        return handlers[args.command](args)
    except FileNotFoundError as e:
        print(f"drm-monitor: error: input file not found: {e.filename}", file=sys.stderr)
        return 2
    except DrmError as e:
        print(f"drm-monitor: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
