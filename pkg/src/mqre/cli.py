"""Command-line front end: fit models from CSV files and run the Monte Carlo study.

Exit codes: 0 success, 1 fit failure (including non-convergence unless
``--allow-nonconverged``), 2 input/configuration error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

from . import __version__
from .dataio import DatasetSchema, read_dataset
from .design import FitResult
from .exceptions import InputError, MqreError
from .influence import InfluenceFamily, InfluenceSpec
from .core import fit_mqre
from .sim import SimConfig, run_monte_carlo
from .weights import WeightScaling, scale_design

__all__ = ["main", "cmd_fit", "cmd_simulate"]

EXIT_OK = 0
EXIT_FIT_FAILURE = 1
EXIT_INPUT_ERROR = 2

STAR_LEVELS = ((0.01, "***"), (0.05, "**"), (0.1, "*"))


def significance_stars(p_value) -> str:
    if p_value is None:
        return ""
    for level, stars in STAR_LEVELS:
        if p_value < level:
            return stars
    return ""


def _parse_quantiles(text: str) -> list[float]:
    try:
        values = [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise InputError(f"cannot parse quantile list {text!r}") from None
    if not values or any(not 0.0 < q < 1.0 for q in values):
        raise InputError(f"quantiles must lie in (0, 1), got {text!r}")
    return values


def _fit_to_dict(fit: FitResult, names: list[str]) -> dict:
    coeffs = []
    for k, name in enumerate(names):
        se = None if fit.se is None else float(fit.se[k])
        z = None if fit.z is None else float(fit.z[k])
        pv = None if fit.p_value is None else float(fit.p_value[k])
        coeffs.append(
            {
                "name": name,
                "estimate": float(fit.beta[k]),
                "se": se,
                "z": z,
                "p_value": pv,
                "stars": significance_stars(pv),
            }
        )
    return {
        "q": fit.q,
        "c": fit.c,
        "family": fit.family.value,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "score_norm": fit.score_norm,
        "variance_components": {
            "sigma2_gamma": fit.varcomp.sigma2_gamma,
            "sigma2_eps": fit.varcomp.sigma2_eps,
        },
        "inference_error": fit.inference_error,
        "coefficients": coeffs,
    }


def _format_fit_table(fit: FitResult, names: list[str]) -> str:
    lines = [
        f"q = {fit.q:g}  (c = {fit.c:g}, family = {fit.family.value}, "
        f"converged = {fit.converged}, iterations = {fit.iterations})",
        f"  sigma2_gamma = {fit.varcomp.sigma2_gamma:.6g}   "
        f"sigma2_eps = {fit.varcomp.sigma2_eps:.6g}",
        f"  {'coefficient':<20}{'estimate':>14}{'SE':>12}{'z':>10}{'p-value':>12}  ",
    ]
    for k, name in enumerate(names):
        if fit.se is not None:
            se, z, pv = fit.se[k], fit.z[k], fit.p_value[k]
            stars = significance_stars(pv)
            lines.append(
                f"  {name:<20}{fit.beta[k]:>14.4f}{se:>12.4f}{z:>10.3f}"
                f"{pv:>12.4g}  {stars}"
            )
        else:
            lines.append(f"  {name:<20}{fit.beta[k]:>14.4f}{'':>12}{'':>10}{'':>12}")
    if fit.inference_error:
        lines.append(f"  [standard errors unavailable: {fit.inference_error}]")
    return "\n".join(lines)


def _coefficients_csv(fits: list[FitResult], names: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(
        ["q", "coefficient", "estimate", "se", "z", "p_value", "stars",
         "sigma2_gamma", "sigma2_eps", "converged"]
    )
    for fit in fits:
        for k, name in enumerate(names):
            se = "" if fit.se is None else repr(float(fit.se[k]))
            z = "" if fit.z is None else repr(float(fit.z[k]))
            pv = "" if fit.p_value is None else repr(float(fit.p_value[k]))
            stars = significance_stars(None if fit.p_value is None else fit.p_value[k])
            writer.writerow(
                [fit.q, name, repr(float(fit.beta[k])), se, z, pv, stars,
                 repr(fit.varcomp.sigma2_gamma), repr(fit.varcomp.sigma2_eps),
                 fit.converged]
            )
    return buf.getvalue()


def _sim_csv(report) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(
        ["method", "q", "parameter", "arb_percent", "mean_estimate",
         "empirical_se", "mean_estimated_se", "n_used", "n_failed"]
    )
    for row in report.rows:
        writer.writerow(
            [row.method, row.q, row.parameter, repr(row.arb),
             repr(row.mean_estimate), repr(row.empirical_se),
             "" if row.mean_estimated_se is None else repr(row.mean_estimated_se),
             row.n_used, row.n_failed]
        )
    return buf.getvalue()


def cmd_fit(args: argparse.Namespace) -> int:
    schema = DatasetSchema(
        response=args.response,
        covariates=tuple(tok.strip() for tok in args.covariates.split(",") if tok.strip()),
        cluster=args.cluster,
        unit_weight=args.unit_weight,
        cluster_weight=args.cluster_weight,
    )
    if not schema.covariates:
        raise InputError("at least one covariate column is required")
    quantiles = _parse_quantiles(args.quantiles)
    design, dropped = read_dataset(args.input, schema)
    design = scale_design(design, WeightScaling(args.scale))
    names = schema.coefficient_names

    fits = []
    for q in quantiles:
        spec = InfluenceSpec(q=q, c=args.c, family=InfluenceFamily(args.family))
        fits.append(fit_mqre(design, spec, tol=args.tol, max_iter=args.max_iter))

    report = {
        "version": __version__,
        "input": str(args.input),
        "schema": {
            "response": schema.response,
            "covariates": list(schema.covariates),
            "cluster": schema.cluster,
            "unit_weight": schema.unit_weight,
            "cluster_weight": schema.cluster_weight,
        },
        "scaling": args.scale,
        "n": design.n,
        "m": design.m,
        "dropped_rows": dropped,
        "fits": [_fit_to_dict(fit, names) for fit in fits],
    }

    if args.format == "json":
        print(json.dumps(report, indent=2))
    elif args.format == "csv":
        print(_coefficients_csv(fits, names), end="")
    else:
        if dropped:
            print(f"dropped {dropped} row(s) with missing values")
        print(f"{design.n} units in {design.m} clusters; scaling = {args.scale}")
        for fit in fits:
            print()
            print(_format_fit_table(fit, names))

    if args.out_dir is not None:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "fit_report.json").write_text(
            json.dumps(report, indent=2) + "\n", encoding="utf-8"
        )
        (out_dir / "coefficients.csv").write_text(
            _coefficients_csv(fits, names), encoding="utf-8"
        )
        if not args.no_figures:
            from .plots import save_fit_figure

            save_fit_figure(fits, names, out_dir)

    bad = [fit for fit in fits if not fit.converged]
    if bad and not args.allow_nonconverged:
        for fit in bad:
            print(
                f"error: fit at q={fit.q:g} did not converge: {fit.message}",
                file=sys.stderr,
            )
        return EXIT_FIT_FAILURE
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    config = SimConfig(
        clusters_population=args.population_clusters,
        units_per_cluster=args.units_per_cluster,
        clusters_sampled=args.m,
        replications=args.replications,
        quantiles=tuple(_parse_quantiles(args.quantiles)),
        c=args.c,
        family=InfluenceFamily(args.family),
        scaling=WeightScaling(args.scale),
        seed=args.seed,
        unit_rate=args.unit_rate,
    )
    report = run_monte_carlo(config, workers=args.workers, progress=args.progress)

    if args.format == "json":
        print(json.dumps(report.to_dict(), indent=2))
    elif args.format == "csv":
        print(_sim_csv(report), end="")
    else:
        print(report.format_arb_table())
        print()
        print(report.format_se_table())
        if report.shortfall_events:
            print(f"\nstratum shortfall events: {report.shortfall_events}")
        if report.failed_fits:
            print(f"excluded fit failures: {report.failed_fits}")

    if args.out_dir is not None:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "sim_report.json").write_text(
            json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8"
        )
        (out_dir / "sim_summary.csv").write_text(_sim_csv(report), encoding="utf-8")
        (out_dir / "sim_tables.txt").write_text(
            report.format_arb_table() + "\n\n" + report.format_se_table() + "\n",
            encoding="utf-8",
        )
        if not args.no_figures:
            from .plots import save_sim_figures

            save_sim_figures(report, out_dir)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mqre",
        description="M-quantile random-effects regression for two-level survey data",
    )
    parser.add_argument("--version", action="version", version=f"mqre {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit a quantile grid to a CSV dataset")
    fit.add_argument("input", help="CSV file with a header row")
    fit.add_argument("--response", required=True, help="response column")
    fit.add_argument(
        "--covariates", required=True,
        help="comma-separated covariate columns (an intercept is always added)",
    )
    fit.add_argument("--cluster", required=True, help="cluster id column")
    fit.add_argument("--unit-weight", default=None, help="level-1 weight column")
    fit.add_argument("--cluster-weight", default=None, help="level-2 weight column")
    fit.add_argument("--quantiles", default="0.1,0.25,0.5,0.75,0.9")
    fit.add_argument("--c", type=float, default=1.345, help="Huber tuning constant")
    fit.add_argument("--family", choices=["huber", "identity"], default="huber")
    fit.add_argument(
        "--scale", choices=["none", "method1", "method2"], default="method2",
        help="within-cluster rescaling of the level-1 weights",
    )
    fit.add_argument("--tol", type=float, default=1e-6)
    fit.add_argument("--max-iter", type=int, default=200)
    fit.add_argument("--format", choices=["table", "csv", "json"], default="table")
    fit.add_argument("--out-dir", default=None, help="write report, CSV and figures here")
    fit.add_argument("--no-figures", action="store_true")
    fit.add_argument("--allow-nonconverged", action="store_true")
    fit.set_defaults(func=cmd_fit)

    simulate = sub.add_parser("simulate", help="run the Monte Carlo study")
    simulate.add_argument("--replications", type=int, default=500)
    simulate.add_argument("--seed", type=int, default=SimConfig.seed)
    simulate.add_argument("--quantiles", default="0.1,0.25,0.5")
    simulate.add_argument("--m", type=int, default=100, help="sampled clusters")
    simulate.add_argument("--population-clusters", type=int, default=170)
    simulate.add_argument("--units-per-cluster", type=int, default=50)
    simulate.add_argument("--unit-rate", type=float, default=0.3)
    simulate.add_argument("--c", type=float, default=1.345)
    simulate.add_argument("--family", choices=["huber", "identity"], default="huber")
    simulate.add_argument("--scale", choices=["none", "method1", "method2"], default="method2")
    simulate.add_argument("--workers", type=int, default=1)
    simulate.add_argument("--progress", action="store_true")
    simulate.add_argument("--format", choices=["table", "csv", "json"], default="table")
    simulate.add_argument("--out-dir", default=None)
    simulate.add_argument("--no-figures", action="store_true")
    simulate.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    except MqreError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
