"""Command-line surface: fit, diagnose, generate, simulate.

Exit codes: 0 success, 1 input/config error, 2 fit non-convergence (the
report is still emitted).  Every report echoes the effective
configuration so runs can be reproduced from the output alone.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from .data import EstimatorId, normalize_structure, read_csv, write_csv
from .datagen import Scenario, calibrate_intercept, generate_dataset
from .errors import DatasetError, PgeeError, ConfigError, SingularLeverage
from .fitting import FitOptions, PgeeFit, fit
from .harness import (
    effective_workers,
    parse_config,
    results_csv,
    run_grid,
    summary_json,
)
from .variance import estimate_variance, overcorrection_diagnostic, wald_test
from .data import WorkingModel

JSON_SCHEMA_VERSION = "1"


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--corr",
        default="exch",
        help="working correlation: exch, ar1 or ind (default exch)",
    )
    parser.add_argument(
        "--alpha",
        default="estimate",
        help="fixed correlation parameter or 'estimate' (default)",
    )
    parser.add_argument(
        "--phi",
        default="1.0",
        help="fixed dispersion or 'estimate' for the Pearson plug-in (default 1.0)",
    )
    parser.add_argument("--no-penalty", action="store_true", help="plain GEE fit")
    parser.add_argument("--tol", type=float, default=1e-6)
    parser.add_argument("--max-iter", type=int, default=50)


def _working_model(args) -> WorkingModel:
    alpha = args.alpha if args.alpha == "estimate" else float(args.alpha)
    phi = "pearson-plugin" if args.phi == "estimate" else float(args.phi)
    return WorkingModel(
        structure=normalize_structure(args.corr), alpha=alpha, dispersion=phi
    )


def _parse_estimators(spec: str) -> list:
    if spec.strip().lower() == "all":
        return list(EstimatorId)
    return [EstimatorId.parse(tag) for tag in spec.split(",")]


def _fit_dataset(args):
    dataset = read_csv(args.data)
    wm = _working_model(args)
    opts = FitOptions(
        penalized=not args.no_penalty, max_iter=args.max_iter, tol=args.tol
    )
    return dataset, wm, fit(dataset, wm, opts)


def _fit_header_lines(dataset, wm, result: PgeeFit) -> list:
    alpha_mode = "estimated" if wm.estimates_alpha else "fixed"
    phi_mode = "estimated" if wm.estimates_dispersion else "fixed"
    lines = [
        f"clusters: {dataset.n_clusters}   observations: {dataset.n_total}   "
        f"p: {dataset.p}",
        f"working correlation: {wm.structure}   penalty: "
        f"{'on' if result.penalized else 'off'}",
        f"converged: {'yes' if result.converged else 'no'}"
        + ("" if result.converged else f" ({result.diverged_reason})")
        + f"   iterations: {result.iterations}",
        f"alpha_hat: {result.alpha:.6g} ({alpha_mode})   "
        f"phi_hat: {result.phi:.6g} ({phi_mode})",
        "coefficients: "
        + "  ".join(
            f"{name}={b:.6g}" for name, b in zip(dataset.colnames, result.beta)
        ),
    ]
    return lines


def _rho_line(diag, colnames) -> str:
    parts = [f"{r:.2f} ({name})" for r, name in zip(diag.ratios, colnames)]
    return "rho_s: " + ", ".join(parts)


def cmd_fit(args) -> int:
    try:
        dataset, wm, result = _fit_dataset(args)
    except (DatasetError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    estimators = _parse_estimators(args.estimators)

    report: dict = {
        "schema_version": JSON_SCHEMA_VERSION,
        "command": "fit",
        "config": {
            "data": str(args.data),
            "corr": wm.structure,
            "alpha": args.alpha,
            "phi": args.phi,
            "penalized": not args.no_penalty,
            "tol": args.tol,
            "max_iter": args.max_iter,
        },
        "converged": result.converged,
        "diverged_reason": result.diverged_reason,
        "iterations": result.iterations,
        "alpha_hat": result.alpha,
        "phi_hat": result.phi,
        "beta": {n: float(b) for n, b in zip(dataset.colnames, result.beta)},
    }

    lines = _fit_header_lines(dataset, wm, result)
    if result.kernel is not None:
        n_cl, p = dataset.n_clusters, dataset.p
        est_report = {}
        for coef_idx, name in enumerate(dataset.colnames):
            lines.append("")
            lines.append(
                f"[{name}] estimate {result.beta[coef_idx]:.6g} "
                f"(Wald t, dof = {n_cl - p})"
            )
            lines.append(
                f"  {'estimator':<10}{'SE':>12}{'t':>10}{'p':>10}"
                f"{'95% CI':>26}"
            )
            for est in estimators:
                ve = estimate_variance(result.kernel, est)
                entry = est_report.setdefault(
                    est.name,
                    {
                        "computable": bool(ve.computable),
                        "reason": ve.incomputable_reason,
                        "coefficients": {},
                    },
                )
                if not ve.computable:
                    lines.append(
                        f"  {est.name:<10}{'—':>12}{'—':>10}{'—':>10}"
                        f"{'(' + str(ve.incomputable_reason) + ')':>26}"
                    )
                    continue
                wr = wald_test(
                    result.beta[coef_idx], float(ve.se[coef_idx]), n_cl, p,
                    null_value=args.null,
                )
                entry["coefficients"][name] = {
                    "se": wr.se,
                    "t": wr.t,
                    "p": wr.p_value,
                    "ci": [wr.ci_low, wr.ci_high],
                }
                lines.append(
                    f"  {est.name:<10}{wr.se:>12.4g}{wr.t:>10.3f}"
                    f"{wr.p_value:>10.4f}"
                    f"{'[' + f'{wr.ci_low:.4g}, {wr.ci_high:.4g}' + ']':>26}"
                )
        report["estimators"] = est_report
        try:
            diag = overcorrection_diagnostic(result.kernel)
            lines.append("")
            lines.append(_rho_line(diag, dataset.colnames))
            report["overcorrection"] = {
                "rho": {
                    n: float(r) for n, r in zip(dataset.colnames, diag.ratios)
                },
                "eigenvalues": [float(v) for v in diag.eigenvalues],
            }
        except SingularLeverage as exc:
            lines.append("")
            lines.append(f"rho_s: not computable ({exc})")
            report["overcorrection"] = None

    if args.json:
        print(json.dumps(report, indent=2, sort_keys=True))
    else:
        print("\n".join(lines))
    return 0 if result.converged else 2


def cmd_diagnose(args) -> int:
    try:
        dataset, wm, result = _fit_dataset(args)
    except (DatasetError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if result.kernel is None:
        print("error: no kernel available (fit failed immediately)", file=sys.stderr)
        return 2

    lines = _fit_header_lines(dataset, wm, result)
    report: dict = {
        "schema_version": JSON_SCHEMA_VERSION,
        "command": "diagnose",
        "converged": result.converged,
        "beta": {n: float(b) for n, b in zip(dataset.colnames, result.beta)},
    }
    try:
        diag = overcorrection_diagnostic(result.kernel)
    except SingularLeverage as exc:
        print(f"error: diagnostic not computable ({exc})", file=sys.stderr)
        return 2
    lines.append("")
    lines.append(
        "overcorrection eigenvalues: "
        + ", ".join(f"{v:.4f}" for v in diag.eigenvalues)
    )
    lines.append(_rho_line(diag, dataset.colnames))
    report["overcorrection"] = {
        "rho": {n: float(r) for n, r in zip(dataset.colnames, diag.ratios)},
        "eigenvalues": [float(v) for v in diag.eigenvalues],
    }

    if args.treatment_col:
        name = args.treatment_col
        if name not in dataset.colnames:
            print(f"error: no column named {name!r}", file=sys.stderr)
            return 1
        idx = dataset.colnames.index(name)
        values = []
        for c in dataset.clusters:
            col = c.X[:, idx]
            if not np.all(col == col[0]) or col[0] not in (0.0, 1.0):
                print(
                    f"error: {name!r} is not a binary subject-level column",
                    file=sys.stderr,
                )
                return 1
            values.append(col[0])
        n1 = int(sum(values))
        n0 = len(values) - n1
        n_min = min(n0, n1)
        if n_min >= 2:
            bench = 1.0 / (n_min - 1)
            lines.append(
                f"benchmark 1/(N_min - 1) = {bench:.4f}  "
                f"(N1 = {n1}, N0 = {n0});  rho_{name} = {diag.ratios[idx]:.4f}"
            )
            report["benchmark"] = {"n1": n1, "n0": n0, "value": bench}
        else:
            lines.append(
                f"benchmark undefined: smaller arm has {n_min} cluster(s)"
            )
            report["benchmark"] = None

    if args.json:
        print(json.dumps(report, indent=2, sort_keys=True))
    else:
        print("\n".join(lines))
    return 0 if result.converged else 2


def cmd_generate(args) -> int:
    try:
        scenario = Scenario(
            n_clusters=args.N,
            n_pattern=tuple(int(v) for v in args.n.split("/")),
            event_rate=args.rate,
            rho=args.rho,
            true_structure=args.structure,
            working_structure=args.structure,
            gamma=args.gamma,
            beta1=args.beta1,
            beta2=args.beta2,
            model=args.model,
            seed=args.seed,
        )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    intercept = calibrate_intercept(scenario)
    dataset = None
    invalid = 0
    for attempt in range(1000):
        rng = np.random.default_rng(
            np.random.SeedSequence((scenario.seed, 0, attempt))
        )
        dataset = generate_dataset(scenario, rng, intercept=intercept)
        if dataset is not None:
            break
        invalid += 1
    if dataset is None:
        print("error: no valid draw in 1000 attempts", file=sys.stderr)
        return 1
    write_csv(dataset, args.out)
    print(
        f"wrote {dataset.n_clusters} clusters ({dataset.n_total} rows) to "
        f"{args.out}; intercept {intercept:.6g}; invalid draws {invalid}; "
        f"seed {scenario.seed}"
    )
    return 0


def cmd_simulate(args) -> int:
    try:
        text = Path(args.config).read_text(encoding="utf-8")
        specs = parse_config(text, base_seed=args.seed)
    except (OSError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        estimators = _parse_estimators(args.estimators)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    reps = 5000 if args.full else args.reps
    workers = effective_workers(args.workers)
    try:
        results = run_grid(
            specs,
            reps,
            workers=workers,
            estimators=estimators,
            min_converged=args.min_converged,
        )
    except PgeeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "results.csv").write_text(results_csv(results), encoding="utf-8")
    (out_dir / "summary.json").write_text(
        summary_json(specs, results, base_seed=args.seed, reps=reps),
        encoding="utf-8",
    )
    print(
        f"{len(specs)} scenario(s) x {reps} replications "
        f"(seed {args.seed}, workers {workers})"
    )
    for res in results:
        print(
            f"  {res.scenario_id}: convergence {res.convergence_rate:.3f}, "
            f"invalid draws {res.invalid_draws}"
        )
    print(f"wrote {out_dir / 'results.csv'} and {out_dir / 'summary.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pgee",
        description=(
            "Penalized GEE for clustered binary outcomes: fitting, sandwich "
            "variance estimators, leverage diagnostics, data generation and "
            "Monte Carlo simulation."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit a dataset and report all estimators")
    p_fit.add_argument("data", help="long-format CSV (cluster,y,x1..xk[,t])")
    _add_model_flags(p_fit)
    p_fit.add_argument(
        "--estimators", default="all", help="'all' or comma list, e.g. LZ,KC,AR"
    )
    p_fit.add_argument("--null", type=float, default=0.0, help="null value for Wald tests")
    p_fit.add_argument("--json", action="store_true", help="machine-readable output")
    p_fit.set_defaults(func=cmd_fit)

    p_diag = sub.add_parser("diagnose", help="leverage-overcorrection diagnostic")
    p_diag.add_argument("data")
    _add_model_flags(p_diag)
    p_diag.add_argument(
        "--treatment-col",
        default=None,
        help="binary subject-level column for the 1/(N_min-1) benchmark",
    )
    p_diag.add_argument("--json", action="store_true")
    p_diag.set_defaults(func=cmd_diagnose)

    p_gen = sub.add_parser("generate", help="dump a simulated dataset to CSV")
    p_gen.add_argument("--N", type=int, required=True, help="number of clusters")
    p_gen.add_argument("--n", default="4", help="cluster size or pattern, e.g. 2/6")
    p_gen.add_argument("--rate", type=float, default=0.2, help="target event rate")
    p_gen.add_argument("--rho", type=float, default=0.2)
    p_gen.add_argument("--structure", default="exchangeable", help="exchangeable or ar1")
    p_gen.add_argument("--gamma", type=float, default=0.3)
    p_gen.add_argument("--beta1", type=float, default=0.0)
    p_gen.add_argument("--beta2", type=float, default=0.2)
    p_gen.add_argument("--model", default="full", help="full or reduced")
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(func=cmd_generate)

    p_sim = sub.add_parser("simulate", help="run a scenario grid")
    p_sim.add_argument("--config", required=True, help="grid config file")
    p_sim.add_argument("--reps", type=int, default=1000)
    p_sim.add_argument("--full", action="store_true", help="use 5000 replications")
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--workers", type=int, default=1)
    p_sim.add_argument("--estimators", default="all")
    p_sim.add_argument("--min-converged", type=int, default=100)
    p_sim.add_argument("--out-dir", default=".")
    p_sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
