"""Scenario-grid Monte Carlo harness: type I error, power, SE calibration.

One replication generates a dataset, fits the penalized estimating
equation (working correlation estimated, dispersion fixed at 1), runs all
requested covariance estimators, and records Wald rejections at the 5%
level for the tested coefficients.  Operating characteristics are
aggregated only over converged replications, and per estimator only over
replications where that estimator was computable.

Randomness is keyed, not sequential: replication ``r`` of a scenario with
seed ``s`` draws from ``SeedSequence((s, r, attempt))``, where ``attempt``
increments when a generated dataset contains an invalid conditional draw
(the event is counted and the replication regenerated on the next
substream).  Results are therefore identical for any worker count.

Scenario grids come from an INI-style config file; every section is one
block and whitespace-separated values expand by Cartesian product::

    [core-null]
    N = 10 20
    n = 4            # constant size, or "2/6" for an alternating pattern
    event_rate = 0.1 0.2
    rho = 0.2
    true = exchangeable
    working = exchangeable   # defaults to the true structure
    gamma = 0.3
    beta1 = 0                # number or "log2"
    beta2 = 0.2
    model = full             # or "reduced" (no time covariate)
    test = beta1             # comma-joined: "beta1,beta2"

Outputs: ``results.csv`` (one row per scenario x estimator x tested
coefficient) and ``summary.json`` (grid metadata, seeds, convergence
census); both are byte-stable across runs and worker counts.
"""

from __future__ import annotations

import configparser
import itertools
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.stats import skew

from .data import EstimatorId, WorkingModel
from .datagen import Scenario, calibrate_intercept, generate_dataset
from .errors import ConfigError, TooFewConverged
from .fitting import FitOptions, fit
from .variance import estimate_all, wald_test

#: Nominal level of the Wald tests.
TEST_LEVEL = 0.05

#: Cap on regeneration attempts after invalid conditional draws.
MAX_ATTEMPTS = 1000

_COEF_INDEX = {"beta1": 1, "beta2": 2}

RESULTS_COLUMNS = (
    "scenario",
    "estimator",
    "coefficient",
    "n_computable",
    "rejection_rate",
    "mc_se",
    "median_se_ratio",
    "cv_se",
    "skewness_se",
    "p95_over_p50",
    "p99_over_p50",
    "b_effective",
    "convergence_rate",
    "invalid_draws",
)


@dataclass(frozen=True)
class ScenarioSpec:
    """A scenario plus the coefficients whose null is tested."""

    id: str
    scenario: Scenario
    test_coefs: tuple = ("beta1",)

    def __post_init__(self):
        for name in self.test_coefs:
            if name not in _COEF_INDEX:
                raise ConfigError(f"unknown tested coefficient {name!r}")
            if name == "beta2" and self.scenario.model == "reduced":
                raise ConfigError("reduced model has no beta2 to test")


@dataclass(frozen=True)
class EstimatorCell:
    """Aggregated metrics for one (estimator, coefficient) pair."""

    estimator: str
    coefficient: str
    n_computable: int
    rejection_rate: Optional[float]
    mc_se: Optional[float]
    median_se_ratio: Optional[float]
    cv_se: Optional[float]
    skewness_se: Optional[float]
    p95_over_p50: Optional[float]
    p99_over_p50: Optional[float]


@dataclass(frozen=True)
class ScenarioResult:
    """Per-scenario Monte Carlo operating characteristics."""

    scenario_id: str
    b_total: int
    b_effective: int
    convergence_rate: float
    invalid_draws: int
    sim_se: dict
    cells: tuple


def run_replication(
    spec: ScenarioSpec,
    rep_index: int,
    intercept: Optional[float] = None,
    estimators: Optional[Sequence[EstimatorId]] = None,
    fit_options: Optional[FitOptions] = None,
) -> dict:
    """Generate, fit, estimate, test: one Monte Carlo replication record."""
    scen = spec.scenario
    if intercept is None:
        intercept = calibrate_intercept(scen)
    if estimators is None:
        estimators = list(EstimatorId)

    dataset = None
    invalid = 0
    for attempt in range(MAX_ATTEMPTS):
        rng = np.random.default_rng(
            np.random.SeedSequence((scen.seed, rep_index, attempt))
        )
        dataset = generate_dataset(scen, rng, intercept=intercept)
        if dataset is not None:
            break
        invalid += 1
    record = {"rep": rep_index, "invalid": invalid, "converged": False}
    if dataset is None:
        return record

    wm = WorkingModel(structure=scen.working_structure, alpha="estimate", dispersion=1.0)
    result = fit(dataset, wm, fit_options or FitOptions())
    record["converged"] = bool(result.converged)
    if not result.converged:
        return record

    record["beta"] = [float(b) for b in result.beta]
    n_clusters, p = dataset.n_clusters, dataset.p
    estimates = estimate_all(result.kernel, estimators)
    per_est = {}
    for est, ve in estimates.items():
        entry = {"computable": bool(ve.computable), "reason": ve.incomputable_reason}
        if ve.computable:
            ses, rejects = [], []
            for name in spec.test_coefs:
                idx = _COEF_INDEX[name]
                se = float(ve.se[idx])
                wr = wald_test(result.beta[idx], se, n_clusters, p, null_value=0.0)
                ses.append(se)
                rejects.append(bool(wr.p_value < TEST_LEVEL))
            entry["se"] = ses
            entry["reject"] = rejects
        per_est[est.name] = entry
    record["estimators"] = per_est
    return record


def aggregate(
    records: Sequence[dict],
    spec: ScenarioSpec,
    estimators: Optional[Sequence[EstimatorId]] = None,
    min_converged: int = 100,
) -> ScenarioResult:
    """Reduce replication records to per-cell operating characteristics."""
    if estimators is None:
        estimators = list(EstimatorId)
    records = sorted(records, key=lambda r: r["rep"])
    b_total = len(records)
    converged = [r for r in records if r["converged"]]
    b_eff = len(converged)
    if b_eff < min_converged:
        raise TooFewConverged(
            f"{spec.id}: only {b_eff} converged replications (need {min_converged})"
        )
    invalid_draws = sum(r["invalid"] for r in records)

    betas = np.array([r["beta"] for r in converged])
    sim_se = {
        name: float(np.std(betas[:, _COEF_INDEX[name]], ddof=1))
        for name in spec.test_coefs
    }

    cells = []
    for est in estimators:
        tag = est.name
        usable = [r for r in converged if r["estimators"][tag]["computable"]]
        for ci, name in enumerate(spec.test_coefs):
            n_comp = len(usable)
            if n_comp == 0:
                cells.append(
                    EstimatorCell(
                        estimator=tag,
                        coefficient=name,
                        n_computable=0,
                        rejection_rate=None,
                        mc_se=None,
                        median_se_ratio=None,
                        cv_se=None,
                        skewness_se=None,
                        p95_over_p50=None,
                        p99_over_p50=None,
                    )
                )
                continue
            rejects = np.array(
                [r["estimators"][tag]["reject"][ci] for r in usable], dtype=float
            )
            ses = np.array([r["estimators"][tag]["se"][ci] for r in usable])
            rate = float(np.mean(rejects))
            med = float(np.median(ses))
            mean_se = float(np.mean(ses))
            degenerate = np.ptp(ses) <= 1e-12 * max(mean_se, 1e-300)
            cells.append(
                EstimatorCell(
                    estimator=tag,
                    coefficient=name,
                    n_computable=n_comp,
                    rejection_rate=rate,
                    mc_se=math.sqrt(rate * (1.0 - rate) / n_comp),
                    median_se_ratio=med / sim_se[name] if sim_se[name] > 0 else None,
                    cv_se=float(np.std(ses, ddof=1)) / mean_se if n_comp > 1 else None,
                    skewness_se=(
                        None
                        if n_comp <= 2
                        else 0.0
                        if degenerate
                        else float(skew(ses))
                    ),
                    p95_over_p50=float(np.percentile(ses, 95)) / med,
                    p99_over_p50=float(np.percentile(ses, 99)) / med,
                )
            )
    return ScenarioResult(
        scenario_id=spec.id,
        b_total=b_total,
        b_effective=b_eff,
        convergence_rate=b_eff / b_total,
        invalid_draws=invalid_draws,
        sim_se=sim_se,
        cells=tuple(cells),
    )


def _worker_chunk(args) -> list:
    spec, reps, intercept, tags = args
    estimators = [EstimatorId[t] for t in tags]
    return [
        run_replication(spec, r, intercept=intercept, estimators=estimators)
        for r in reps
    ]


def run_scenario(
    spec: ScenarioSpec,
    reps: int,
    workers: int = 1,
    estimators: Optional[Sequence[EstimatorId]] = None,
    min_converged: int = 100,
) -> ScenarioResult:
    """Run all replications of one scenario, optionally across processes."""
    if estimators is None:
        estimators = list(EstimatorId)
    intercept = calibrate_intercept(spec.scenario)
    tags = [e.name for e in estimators]
    if workers <= 1:
        records = [
            run_replication(spec, r, intercept=intercept, estimators=estimators)
            for r in range(reps)
        ]
    else:
        chunk = max(1, math.ceil(reps / (workers * 4)))
        jobs = [
            (spec, list(range(start, min(start + chunk, reps))), intercept, tags)
            for start in range(0, reps, chunk)
        ]
        records = []
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for result in pool.map(_worker_chunk, jobs):
                records.extend(result)
    return aggregate(records, spec, estimators, min_converged=min_converged)


def effective_workers(requested: int) -> int:
    """Requested worker count capped by the PGEE_THREADS environment variable."""
    cap = os.environ.get("PGEE_THREADS")
    if cap:
        return max(1, min(requested, int(cap)))
    return max(1, requested)


def run_grid(
    specs: Sequence[ScenarioSpec],
    reps: int,
    workers: int = 1,
    estimators: Optional[Sequence[EstimatorId]] = None,
    min_converged: int = 100,
) -> list:
    """Run every scenario in a grid; deterministic for any worker count."""
    workers = effective_workers(workers)
    return [
        run_scenario(
            spec, reps, workers=workers, estimators=estimators, min_converged=min_converged
        )
        for spec in specs
    ]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def results_csv(results: Sequence[ScenarioResult]) -> str:
    """Render the results table; one row per scenario x estimator x coefficient."""
    lines = [",".join(RESULTS_COLUMNS)]
    for res in results:
        for cell in res.cells:
            row = (
                res.scenario_id,
                cell.estimator,
                cell.coefficient,
                cell.n_computable,
                cell.rejection_rate,
                cell.mc_se,
                cell.median_se_ratio,
                cell.cv_se,
                cell.skewness_se,
                cell.p95_over_p50,
                cell.p99_over_p50,
                res.b_effective,
                res.convergence_rate,
                res.invalid_draws,
            )
            lines.append(",".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def summary_json(
    specs: Sequence[ScenarioSpec],
    results: Sequence[ScenarioResult],
    base_seed: int,
    reps: int,
) -> str:
    """Grid metadata: seeds, scenario parameters, convergence census."""
    scenarios = []
    for spec, res in zip(specs, results):
        scen = spec.scenario
        scenarios.append(
            {
                "id": spec.id,
                "seed": int(scen.seed),
                "n_clusters": scen.n_clusters,
                "n_pattern": list(scen.n_pattern),
                "event_rate": scen.event_rate,
                "rho": scen.rho,
                "true_structure": scen.true_structure,
                "working_structure": scen.working_structure,
                "gamma": scen.gamma,
                "beta1": scen.beta1,
                "beta2": scen.beta2,
                "model": scen.model,
                "tested": list(spec.test_coefs),
                "b_total": res.b_total,
                "b_effective": res.b_effective,
                "convergence_rate": res.convergence_rate,
                "invalid_draws": res.invalid_draws,
                "sim_se": {k: res.sim_se[k] for k in sorted(res.sim_se)},
                "mc_se_bound_nominal": math.sqrt(
                    TEST_LEVEL * (1 - TEST_LEVEL) / max(res.b_effective, 1)
                ),
            }
        )
    payload = {
        "schema_version": "1",
        "base_seed": base_seed,
        "reps": reps,
        "test_level": TEST_LEVEL,
        "scenarios": scenarios,
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _scenario_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence((base_seed, index)).generate_state(1, np.uint64)[0])


def _parse_pattern(token: str) -> tuple:
    try:
        return tuple(int(part) for part in token.split("/"))
    except ValueError:
        raise ConfigError(f"bad cluster-size pattern {token!r}") from None


def _parse_beta(token: str) -> float:
    if token.strip().lower() == "log2":
        return math.log(2.0)
    try:
        return float(token)
    except ValueError:
        raise ConfigError(f"bad coefficient value {token!r}") from None


_KNOWN_KEYS = {
    "N", "n", "event_rate", "rho", "true", "working",
    "gamma", "beta1", "beta2", "model", "test",
}


def parse_config(text: str, base_seed: int) -> list:
    """Expand an INI-style grid config into scenario specs.

    Every section is a block; whitespace-separated values expand by
    Cartesian product.  ``working`` defaults to the true structure, the
    remaining optional keys default to the core design (n = 4,
    gamma = 0.3, beta1 = 0, beta2 = 0.2, model = full, test = beta1).
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep key case: N (clusters) vs n (sizes)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    if not cp.sections():
        raise ConfigError("config has no scenario blocks")

    specs = []
    index = 0
    for section in cp.sections():
        block = dict(cp[section])
        unknown = set(block) - _KNOWN_KEYS
        if unknown:
            raise ConfigError(f"[{section}]: unknown keys {sorted(unknown)}")
        for required in ("N", "event_rate", "rho", "true"):
            if required not in block:
                raise ConfigError(f"[{section}]: missing {required}")

        def values(key: str, default: str) -> list:
            return block.get(key, default).split()

        n_clusters_list = block["N"].split()
        n_pattern_list = values("n", "4")
        rate_list = block["event_rate"].split()
        rho_list = block["rho"].split()
        true_list = block["true"].split()
        working_list = block.get("working", "").split() or [None]
        gamma_list = values("gamma", "0.3")
        beta1_list = values("beta1", "0")
        beta2_list = values("beta2", "0.2")
        model_list = values("model", "full")
        test_list = values("test", "beta1")

        for combo in itertools.product(
            n_clusters_list,
            n_pattern_list,
            rate_list,
            rho_list,
            true_list,
            working_list,
            gamma_list,
            beta1_list,
            beta2_list,
            model_list,
            test_list,
        ):
            (n_cl, pat, rate, rho, true, working, gamma, b1, b2, model, test) = combo
            try:
                scenario = Scenario(
                    n_clusters=int(n_cl),
                    n_pattern=_parse_pattern(pat),
                    event_rate=float(rate),
                    rho=float(rho),
                    true_structure=true,
                    working_structure=working if working else true,
                    gamma=float(gamma),
                    beta1=_parse_beta(b1),
                    beta2=_parse_beta(b2),
                    model=model,
                    seed=_scenario_seed(base_seed, index),
                )
            except (ValueError, ConfigError) as exc:
                raise ConfigError(f"[{section}]: {exc}") from exc
            spec_id = (
                f"{section}-N{n_cl}-n{pat.replace('/', 'x')}-er{rate}-rho{rho}"
                f"-t_{scenario.true_structure}-w_{scenario.working_structure}"
                f"-b1_{scenario.beta1:g}-b2_{scenario.beta2:g}"
                f"-g{scenario.gamma:g}-{model}"
            )
            specs.append(
                ScenarioSpec(
                    id=spec_id,
                    scenario=scenario,
                    test_coefs=tuple(test.split(",")),
                )
            )
            index += 1
    return specs
