"""Monte Carlo harness: records, aggregation, config expansion, determinism."""

import math

import numpy as np
import pytest

from pgee import (
    EstimatorId,
    Scenario,
    ScenarioSpec,
    aggregate,
    parse_config,
    results_csv,
    run_grid,
    run_replication,
    run_scenario,
    summary_json,
)
from pgee.errors import ConfigError, TooFewConverged

FAST_ESTIMATORS = [EstimatorId.LZ, EstimatorId.KC, EstimatorId.AR, EstimatorId.PAN]


def _spec(**kw):
    base = dict(
        n_clusters=10,
        n_pattern=(4,),
        event_rate=0.2,
        rho=0.2,
        true_structure="exchangeable",
        working_structure="exchangeable",
        beta1=0.0,
        beta2=0.2,
        seed=101,
    )
    base.update(kw)
    return ScenarioSpec(id="unit", scenario=Scenario(**base), test_coefs=("beta1",))


class TestRunReplication:
    def test_record_shape(self):
        rec = run_replication(_spec(), 0, estimators=FAST_ESTIMATORS)
        assert rec["rep"] == 0
        assert rec["converged"]
        assert len(rec["beta"]) == 3
        lz = rec["estimators"]["LZ"]
        assert lz["computable"]
        assert len(lz["se"]) == 1 and len(lz["reject"]) == 1

    def test_unbalanced_flags_pooling(self):
        rec = run_replication(_spec(n_pattern=(2, 6)), 0, estimators=FAST_ESTIMATORS)
        assert rec["converged"]
        pan = rec["estimators"]["PAN"]
        assert not pan["computable"]
        assert pan["reason"] == "UnbalancedPooling"

    def test_reject_flag_matches_level(self):
        rec = run_replication(_spec(), 3, estimators=[EstimatorId.LZ])
        assert isinstance(rec["estimators"]["LZ"]["reject"][0], bool)

    def test_tests_both_coefficients_when_asked(self):
        spec = ScenarioSpec(
            id="both", scenario=_spec().scenario, test_coefs=("beta1", "beta2")
        )
        rec = run_replication(spec, 0, estimators=[EstimatorId.LZ])
        assert len(rec["estimators"]["LZ"]["se"]) == 2


class TestAggregate:
    def _records(self, n=120, converged=None, reject=False, se=1.0):
        recs = []
        for r in range(n):
            ok = True if converged is None else converged[r]
            rec = {"rep": r, "invalid": 0, "converged": ok}
            if ok:
                rec["beta"] = [0.0, float(np.sin(r)), 0.0]
                rec["estimators"] = {
                    "LZ": {
                        "computable": True,
                        "reason": None,
                        "se": [se],
                        "reject": [reject],
                    }
                }
            recs.append(rec)
        return recs

    def test_all_reject_flags_false_gives_zero(self):
        res = aggregate(self._records(), _spec(), estimators=[EstimatorId.LZ])
        cell = res.cells[0]
        assert cell.rejection_rate == 0.0
        assert cell.n_computable == 120

    def test_constant_se_equal_simse(self):
        recs = self._records()
        sim_se = np.std([r["beta"][1] for r in recs], ddof=1)
        for r in recs:
            r["estimators"]["LZ"]["se"] = [sim_se]
        res = aggregate(recs, _spec(), estimators=[EstimatorId.LZ])
        cell = res.cells[0]
        assert cell.median_se_ratio == pytest.approx(1.0)
        assert cell.cv_se == pytest.approx(0.0, abs=1e-12)
        assert cell.p95_over_p50 == pytest.approx(1.0)

    def test_too_few_converged(self):
        conv = [r < 50 for r in range(120)]
        with pytest.raises(TooFewConverged):
            aggregate(
                self._records(converged=conv), _spec(), estimators=[EstimatorId.LZ]
            )

    def test_non_converged_excluded_everywhere(self):
        conv = [r % 2 == 0 for r in range(300)]
        res = aggregate(
            self._records(n=300, converged=conv),
            _spec(),
            estimators=[EstimatorId.LZ],
        )
        assert res.b_effective == 150
        assert res.convergence_rate == pytest.approx(0.5)
        assert res.cells[0].n_computable == 150

    def test_mc_se_bound(self):
        res = aggregate(self._records(), _spec(), estimators=[EstimatorId.LZ])
        cell = res.cells[0]
        assert cell.mc_se == pytest.approx(0.0)  # rate 0 -> zero binomial SE
        # at B = 5000 the binomial SE of a rate near 0.05 stays within 0.0031
        assert math.sqrt(0.05 * 0.95 / 5000) <= 0.0031


class TestConfig:
    CORE = """
[core-null]
N = 10 20 30 50
event_rate = 0.1 0.2 0.3
rho = 0.05 0.1 0.2 0.3
true = exchangeable ar1
"""

    MISSPEC = """
[misspec-ar1-truth]
N = 10 20 30 50
event_rate = 0.1 0.2
rho = 0.2
true = ar1
working = exchangeable

[misspec-exch-truth]
N = 10 20 30 50
event_rate = 0.1 0.2
rho = 0.2
true = exchangeable
working = ar1
"""

    def test_core_grid_size(self):
        specs = parse_config(self.CORE, base_seed=1)
        assert len(specs) == 96
        assert len({s.id for s in specs}) == 96
        assert len({s.scenario.seed for s in specs}) == 96

    def test_misspec_grid_size(self):
        specs = parse_config(self.MISSPEC, base_seed=1)
        assert len(specs) == 16
        assert all(s.scenario.true_structure != s.scenario.working_structure for s in specs)

    def test_defaults_applied(self):
        specs = parse_config(
            "[a]\nN = 10\nevent_rate = 0.2\nrho = 0.2\ntrue = exchangeable\n",
            base_seed=0,
        )
        scen = specs[0].scenario
        assert scen.n_pattern == (4,)
        assert scen.gamma == 0.3
        assert scen.beta2 == 0.2
        assert specs[0].test_coefs == ("beta1",)

    def test_pattern_and_log2(self):
        text = (
            "[b]\nN = 10\nn = 2/6\nevent_rate = 0.2\nrho = 0.2\n"
            "true = exchangeable\nbeta1 = log2\ntest = beta1,beta2\n"
        )
        spec = parse_config(text, base_seed=0)[0]
        assert spec.scenario.n_pattern == (2, 6)
        assert spec.scenario.beta1 == pytest.approx(math.log(2))
        assert spec.test_coefs == ("beta1", "beta2")

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            parse_config("[a]\nN = 10\nevent_rate=0.2\nrho=0.2\ntrue=exchangeable\nfoo=1\n", 0)

    def test_missing_required_rejected(self):
        with pytest.raises(ConfigError):
            parse_config("[a]\nN = 10\nrho = 0.2\ntrue = exchangeable\n", 0)

    def test_same_seed_same_scenario_seeds(self):
        a = parse_config(self.CORE, base_seed=5)
        b = parse_config(self.CORE, base_seed=5)
        assert [s.scenario.seed for s in a] == [s.scenario.seed for s in b]
        c = parse_config(self.CORE, base_seed=6)
        assert [s.scenario.seed for s in a] != [s.scenario.seed for s in c]


class TestDeterminism:
    TINY = """
[tiny]
N = 10
event_rate = 0.2
rho = 0.2
true = exchangeable
"""

    def test_same_run_identical_output(self):
        specs = parse_config(self.TINY, base_seed=3)
        r1 = run_grid(specs, reps=60, workers=1, estimators=FAST_ESTIMATORS, min_converged=30)
        r2 = run_grid(specs, reps=60, workers=1, estimators=FAST_ESTIMATORS, min_converged=30)
        assert results_csv(r1) == results_csv(r2)
        assert summary_json(specs, r1, 3, 60) == summary_json(specs, r2, 3, 60)

    def test_worker_count_invariance(self):
        specs = parse_config(self.TINY, base_seed=3)
        serial = run_grid(specs, reps=40, workers=1, estimators=FAST_ESTIMATORS, min_converged=20)
        parallel = run_grid(specs, reps=40, workers=2, estimators=FAST_ESTIMATORS, min_converged=20)
        assert results_csv(serial) == results_csv(parallel)

    def test_worker_env_cap(self, monkeypatch):
        from pgee.harness import effective_workers

        monkeypatch.setenv("PGEE_THREADS", "2")
        assert effective_workers(8) == 2
        monkeypatch.delenv("PGEE_THREADS")
        assert effective_workers(8) == 8


class TestScenarioRun:
    def test_power_at_least_size(self):
        # sanity: at matched settings the alternative rejects at least as
        # often as the null, within two Monte Carlo standard errors
        null_spec = _spec(seed=2024)
        alt_spec = _spec(seed=2024, beta1=math.log(2))
        null_res = run_scenario(null_spec, 250, estimators=[EstimatorId.LZ], min_converged=100)
        alt_res = run_scenario(alt_spec, 250, estimators=[EstimatorId.LZ], min_converged=100)
        null_rate = null_res.cells[0].rejection_rate
        alt_rate = alt_res.cells[0].rejection_rate
        slack = 2 * math.sqrt(max(null_rate, 0.05) * 0.95 / 250)
        assert alt_rate >= null_rate - slack

    def test_run_scenario_end_to_end(self):
        res = run_scenario(_spec(), reps=60, estimators=FAST_ESTIMATORS, min_converged=30)
        assert res.b_total == 60
        assert res.b_effective >= 55
        lz = [c for c in res.cells if c.estimator == "LZ"][0]
        assert 0.0 <= lz.rejection_rate <= 1.0
        assert lz.median_se_ratio > 0

    def test_results_csv_schema(self):
        res = run_scenario(_spec(), reps=60, estimators=FAST_ESTIMATORS, min_converged=30)
        text = results_csv([res])
        lines = text.strip().split("\n")
        header = lines[0].split(",")
        assert header[0] == "scenario" and "rejection_rate" in header
        assert len(lines) == 1 + len(FAST_ESTIMATORS)  # one tested coefficient
        pan_row = [l for l in lines if ",PAN," in l][0]
        assert pan_row.count(",") == len(header) - 1
