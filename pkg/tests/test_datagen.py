"""Correlated binary generation: weights, moments, calibration, datasets."""

import math

import numpy as np
import pytest
from scipy.special import expit

from pgee import (
    Scenario,
    calibrate_intercept,
    clf_coefficients,
    clf_generate,
    clf_sample,
    generate_dataset,
)
from pgee.errors import BracketFailure


class TestCalibration:
    def test_symmetric_rate_gives_zero(self):
        scen = Scenario(n_clusters=10, event_rate=0.5, rho=0.1, beta1=0.0, beta2=0.0)
        assert calibrate_intercept(scen) == pytest.approx(0.0, abs=1e-8)

    def test_closed_form_no_covariates(self):
        scen = Scenario(n_clusters=10, event_rate=0.1, rho=0.1, beta1=0.0, beta2=0.0)
        assert calibrate_intercept(scen) == pytest.approx(math.log(1 / 9), abs=1e-7)

    def test_design_average_hits_target(self):
        scen = Scenario(
            n_clusters=10,
            event_rate=0.2,
            rho=0.1,
            beta1=math.log(2),
            beta2=0.2,
            gamma=0.3,
        )
        b0 = calibrate_intercept(scen)
        rows = scen.design_rows()
        mean = np.mean(expit(b0 + math.log(2) * rows[:, 0] + 0.2 * rows[:, 1]))
        assert mean == pytest.approx(0.2, abs=1e-8)

    def test_unreachable_rate_raises(self):
        scen = Scenario(n_clusters=10, event_rate=1e-10, rho=0.1)
        with pytest.raises(BracketFailure):
            calibrate_intercept(scen)


class TestClfCoefficients:
    def test_independent_weights_zero(self):
        b = clf_coefficients(np.full(4, 0.3), "exchangeable", 0.0)
        assert np.allclose(b, 0.0)

    def test_ar1_single_lag(self):
        b = clf_coefficients(np.full(5, 0.3), "ar1", 0.4)
        for j in range(1, 5):
            assert b[j, j - 1] == pytest.approx(0.4, abs=1e-12)
            assert np.allclose(b[j, : j - 1], 0.0, atol=1e-12)

    def test_exchangeable_common_weight(self):
        rho = 0.25
        b = clf_coefficients(np.full(5, 0.3), "exchangeable", rho)
        for j in range(1, 5):
            expected = rho / (1 + (j - 1) * rho)  # j previous positions
            assert np.allclose(b[j, :j], expected, atol=1e-12)


class TestClfDraws:
    def test_two_point_joint_law(self):
        # P(y1=1, y2=1) = mu1 mu2 + rho sqrt(w1 w2) by enumeration of the
        # sequential construction
        mu = np.array([0.5, 0.5])
        rho = 0.3
        b = clf_coefficients(mu, "exchangeable", rho)
        lam_given_1 = mu[1] + b[1, 0] * (1 - mu[0])
        p11 = mu[0] * lam_given_1
        assert p11 == pytest.approx(0.325, abs=1e-12)
        rng = np.random.default_rng(11)
        draws, invalid = clf_sample(mu, "exchangeable", rho, rng, 100_000)
        assert invalid == 0
        freq = np.mean((draws[:, 0] == 1) & (draws[:, 1] == 1))
        assert freq == pytest.approx(p11, abs=0.005)

    def test_independent_means(self):
        rng = np.random.default_rng(5)
        mu = np.array([0.2, 0.5, 0.7])
        draws, invalid = clf_sample(mu, "exchangeable", 0.0, rng, 100_000)
        assert invalid == 0
        assert np.allclose(draws.mean(axis=0), mu, atol=0.005)

    @pytest.mark.parametrize("structure", ["exchangeable", "ar1"])
    def test_pairwise_correlations(self, structure):
        rng = np.random.default_rng(17)
        mu = np.full(4, 0.2)
        draws, invalid = clf_sample(mu, structure, 0.2, rng, 100_000)
        assert invalid == 0
        corr = np.corrcoef(draws.T)
        for j in range(4):
            for k in range(j + 1, 4):
                target = 0.2 if structure == "exchangeable" else 0.2 ** (k - j)
                assert corr[j, k] == pytest.approx(target, abs=0.02)

    def test_single_draw_shape(self):
        rng = np.random.default_rng(1)
        y = clf_generate(np.full(4, 0.3), "ar1", 0.2, rng)
        assert y is not None
        assert y.shape == (4,)
        assert set(np.unique(y)) <= {0.0, 1.0}

    def test_invalid_draws_counted_not_clamped(self):
        # strong negative correlation with high means: a zero at position 1
        # pushes the next conditional mean above 1
        mu = np.array([0.9, 0.9, 0.5])
        rng = np.random.default_rng(3)
        draws, invalid = clf_sample(mu, "exchangeable", -0.45, rng, 2000)
        assert invalid > 0
        assert draws.shape[0] == 2000 - invalid
        # the retained rows all had conditional means inside (0, 1)
        assert set(np.unique(draws)) <= {0.0, 1.0}


class TestGenerateDataset:
    def _scenario(self, **kw):
        base = dict(
            n_clusters=10,
            n_pattern=(4,),
            event_rate=0.2,
            rho=0.2,
            true_structure="exchangeable",
            working_structure="exchangeable",
            seed=77,
        )
        base.update(kw)
        return Scenario(**base)

    def test_treated_count(self):
        scen = self._scenario()
        ds = generate_dataset(scen, np.random.default_rng(0))
        treated = [c for c in ds.clusters if c.X[0, 1] == 1.0]
        assert len(treated) == 3
        assert all(c.X[0, 1] == 1.0 for c in ds.clusters[:3])

    def test_alternating_pattern(self):
        scen = self._scenario(n_pattern=(2, 6))
        ds = generate_dataset(scen, np.random.default_rng(0))
        assert ds.cluster_sizes == (2, 6) * 5

    def test_time_grid(self):
        scen = self._scenario()
        ds = generate_dataset(scen, np.random.default_rng(0))
        assert np.allclose(ds.clusters[0].t, [0.2, 0.4, 0.6, 0.8])
        assert np.allclose(ds.clusters[0].X[:, 2], ds.clusters[0].t)

    def test_reduced_model_has_no_time(self):
        scen = self._scenario(model="reduced")
        ds = generate_dataset(scen, np.random.default_rng(0))
        assert ds.p == 2
        assert not ds.has_time

    def test_event_rate_monte_carlo(self):
        scen = self._scenario(n_clusters=2000, beta1=0.0, beta2=0.0, event_rate=0.2)
        ds = generate_dataset(scen, np.random.default_rng(4))
        pooled = np.concatenate([c.y for c in ds.clusters]).mean()
        assert pooled == pytest.approx(0.2, abs=0.01)

    def test_same_seed_bitwise_identical(self):
        scen = self._scenario()
        d1 = generate_dataset(scen, np.random.default_rng(np.random.SeedSequence((7, 0))))
        d2 = generate_dataset(scen, np.random.default_rng(np.random.SeedSequence((7, 0))))
        for a, b in zip(d1.clusters, d2.clusters):
            assert np.array_equal(a.y, b.y)

    def test_different_streams_differ(self):
        scen = self._scenario()
        d1 = generate_dataset(scen, np.random.default_rng(np.random.SeedSequence((7, 0))))
        d2 = generate_dataset(scen, np.random.default_rng(np.random.SeedSequence((7, 1))))
        ys1 = np.concatenate([c.y for c in d1.clusters])
        ys2 = np.concatenate([c.y for c in d2.clusters])
        assert not np.array_equal(ys1, ys2)


class TestScenarioValidation:
    def test_rho_admissibility(self):
        with pytest.raises(ValueError):
            Scenario(n_clusters=10, rho=-0.5, true_structure="exchangeable")
        with pytest.raises(ValueError):
            Scenario(n_clusters=10, rho=1.2, true_structure="ar1")

    def test_empty_arm_rejected(self):
        with pytest.raises(ValueError):
            Scenario(n_clusters=10, gamma=0.01)

    def test_independence_truth_rejected(self):
        with pytest.raises(ValueError):
            Scenario(n_clusters=10, true_structure="independence")

    def test_tiny_cluster_rejected(self):
        with pytest.raises(ValueError):
            Scenario(n_clusters=10, n_pattern=(1, 4))
