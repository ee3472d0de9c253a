import os
import tempfile
import unittest
from unittest import mock

import numpy as np
import pytest
from scipy import stats

from ppi.calibration import (
    CalibrationResult,
    calibration_table,
    country_config,
    empirical_corruption,
    fit_cluster_gamma,
    fit_gamma,
    golden_section_search,
    simulated_corruption,
)
from ppi.engine import SimulationConfig
from ppi.errors import CalibrationError, NoNetwork, SearchBoundsInvalid
from ppi.network import SpilloverNetwork, estimate_networks
from test.helpers import build_panel, line_network


def diversion_panel(levels, n_indicators=5, n_years=4, seed=0):
    """Identical random panels except for a constant diversion-of-funds indicator (index 2)."""
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.2, 0.5, size=(n_indicators, n_years))
    values = np.repeat(base[None], len(levels), axis=0)
    for k, level in enumerate(levels):
        values[k, 2, :] = 1.0 - level
    return build_panel(values)


class TestGoldenSection:
    def test_finds_parabola_minimum(self):
        x, fx = golden_section_search(lambda g: (g - 0.7) ** 2, 0.0, 2.0, tol=1e-4)
        assert x == pytest.approx(0.7, abs=1e-4)
        assert fx == pytest.approx(0.0, abs=1e-8)

    def test_minimum_at_boundary(self):
        x, _ = golden_section_search(lambda g: g, 0.1, 1.0, tol=1e-3)
        assert x == pytest.approx(0.1, abs=2e-3)

    def test_narrow_interval_evaluates_midpoint(self):
        calls = []
        x, _ = golden_section_search(lambda g: calls.append(g) or g, 0.5, 0.5005, tol=1e-3)
        assert x == pytest.approx(0.50025)
        assert len(calls) == 1


class TestCorruption:
    def test_empirical_is_one_minus_mean_diversion_indicator(self):
        panel = diversion_panel([0.35, 0.6])
        assert empirical_corruption(panel, "C0") == pytest.approx(0.35)
        assert empirical_corruption(panel, "C1") == pytest.approx(0.6)

    def test_simulated_is_deterministic_and_nonnegative(self):
        config = SimulationConfig(
            initial=np.array([0.2, 0.3, 0.25, 0.3]), targets=np.array([0.5, 0.6, 0.55, 0.5]),
            network=line_network(4), gamma=0.8, budget=0.4, rl_index=0, cc_index=1, max_periods=300,
        )
        a = simulated_corruption(config, 5, seed=2)
        assert a == simulated_corruption(config, 5, seed=2)
        assert a >= 0
        with pytest.raises(CalibrationError):
            simulated_corruption(config, 0, seed=2)


class TestFitClusterGamma:
    @pytest.mark.slow
    def test_recovers_known_gamma(self):
        config = SimulationConfig(
            initial=np.array([0.2, 0.3, 0.25, 0.35, 0.3]),
            targets=np.array([0.55, 0.6, 0.6, 0.65, 0.5]),
            network=line_network(5, 0.3), gamma=1.0, budget=0.4, rl_index=0, cc_index=1,
            max_periods=1000,
        )
        target = simulated_corruption(config.replace(gamma=0.3), 30, seed=11)
        gamma, loss, simulated = fit_cluster_gamma([config], [target], 30, seed=11, tol=1e-2)
        assert gamma == pytest.approx(0.3, abs=0.05)
        assert loss == pytest.approx((simulated[0] - target) ** 2)

    def test_invalid_bounds(self):
        with pytest.raises(SearchBoundsInvalid):
            fit_cluster_gamma([], [], 5, 0, bounds=(0.0, 1.0))
        with pytest.raises(SearchBoundsInvalid):
            fit_cluster_gamma([], [], 5, 0, bounds=(1.0, 0.5))

    def test_needs_matching_inputs(self):
        with pytest.raises(CalibrationError):
            fit_cluster_gamma([], [], 5, 0)


def fake_cluster_fit(configs, targets, n_runs, seed, bounds, tol):
    """One-dimensional k-means cost: gamma is the segment mean, loss the squared deviations."""
    targets = np.asarray(targets)
    gamma = float(targets.mean())
    return gamma, float(((targets - gamma) ** 2).sum()), [gamma] * len(targets)


class TestFitGamma(unittest.TestCase):

    def setUp(self):
        self.levels = [0.5, 0.1, 0.52, 0.11]
        self.panel = diversion_panel(self.levels)
        self.networks = {c: SpilloverNetwork.isolated(5) for c in self.panel.countries}

    def test_segments_follow_penalty(self):
        with mock.patch("ppi.calibration.fit_cluster_gamma", side_effect=fake_cluster_fit):
            result = fit_gamma(self.panel, self.networks, k_max=4, penalty=1e-3)
        self.assertEqual(result.k, 2)
        self.assertEqual(result.clusters, (("C1", "C3"), ("C0", "C2")))
        self.assertAlmostEqual(result.gamma["C1"], 0.105)
        self.assertAlmostEqual(result.gamma["C2"], 0.51)
        self.assertEqual(list(result.gamma), ["C0", "C1", "C2", "C3"])
        losses = [result.losses_by_k[k] for k in range(1, 5)]
        self.assertTrue(all(b <= a for a, b in zip(losses, losses[1:])))
        self.assertAlmostEqual(result.losses_by_k[4], 0.0)

    def test_default_penalty_merges(self):
        with mock.patch("ppi.calibration.fit_cluster_gamma", side_effect=fake_cluster_fit):
            result = fit_gamma(self.panel, self.networks, k_max=4)
        self.assertEqual(result.k, 1)
        self.assertEqual(len(set(result.gamma.values())), 1)

    def test_tiny_penalty_splits_everything(self):
        with mock.patch("ppi.calibration.fit_cluster_gamma", side_effect=fake_cluster_fit):
            result = fit_gamma(self.panel, self.networks, k_max=4, penalty=1e-9)
        self.assertEqual(result.k, 4)

    def test_missing_network(self):
        with self.assertRaises(NoNetwork):
            fit_gamma(self.panel, {"C0": self.networks["C0"]})

    def test_k_max_must_be_positive(self):
        with self.assertRaises(CalibrationError):
            fit_gamma(self.panel, self.networks, k_max=0)


@pytest.mark.slow
def test_identical_countries_share_one_cluster():
    values = np.random.default_rng(4).uniform(0.2, 0.5, size=(1, 5, 4))
    panel = build_panel(np.repeat(values, 2, axis=0))
    result = fit_gamma(
        panel, estimate_networks(panel), k_max=2, n_runs=10, seed=1,
        bounds=(0.1, 2.0), tol=0.05, max_periods=300,
    )
    assert result.k == 1
    assert result.gamma["C0"] == result.gamma["C1"]
    assert result.losses_by_k[2] == pytest.approx(result.losses_by_k[1])



def self_generated_targets(panel, networks, gammas, n_runs, seed, **engine):
    """Simulated D-bar of each country at its own gamma, used as its empirical corruption."""
    return {
        c: simulated_corruption(country_config(panel, c, networks[c], g, **engine), n_runs, seed)
        for c, g in gammas.items()
    }


@pytest.mark.slow
def test_fit_gamma_recovers_known_gamma_on_a_panel():
    initial = [0.2, 0.3, 0.25, 0.35, 0.3]
    final = [0.55, 0.6, 0.6, 0.65, 0.5]
    panel = build_panel(np.array([[initial, final]]).transpose(0, 2, 1), budget=[0.4])
    networks = {"C0": line_network(5, 0.3)}
    targets = self_generated_targets(panel, networks, {"C0": 0.3}, 30, 11, max_periods=1000)
    with mock.patch("ppi.calibration.empirical_corruption", side_effect=lambda _, c: targets[c]):
        result = fit_gamma(panel, networks, n_runs=30, seed=11, tol=1e-2, max_periods=1000)
    assert result.gamma["C0"] == pytest.approx(0.3, abs=0.05)
    assert result.empirical["C0"] == targets["C0"]


@pytest.mark.slow
def test_fitted_corruption_ranks_like_empirical():
    rng = np.random.default_rng(8)
    initial = rng.uniform(0.2, 0.35, size=(4, 5))
    values = np.stack([initial, initial + rng.uniform(0.1, 0.3, size=(4, 5))], axis=2)
    panel = build_panel(values, budget=[0.25, 0.3, 0.35, 0.4])
    networks = {c: line_network(5, 0.3) for c in panel.countries}
    gammas = dict(zip(panel.countries, [0.15, 0.4, 0.8, 1.5]))
    engine = dict(max_periods=200)
    targets = self_generated_targets(panel, networks, gammas, 4, 3, **engine)
    with mock.patch("ppi.calibration.empirical_corruption", side_effect=lambda _, c: targets[c]):
        result = fit_gamma(
            panel, networks, k_max=4, n_runs=4, seed=3, penalty=1e-6,
            bounds=(0.05, 2.0), tol=2e-2, **engine,
        )
    countries = list(panel.countries)
    rho = stats.spearmanr(
        [result.simulated[c] for c in countries], [result.empirical[c] for c in countries]
    ).statistic
    assert rho >= 0.8

class TestCalibrationResult(unittest.TestCase):

    def setUp(self):
        self.result = CalibrationResult(
            gamma={"A": 0.2, "B": 0.2, "C": 0.7},
            clusters=(("A", "B"), ("C",)),
            loss=0.01,
            empirical={"A": 0.3, "B": 0.35, "C": 0.6},
            simulated={"A": 0.31, "B": 0.33, "C": 0.62},
            k=2,
            losses_by_k={1: 0.2, 2: 0.01},
        )
        fd, self.path = tempfile.mkstemp(suffix=".json")
        os.close(fd)

    def tearDown(self):
        if os.path.exists(self.path):
            os.remove(self.path)

    def test_save_load_round_trip(self):
        self.result.save(self.path)
        self.assertEqual(CalibrationResult.load(self.path), self.result)

    def test_dict_layout(self):
        data = self.result.to_dict()
        self.assertEqual(data["countries"]["C"], {"gamma": 0.7, "cluster": 1, "empirical": 0.6, "simulated": 0.62})
        self.assertEqual(self.result.cluster_of("B"), 0)


def test_calibration_table_and_country_config():
    panel = diversion_panel([0.3, 0.4])
    result = CalibrationResult(
        gamma={"C0": 0.5, "C1": 0.9}, clusters=(("C0",), ("C1",)), loss=0.0,
        empirical={"C0": 0.3, "C1": 0.4}, simulated={"C0": 0.29, "C1": 0.41}, k=2,
    )
    table = calibration_table(panel, result)
    assert list(table.columns) == ["empirical", "simulated", "gamma", "cluster", "mean_other_indicators", "ipc"]
    assert table.loc["C1", "gamma"] == 0.9
    others = np.delete(panel.series("C0").mean(axis=0), 2).mean()
    assert table.loc["C0", "mean_other_indicators"] == pytest.approx(others)

    config = country_config(panel, "C0", SpilloverNetwork.isolated(5), 0.5, max_periods=50)
    np.testing.assert_array_equal(config.initial, panel.first("C0"))
    np.testing.assert_array_equal(config.targets, panel.last("C0"))
    assert config.budget == panel.budget("C0")
    assert config.max_periods == 50
