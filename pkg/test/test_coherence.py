import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ppi.calibration import country_config
from ppi.coherence import (
    CoherenceResult,
    Metric,
    allocative_inefficiencies,
    coherence_index,
    coherence_with_significance,
    consistent_profile,
    distance,
    inconsistent_profile,
    indicator_similarity,
    mode_average_profile,
    register_coherence,
    retrospective_profile,
    stars_for,
)
from ppi.engine import expected_profile
from ppi.errors import (
    DegenerateVector,
    RunCountMismatch,
    UndefinedIndex,
    UnknownMode,
    ZeroVariance,
)
from ppi.network import SpilloverNetwork
from ppi.panel import generate_synthetic_panel, save_panel
from test.helpers import MockMCP, build_panel, line_network

METRICS = list(Metric)

profiles = arrays(
    np.float64, 6, elements=st.floats(0.01, 1.0, allow_nan=False, allow_infinity=False)
).map(lambda v: v / v.sum())


def dirichlet(rng, n):
    return rng.dirichlet(np.ones(n))


class TestInconsistentProfile:
    def test_hand_oracle(self):
        np.testing.assert_allclose(inconsistent_profile([0.5, 0.3, 0.2]).shares, [0.2, 0.3, 0.5])

    def test_uniform_is_fixed_point(self):
        q = np.full(4, 0.25)
        np.testing.assert_array_equal(inconsistent_profile(q).shares, q)

    def test_ties_ranked_by_index(self):
        np.testing.assert_allclose(inconsistent_profile([0.4, 0.3, 0.3]).shares, [0.3, 0.4, 0.3])

    @given(profiles)
    def test_involution_and_multiset(self, q):
        r = inconsistent_profile(q)
        np.testing.assert_array_equal(np.sort(r.shares), np.sort(q))
        if len(np.unique(q)) == q.size:
            np.testing.assert_array_equal(inconsistent_profile(r).shares, q)


class TestDistance:
    @pytest.mark.parametrize("metric", METRICS)
    def test_identity(self, metric):
        x = np.array([0.1, 0.5, 0.4])
        assert distance(x, x, metric) == pytest.approx(0.0, abs=1e-12)

    def test_hand_values(self):
        assert distance([0.1, 0.9], [0.3, 0.7], "l1") == pytest.approx(0.4)
        assert distance([1.0, 0.0], [0.0, 1.0], "cosine") == pytest.approx(1.0)
        assert distance([1.0, 0.0], [0.0, 1.0], "euclidean") == pytest.approx(np.sqrt(2))
        assert distance([0.2, 0.8], [0.8, 0.2], "correlation") == pytest.approx(2.0)

    def test_degenerate(self):
        with pytest.raises(DegenerateVector):
            distance([0.25] * 4, [0.1, 0.2, 0.3, 0.4], "correlation")
        with pytest.raises(DegenerateVector):
            distance([0.0, 0.0], [0.5, 0.5], "cosine")

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            distance([0.5, 0.5], [1.0], "l1")


class TestCoherenceIndex:
    def test_anchors(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            q = dirichlet(rng, 8)
            r = inconsistent_profile(q).shares
            for metric in METRICS:
                assert coherence_index(q, q, r, metric) == pytest.approx(1.0, abs=1e-12)
                assert coherence_index(r, q, r, metric) == pytest.approx(-1.0, abs=1e-12)
            p = (q + r) / 2
            assert coherence_index(p, q, r, "l1") == pytest.approx(0.0, abs=1e-12)
            assert coherence_index(p, q, r, "euclidean") == pytest.approx(0.0, abs=1e-12)

    def test_bounds_on_random_triples(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            p, q, r = dirichlet(rng, 6), dirichlet(rng, 6), dirichlet(rng, 6)
            for metric in METRICS:
                assert -1.0 <= coherence_index(p, q, r, metric) <= 1.0

    @settings(max_examples=50)
    @given(profiles, profiles)
    def test_permutation_invariance(self, p, q):
        r = inconsistent_profile(q).shares
        perm = np.arange(6)[::-1]
        try:
            h = coherence_index(p, q, r, "l1")
        except UndefinedIndex:
            return
        assert coherence_index(p[perm], q[perm], r[perm], "l1") == pytest.approx(h)

    def test_undefined(self):
        q = np.full(3, 1 / 3)
        with pytest.raises(UndefinedIndex):
            coherence_index(q, q, q)

    def test_metrics_agree_in_sign(self):
        agree = 0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            q = dirichlet(rng, 8)
            a = rng.uniform(-1.5, 1.5)
            p = q ** a * rng.lognormal(0, 0.1, size=8)
            p = p / p.sum()
            r = inconsistent_profile(q).shares
            signs = {np.sign(coherence_index(p, q, r, m)) for m in METRICS}
            agree += len(signs) == 1
        assert agree >= 80


class TestSignificance:
    def test_identical_runs_are_fully_coherent(self):
        rng = np.random.default_rng(2)
        runs = np.array([dirichlet(rng, 5) for _ in range(40)])
        result = coherence_with_significance(runs, runs, "l1")
        assert result.h == 1.0
        assert result.p_value == 0.0
        assert result.stars == "**"
        np.testing.assert_allclose(result.diffs, 0.0, atol=1e-15)

    def test_symmetric_samples_are_ambiguous(self):
        q = np.array([0.4, 0.3, 0.2, 0.1])
        r = inconsistent_profile(q).shares
        p_runs = np.array([q, r] * 20)
        q_runs = np.array([q] * 40)
        result = coherence_with_significance(p_runs, q_runs, "l1")
        assert result.h == pytest.approx(0.0)
        assert result.p_value == 1.0
        assert result.stars == ""

    def test_runs_with_undefined_index_are_skipped(self, caplog):
        rng = np.random.default_rng(5)
        uniform = np.full(5, 0.2)
        runs = np.array([dirichlet(rng, 5) for _ in range(35)] + [uniform] * 5)
        with caplog.at_level("WARNING", logger="ppi.coherence"):
            result = coherence_with_significance(runs, runs, "l1", country="A", mode="M")
        assert len(result.h_samples) == 35
        assert result.h == 1.0
        assert result.p_value == 0.0
        assert "skipped 5 of 40 runs" in caplog.text

    def test_all_runs_undefined(self):
        uniform = np.full((6, 4), 0.25)
        with pytest.raises(UndefinedIndex):
            coherence_with_significance(uniform, uniform, "l1")

    def test_run_count_mismatch(self):
        with pytest.raises(RunCountMismatch):
            coherence_with_significance(np.full((3, 2), 0.5), np.full((4, 2), 0.5))

    @pytest.mark.parametrize("p,stars", [(0.0, "**"), (0.049, "**"), (0.05, "*"), (0.099, "*"), (0.1, ""), (1.0, "")])
    def test_star_thresholds(self, p, stars):
        assert stars_for(p) == stars

    def test_result_dict_round_trip(self):
        rng = np.random.default_rng(3)
        p_runs = np.array([dirichlet(rng, 5) for _ in range(10)])
        q_runs = np.array([dirichlet(rng, 5) for _ in range(10)])
        panel = build_panel(np.full((2, 5, 3), 0.5), pillars=[1, 1, 2, 2, 3])
        result = coherence_with_significance(p_runs, q_runs, "cosine", panel, "C0", "C1")
        assert set(result.pillar_diffs) == {1, 2, 3}
        again = CoherenceResult.from_dict(result.to_dict())
        assert again.to_dict() == result.to_dict()
        assert result.h == pytest.approx(result.h_samples.mean())
        np.testing.assert_allclose(again.retrospective, p_runs.mean(axis=0))
        np.testing.assert_allclose(again.consistent, q_runs.mean(axis=0))


class TestInefficiencies:
    def test_hand_subtraction(self):
        ineff = allocative_inefficiencies([0.6, 0.4], [0.5, 0.5], pillars=[1, 2])
        np.testing.assert_allclose(ineff.diffs, [0.1, -0.1])
        assert ineff.pillar_diffs == pytest.approx({1: 0.1, 2: -0.1})

    def test_sum_to_zero(self):
        rng = np.random.default_rng(4)
        ineff = allocative_inefficiencies(dirichlet(rng, 7), dirichlet(rng, 7))
        assert ineff.diffs.sum() == pytest.approx(0.0, abs=1e-12)
        assert ineff.pillar_diffs == {}


class TestProfiles:
    def setup_method(self):
        values = np.zeros((2, 5, 3))
        values[0, :, 0] = [0.2, 0.3, 0.25, 0.1, 0.3]
        values[0, :, 1] = [0.3, 0.4, 0.3, 0.3, 0.5]
        values[0, :, 2] = [0.5, 0.6, 0.4, 0.6, 0.7]
        values[1, :, :] = values[0, :, 2:3]
        self.panel = build_panel(values, countries=["A", "M"], budget=[0.4, 0.4])
        self.network = line_network(5, 0.3)

    def test_retrospective_is_engine_composition(self):
        sample = retrospective_profile(self.panel, "A", self.network, 0.8, 6, seed=3, max_periods=300)
        config = country_config(self.panel, "A", self.network, 0.8, max_periods=300)
        assert expected_profile(config, 6, 3).mean == sample.mean

    def test_consistent_targets_mode_initial_values(self):
        sample = consistent_profile(self.panel, "A", "M", self.network, 0.8, 6, seed=3, max_periods=300)
        config = country_config(self.panel, "A", self.network, 0.8, targets=self.panel.first("M"), max_periods=300)
        assert expected_profile(config, 6, 3).mean == sample.mean

    def test_self_mode_is_degenerate(self):
        sample = consistent_profile(self.panel, "A", "A", self.network, 0.8, 4, seed=0)
        assert (sample.periods == 0).all()
        np.testing.assert_allclose(sample.mean.shares, [0.2] * 5)

    def test_unknown_mode(self):
        with pytest.raises(UnknownMode):
            consistent_profile(self.panel, "A", "ZZ", self.network, 0.8, 4, seed=0)

    def test_constant_country_gets_fallback(self):
        values = np.full((1, 5, 3), 0.4)
        panel = build_panel(values)
        sample = retrospective_profile(panel, "C0", SpilloverNetwork.isolated(5), 0.5, 3, seed=0)
        assert (sample.periods == 0).all()
        np.testing.assert_allclose(sample.mean.shares, [0.2] * 5)

    @pytest.mark.slow
    def test_own_trajectory_as_mode_is_significantly_coherent(self):
        p = retrospective_profile(self.panel, "A", self.network, 0.8, 200, seed=1, max_periods=500)
        q = consistent_profile(self.panel, "A", "M", self.network, 0.8, 200, seed=2, max_periods=500)
        result = coherence_with_significance(p, q, "l1", self.panel, "A", "M")
        assert result.h > 0
        assert result.p_value < 0.05

    def test_mode_average_profile(self):
        a = consistent_profile(self.panel, "A", "M", self.network, 0.8, 4, seed=0, max_periods=200)
        b = consistent_profile(self.panel, "A", "A", self.network, 0.8, 4, seed=0)
        mean, errors = mode_average_profile([a, b])
        np.testing.assert_allclose(mean.shares, (a.mean.shares + b.mean.shares) / 2)
        assert errors.shape == (5,)
        assert (errors >= 0).all()

    def test_mode_average_profile_of_plain_arrays(self):
        mean, errors = mode_average_profile([np.array([0.6, 0.4]), np.array([0.4, 0.6])])
        np.testing.assert_allclose(mean.shares, [0.5, 0.5])
        np.testing.assert_allclose(errors, [0.1, 0.1])
        _, errors = mode_average_profile([np.array([0.6, 0.4])])
        np.testing.assert_array_equal(errors, [0.0, 0.0])


class TestIndicatorSimilarity:
    def test_identical_and_anti_ordered(self):
        values = np.zeros((3, 5, 3))
        values[0, :, 2] = [0.1, 0.2, 0.3, 0.4, 0.5]
        values[1, :, 0] = [0.1, 0.2, 0.3, 0.4, 0.5]
        values[2, :, 0] = [0.9, 0.7, 0.5, 0.3, 0.1]
        panel = build_panel(values)
        assert indicator_similarity(panel, "C0", "C1") == pytest.approx(1.0)
        assert indicator_similarity(panel, "C0", "C2") == pytest.approx(-1.0)

    def test_matches_direct_formula(self, synthetic_panel):
        x, y = synthetic_panel.last("C00"), synthetic_panel.first("C01")
        assert indicator_similarity(synthetic_panel, "C00", "C01") == pytest.approx(np.corrcoef(x, y)[0, 1])

    def test_zero_variance(self):
        panel = build_panel(np.full((2, 5, 3), 0.5))
        with pytest.raises(ZeroVariance):
            indicator_similarity(panel, "C0", "C1")


def test_coherence_tool(tmp_path):
    mcp = MockMCP()
    register_coherence(mcp)
    csv, meta = save_panel(generate_synthetic_panel(3, 6, 6, seed=5), tmp_path / "p.csv")
    out = mcp.tools["coherence"](str(csv), "C00", "C01", 0.8, str(meta), runs=3, max_periods=200)
    assert "C00 following C01" in out
    assert "largest over-expenditures" in out
    assert mcp.tools["coherence"](str(csv), "C00", "XX", 0.8, str(meta)).startswith("Unable to compute coherence")
