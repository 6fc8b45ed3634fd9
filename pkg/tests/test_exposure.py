import numpy as np
import pytest

from estimation.exposure import (
    classify,
    exposure_probabilities,
    fit_naive_family,
    ht_bias_oracle,
    ht_estimate,
    regression_estimate,
)
from models.data_models import CONDITION_LABELS, ExperimentDesign, GaussianLinear
from models.errors import ConfigError, EmptyConditionError
from network.generators import generate_er
from network.graph import from_edges

from conftest import TRUTH


def _cycle(n, reverse=False):
    if reverse:
        return from_edges(n, [((i + 1) % n, i) for i in range(n)])
    return from_edges(n, [(i, (i + 1) % n) for i in range(n)])


class TestClassify:
    def test_direct_exposure(self):
        g = from_edges(2, [(1, 0)])
        assert classify([1, 0], g)[0] == 2

    def test_indirect_exposure(self):
        g = from_edges(2, [(1, 0)])
        assert classify([0, 1], g)[0] == 1

    def test_isolated_control(self, two_in_graph):
        assert classify([0, 1, 1], two_in_graph)[0] == 0


class TestExposureProbabilities:
    def test_closed_form(self):
        np.testing.assert_allclose(exposure_probabilities(0.25, 2), [0.421875, 0.328125, 0.140625, 0.109375])

    def test_no_influencers(self):
        np.testing.assert_allclose(exposure_probabilities(0.3, 0), [0.7, 0.0, 0.3, 0.0])

    def test_rows_sum_to_one(self):
        probs = exposure_probabilities(0.4, np.arange(10))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)

    def test_monte_carlo_agreement(self, rng):
        t = rng.random((200_000, 3)) < 0.25
        own, others = t[:, 0], t[:, 1:].any(axis=1)
        frequencies = np.bincount(2 * own + others, minlength=4) / len(t)
        np.testing.assert_allclose(frequencies, exposure_probabilities(0.25, 2), atol=0.005)

    def test_invalid_probability(self):
        with pytest.raises(ConfigError):
            exposure_probabilities(1.0, 3)


class TestHTEstimate:
    def test_single_subject_weight(self):
        g = from_edges(2, [(0, 1)])
        design = ExperimentDesign(treatment=[0, 0], assign_prob=0.5, outcomes=[9.0, 2.0])
        result = ht_estimate(design, g, strict=False)
        assert result.means["NoExposure"] == pytest.approx(8.0)
        assert result.excluded == [0]
        assert set(result.empty_conditions) == {"IndirectExposure", "DirectExposure", "FullExposure"}

    def test_strict_mode_raises_on_empty_condition(self):
        g = from_edges(2, [(0, 1)])
        design = ExperimentDesign(treatment=[0, 0], assign_prob=0.5, outcomes=[9.0, 2.0])
        with pytest.raises(EmptyConditionError):
            ht_estimate(design, g)

    def test_three_node_fixture(self):
        # a -> c, b -> c, c -> a with only a treated; b is isolated
        g = from_edges(3, [(0, 2), (1, 2), (2, 0)])
        design = ExperimentDesign(treatment=[1, 0, 0], assign_prob=0.5, outcomes=[1.0, 5.0, 3.0])
        result = ht_estimate(design, g, strict=False)
        assert result.means["DirectExposure"] == pytest.approx(1.0 / 0.25 / 2)
        assert result.means["IndirectExposure"] == pytest.approx(3.0 / 0.375 / 2)
        assert result.excluded == [1]
        assert result.conditions == ["DirectExposure", "NoExposure", "IndirectExposure"]

    def test_matching_frequencies_give_sample_means(self, four_cycle):
        # every node has degree 1 and each condition holds exactly a quarter of the subjects
        design = ExperimentDesign(treatment=[1, 1, 0, 0], assign_prob=0.5, outcomes=[3.0, 4.0, 2.0, 1.0])
        result = ht_estimate(design, four_cycle)
        assert [result.means[label] for label in CONDITION_LABELS] == pytest.approx([1.0, 2.0, 3.0, 4.0])

    def test_size_mismatch(self, two_in_graph):
        design = ExperimentDesign(treatment=[0, 1], assign_prob=0.5, outcomes=[0.0, 1.0])
        with pytest.raises(ValueError):
            ht_estimate(design, two_in_graph)


class TestRegressionEstimate:
    def test_simulation_truth_at_mean_degree_four(self):
        g = generate_er(5, 1.0, seed=0)
        design = ExperimentDesign(treatment=[0] * 5, assign_prob=0.25, outcomes=[0.0] * 5)
        means = regression_estimate(design, g, TRUTH)
        assert [means[label] for label in CONDITION_LABELS] == pytest.approx([0.2, 0.65, 0.7, 1.4])

    def test_flat_slopes_give_intercepts(self, small_experiment):
        design, g = small_experiment
        family = GaussianLinear(alpha=(1.0, 2.0, 3.0, 4.0), beta=(0.0,) * 4, sigma2=1.0)
        means = regression_estimate(design, g, family)
        assert [means[label] for label in CONDITION_LABELS] == pytest.approx([1.0, 2.0, 3.0, 4.0])

    def test_noiseless_data_recovered(self, small_experiment):
        design, g = small_experiment
        conditions = classify(design.treatment, g)
        degree = np.array([len(row) for row in g.in_neighbors])
        y = np.asarray(TRUTH.alpha)[conditions] + np.asarray(TRUTH.beta)[conditions] * degree
        exact = ExperimentDesign(treatment=design.treatment, assign_prob=0.5, outcomes=y.tolist())
        family = fit_naive_family(exact, g)
        identified = [c for c in range(4) if np.any(conditions == c) and np.ptp(degree[conditions == c]) > 0]
        assert identified
        for c in identified:
            assert family.alpha[c] == pytest.approx(TRUTH.alpha[c], abs=1e-9)
            assert family.beta[c] == pytest.approx(TRUTH.beta[c], abs=1e-9)
        if len(identified) == 4:
            assert regression_estimate(exact, g, family) == pytest.approx(regression_estimate(exact, g, TRUTH), abs=1e-8)


class TestBiasOracle:
    def test_exact_network_is_unbiased(self, rng):
        g = from_edges(6, [(i, (i + 1) % 6) for i in range(6)] + [(0, 3), (4, 1)])
        potential = rng.normal(size=(6, 4))
        result = ht_bias_oracle(g, g, potential, 0.3)
        assert result.method == "enumeration"
        assert result.n_assignments == 2**6
        for label in CONDITION_LABELS:
            assert result.bias[label] == pytest.approx(0.0, abs=1e-12)
            assert result.expected[label] == pytest.approx(result.true_means[label], abs=1e-12)

    def test_outcomes_blind_to_spillover_are_unbiased(self, rng):
        true_g, observed_g = _cycle(7), _cycle(7, reverse=True)
        own = rng.normal(size=(7, 2))
        potential = np.column_stack([own[:, 0], own[:, 0], own[:, 1], own[:, 1]])
        result = ht_bias_oracle(true_g, observed_g, potential, 0.5)
        for label in CONDITION_LABELS:
            assert result.bias[label] == pytest.approx(0.0, abs=1e-12)

    def test_mismeasured_network_is_biased(self):
        true_g = _cycle(6)
        observed_g = from_edges(6, [(i, (i + 1) % 6) for i in range(6)] + [(0, 3), (1, 4), (2, 5)])
        potential = np.tile([0.0, 1.0, 0.0, 1.0], (6, 1))
        result = ht_bias_oracle(true_g, observed_g, potential, 0.5)
        assert result.bias["IndirectExposure"] != pytest.approx(0.0, abs=1e-6)

    def test_monte_carlo_above_enumeration_limit(self, rng):
        g = _cycle(14)
        potential = rng.normal(size=(14, 4))
        result = ht_bias_oracle(g, g, potential, 0.5, n_assignments=5000, seed=1)
        assert result.method == "monte_carlo"
        assert result.n_assignments == 5000
        for label in CONDITION_LABELS:
            assert abs(result.bias[label]) <= 5 * result.standard_errors[label] + 1e-12

    def test_shape_mismatch(self, two_in_graph):
        with pytest.raises(ValueError):
            ht_bias_oracle(two_in_graph, two_in_graph, np.zeros((2, 4)), 0.5)
