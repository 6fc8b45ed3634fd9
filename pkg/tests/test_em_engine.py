import numpy as np
import pytest
from scipy.special import logit
from scipy.stats import norm

import estimation.em_engine as em_engine
from estimation.em_engine import (
    contrasts,
    e_step,
    estimate_means,
    fit,
    m_step_binomial,
    m_step_gaussian,
    m_step_pq,
    pq_objective,
    profile_responsibilities,
)
from estimation.exposure import classify, fit_hard_family, regression_estimate
from estimation.mixture import ExperimentData, log_likelihood
from estimation.regression import weighted_logit
from models.data_models import (
    CONDITION_LABELS,
    BetaBinomialPrior,
    BinomialLogit,
    CorruptionSpec,
    ExperimentDesign,
    FitConfig,
    GaussianLinear,
    MismeasureParams,
    PriorConfig,
)
from models.errors import FitFailedError
from network.generators import generate_er
from network.graph import corrupt, in_degrees

from conftest import TRUTH, corrupted_experiment, simulate_design

EXACT = MismeasureParams(p=0.0, q=0.0)
QUICK = dict(max_iters=25, n_starts=2, rel_tol=1e-6, threads=1)


@pytest.fixture
def data(small_experiment):
    design, g = small_experiment
    return ExperimentData([(design, g)], prior_config=PriorConfig(mode="density", mu=0.1, rho=0.01))


def _hard_gamma(data):
    gamma = np.zeros((data.n_subjects, 4, data.n_degrees))
    gamma[np.arange(data.n_subjects), data.observed_condition, data.observed_degree] = 1.0
    return gamma


class TestEStep:
    def test_exact_network_gives_point_masses(self, data):
        gamma, _ = e_step(data, TRUTH, EXACT)
        np.testing.assert_allclose(gamma, _hard_gamma(data), atol=1e-12)

    def test_two_component_bayes_rule(self, small_experiment):
        design, g = small_experiment
        data = ExperimentData([(design, g)], tail_mass=None)
        tau = np.zeros((data.n_profiles, 4, data.n_degrees))
        tau[:, 0, 1] = tau[:, 1, 1] = 0.5
        family = GaussianLinear(alpha=(0.0, 1.0, 0.0, 0.0), beta=(0.0,) * 4, sigma2=1.0)
        gamma, loglik = e_step(data, family, EXACT, tau=tau)
        f0, f1 = norm.pdf(data.y, 0.0, 1.0), norm.pdf(data.y, 1.0, 1.0)
        np.testing.assert_allclose(gamma[:, 1, 1], f1 / (f0 + f1), rtol=1e-10)
        np.testing.assert_allclose(gamma[:, 0, 1], f0 / (f0 + f1), rtol=1e-10)
        assert loglik == pytest.approx(np.sum(np.log(0.5 * f0 + 0.5 * f1)), rel=1e-10)


class TestGaussianMStep:
    def test_hard_responsibilities_are_per_condition_ols(self, data):
        family = m_step_gaussian(data, _hard_gamma(data))
        expected = fit_hard_family(data.observed_condition, data.observed_degree, data.y)
        np.testing.assert_allclose(family.alpha, expected.alpha, atol=1e-10)
        np.testing.assert_allclose(family.beta, expected.beta, atol=1e-10)
        assert family.sigma2 == pytest.approx(expected.sigma2, rel=1e-10)

    def test_noiseless_line(self, data):
        line = data.with_outcomes(2.0 + 3.0 * data.observed_degree)
        family = m_step_gaussian(line, _hard_gamma(line))
        for c in set(line.observed_condition.tolist()):
            degrees = line.observed_degree[line.observed_condition == c]
            if np.ptp(degrees) > 0:
                assert family.alpha[c] == pytest.approx(2.0, abs=1e-9)
                assert family.beta[c] == pytest.approx(3.0, abs=1e-9)
        assert family.sigma2 < 1e-8

    def test_random_responsibilities_match_weighted_least_squares(self, data, rng):
        gamma = rng.random((data.n_subjects, 4, data.n_degrees))
        gamma /= gamma.sum(axis=(1, 2), keepdims=True)
        family = m_step_gaussian(data, gamma)
        degrees = data.degrees.astype(float)
        residual_total = 0.0
        for c in range(4):
            w = gamma[:, c, :].ravel()
            x = np.tile(degrees, data.n_subjects)
            y = np.repeat(data.y, data.n_degrees)
            design = np.column_stack([np.ones_like(x), x]) * np.sqrt(w)[:, None]
            coef = np.linalg.lstsq(design, y * np.sqrt(w), rcond=None)[0]
            assert family.alpha[c] == pytest.approx(coef[0], abs=1e-9)
            assert family.beta[c] == pytest.approx(coef[1], abs=1e-9)
            residual_total += np.sum(w * (y - coef[0] - coef[1] * x) ** 2)
        assert family.sigma2 == pytest.approx(residual_total / data.n_subjects, rel=1e-9)


class TestBinomialMStep:
    def test_half_scores_give_zero_logit(self, data):
        half = data.with_outcomes(np.full(data.n_subjects, 2.0))
        previous = BinomialLogit(alpha=(0.3,) * 4, beta=(-0.1,) * 4, trials=4)
        family, flags = m_step_binomial(half, _hard_gamma(half), previous)
        assert flags == []
        for c in set(half.observed_condition.tolist()):
            assert family.alpha[c] == pytest.approx(0.0, abs=1e-8)
            assert family.beta[c] == pytest.approx(0.0, abs=1e-8)

    def test_single_degree_ties_slope_to_zero(self):
        alpha, beta, clamped = weighted_logit(
            np.array([0.0, 1.0, 2.0]), np.array([0.0, 5.0, 0.0]), np.array([0.0, 6.0, 0.0]), trials=4
        )
        assert beta == 0.0
        assert alpha == pytest.approx(logit(0.3))
        assert not clamped

    def test_separation_is_clamped(self):
        degrees = np.arange(6, dtype=float)
        weight = np.ones(6)
        successes = np.array([0.0, 0.0, 0.0, 3.0, 3.0, 3.0])
        alpha, beta, clamped = weighted_logit(degrees, weight, successes, trials=3)
        assert clamped
        assert max(abs(alpha), abs(beta)) <= 20.0

    def test_recovers_generating_coefficients(self, rng):
        degrees = rng.integers(0, 11, size=10_000)
        y = rng.binomial(5, 1.0 / (1.0 + np.exp(-(0.5 + 0.1 * degrees))))
        grid = np.arange(11, dtype=float)
        weight = np.bincount(degrees, minlength=11).astype(float)
        successes = np.bincount(degrees, weights=y, minlength=11)
        alpha, beta, _ = weighted_logit(grid, weight, successes, trials=5)
        assert alpha == pytest.approx(0.5, abs=0.06)
        assert beta == pytest.approx(0.1, abs=0.012)


class TestPQStep:
    def test_exact_network_drives_pq_to_lower_bound(self, data):
        params, flags = m_step_pq(data, _hard_gamma(data), MismeasureParams(p=0.05, q=0.01))
        assert flags == []
        assert params.p <= 1e-3
        assert params.q <= 1e-3

    def test_stays_within_bounds(self, data):
        gamma, _ = e_step(data, TRUTH, MismeasureParams(p=0.3, q=0.05))
        params, _ = m_step_pq(data, gamma, MismeasureParams(p=0.3, q=0.05), bounds=(0.01, 0.5))
        assert 0.01 <= params.p <= 0.5
        assert 0.01 <= params.q <= 0.5

    def test_interior_optimum_is_stationary(self):
        g = generate_er(60, 0.08, seed=21)
        design = simulate_design(g, 0.5, TRUTH, seed=22)
        observed = corrupt(g, CorruptionSpec(p=0.2, q=0.02), seed=23)
        data = ExperimentData([(design, observed)], prior_config=PriorConfig(mode="density", mu=0.08, rho=0.01))
        gamma, _ = e_step(data, TRUTH, MismeasureParams(p=0.2, q=0.02))
        params, flags = m_step_pq(data, gamma, MismeasureParams(p=0.1, q=0.01))
        assert flags == []
        assert 1e-3 < params.p < 0.8
        assert 1e-4 < params.q < 0.8
        profile_gamma = profile_responsibilities(data, gamma)

        def objective(p, q):
            return pq_objective(data, profile_gamma, MismeasureParams(p=p, q=q))

        best = objective(params.p, params.q)
        scale = max(1.0, abs(best))
        h_p, h_q = 1e-5 * params.p, 1e-5 * params.q
        grad_p = (objective(params.p + h_p, params.q) - objective(params.p - h_p, params.q)) / (2 * h_p)
        grad_q = (objective(params.p, params.q + h_q) - objective(params.p, params.q - h_q)) / (2 * h_q)
        assert abs(grad_p) * params.p <= 1e-4 * scale
        assert abs(grad_q) * params.q <= 1e-4 * scale
        for factor in (0.99, 1.01):
            assert best >= objective(params.p * factor, params.q) - 1e-9 * scale
            assert best >= objective(params.p, params.q * factor) - 1e-9 * scale


class TestEstimateMeans:
    def test_exact_network_reduces_to_regression_estimate(self, small_experiment, data):
        design, g = small_experiment
        for exclude in (False, True):
            means = estimate_means(data, TRUTH, EXACT, exclude_isolated=exclude)
            expected = regression_estimate(design, g, TRUTH, exclude_isolated=exclude)
            assert means == pytest.approx(expected, abs=1e-10)

    def test_flat_slopes_give_intercepts(self, data):
        family = GaussianLinear(alpha=(1.0, 2.0, 3.0, 4.0), beta=(0.0,) * 4, sigma2=1.0)
        means = estimate_means(data, family, MismeasureParams(p=0.2, q=0.02))
        assert [means[label] for label in CONDITION_LABELS] == pytest.approx([1.0, 2.0, 3.0, 4.0])


class TestContrasts:
    def test_worked_example(self):
        result = contrasts([0.5, 0.7, 0.9, 1.0])
        assert result["direct"] == pytest.approx(0.4)
        assert result["network_intensive"] == pytest.approx(0.2)
        assert result["interaction"] == pytest.approx(-0.1)

    def test_equal_means(self):
        assert contrasts(dict.fromkeys(CONDITION_LABELS, 3.0)) == {
            "direct": 0.0,
            "network_intensive": 0.0,
            "interaction": 0.0,
        }

    def test_additive_means_have_no_interaction(self):
        assert contrasts([1.0, 1.5, 2.0, 2.5])["interaction"] == pytest.approx(0.0)


class TestFit:
    def test_loglik_never_decreases(self, data):
        result = fit(data, FitConfig(**QUICK))
        trace = np.asarray(result.loglik_trace)
        assert np.all(np.diff(trace) >= -1e-9 * np.maximum(1.0, np.abs(trace[:-1])))
        assert len(result.start_logliks) == 2
        assert result.loglik == max(v for v in result.start_logliks if v is not None)

    def test_start_at_truth_on_noiseless_data_converges_at_once(self, small_experiment):
        design, g = small_experiment
        # intercepts far apart, so no two cells share a mean
        family = GaussianLinear(alpha=(0.0, 10.0, 20.0, 30.0), beta=(0.1, 0.2, 0.3, 0.4), sigma2=1e-10)
        condition = classify(design.treatment, g)
        y = np.asarray(family.alpha)[condition] + np.asarray(family.beta)[condition] * in_degrees(g)
        noiseless = ExperimentData([(design, g)]).with_outcomes(y)
        start = MismeasureParams(p=1e-6, q=1e-6)
        result = fit(noiseless, FitConfig(max_iters=10, n_starts=1, threads=1), initial=(family, start))
        assert result.converged
        assert result.n_iters <= 2
        expected = regression_estimate(design, g, family)
        assert result.mean_outcomes == pytest.approx(expected, abs=1e-3)

    def test_stratified_fit_matches_unstratified_with_shared_rates(self):
        groups = ["a"] * 6 + ["b"] * 6
        g = generate_er(12, 0.25, seed=21, node_group=groups)
        design = simulate_design(g, 0.5, TRUTH, seed=22)
        prior = BetaBinomialPrior(mu=0.25, rho=0.0, size=11)
        plain = ExperimentData([(design, g)], priors=[{"all": prior}], tail_mass=None)
        strata = ExperimentData(
            [(design, g)], stratified=True, priors=[{"within": prior, "between": prior}], tail_mass=None
        )
        params = MismeasureParams(p=0.2, q=0.1)
        split = MismeasureParams(p=0.2, q=0.1, per_stratum={"within": (0.2, 0.1), "between": (0.2, 0.1)})
        assert log_likelihood(strata, TRUTH, split) == pytest.approx(log_likelihood(plain, TRUTH, params), abs=1e-8)
        for exclude in (False, True):
            assert estimate_means(strata, TRUTH, split, exclude) == pytest.approx(
                estimate_means(plain, TRUTH, params, exclude), abs=1e-8
            )
        config = FitConfig(max_iters=1, n_starts=1, threads=1)
        plain_fit = fit(plain, config, initial=(TRUTH, params))
        strata_fit = fit(strata, config.model_copy(update={"stratified": True}), initial=(TRUTH, split))
        assert strata_fit.loglik_trace[0] == pytest.approx(plain_fit.loglik_trace[0], abs=1e-8)
        assert set(strata_fit.mismeasure.per_stratum) == {"within", "between"}

    @pytest.mark.parametrize("family", ["gaussian", "binomial"])
    @pytest.mark.parametrize("seed", range(5))
    def test_ascent_over_random_experiments(self, seed, family):
        data = corrupted_experiment(seed, family)
        config = FitConfig(
            family=family,
            trials=5 if family == "binomial" else None,
            max_iters=15,
            n_starts=2,
            rel_tol=1e-12,
            seed=seed,
            threads=1,
        )
        trace = np.asarray(fit(data, config).loglik_trace)
        assert np.all(np.diff(trace) >= -1e-9 * np.maximum(1.0, np.abs(trace[:-1])))

    def test_seeded_fit_is_reproducible(self, data):
        first = fit(data, FitConfig(seed=4, **QUICK))
        second = fit(data, FitConfig(seed=4, **QUICK))
        assert first.model_dump() == second.model_dump()

    def test_thread_count_does_not_change_result(self, data):
        serial = fit(data, FitConfig(seed=2, **QUICK))
        parallel = fit(data, FitConfig(seed=2, **{**QUICK, "threads": 2}))
        assert serial.model_dump() == parallel.model_dump()

    def test_result_contents(self, data):
        result = fit(data, FitConfig(**QUICK))
        assert set(result.mean_outcomes) == set(CONDITION_LABELS)
        assert result.contrasts == pytest.approx(contrasts(result.mean_outcomes))
        assert 0.0 <= result.mismeasure.p < 1.0
        assert result.responsibilities.shape == (data.n_subjects, 4, data.n_degrees)
        assert result.priors == data.priors

    def test_binomial_family(self):
        g = generate_er(40, 0.1, seed=41)
        rng = np.random.default_rng(42)
        t = (rng.random(40) < 0.5).astype(int)
        design = ExperimentDesign(treatment=t.tolist(), assign_prob=0.5, outcomes=rng.integers(0, 6, 40).tolist())
        data = ExperimentData([(design, g)])
        result = fit(data, FitConfig(family="binomial", trials=5, **QUICK))
        assert isinstance(result.family, BinomialLogit)
        assert result.family.trials == 5

    def test_all_starts_failing(self, data, monkeypatch):
        def broken(*args, **kwargs):
            raise ValueError("broken chain")

        monkeypatch.setattr(em_engine, "run_chain", broken)
        with pytest.raises(FitFailedError) as excinfo:
            fit(data, FitConfig(n_starts=3, threads=1))
        assert len(excinfo.value.failures) == 3

