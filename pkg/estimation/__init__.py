from estimation.bootstrap import parametric_bootstrap, simulate_outcomes
from estimation.degree_prior import build_prior, moment_match, pmf, truncated_support
from estimation.em_engine import (
    contrasts,
    e_step,
    estimate_means,
    fit,
    m_step_binomial,
    m_step_gaussian,
    m_step_pq,
)
from estimation.exposure import (
    classify,
    exposure_probabilities,
    fit_naive_family,
    ht_bias_oracle,
    ht_estimate,
    regression_estimate,
)
from estimation.fit_diagnostics import FitDiagnostics, FitGrade
from estimation.mixture import (
    ExperimentData,
    family_density,
    log_likelihood,
    subject_tau,
    treated_count_posterior,
    untreated_count_posterior,
)
