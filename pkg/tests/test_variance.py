import dataclasses

import numpy as np
import pytest
from scipy.stats import norm

from logistic import fit
from roc import control_quantile
from scenario import generate_mvn_panel
from variance import (
    DegenerateSampleError,
    gradients_gh,
    influence_pieces,
    kde_at,
    panel_variance,
    sigma_components,
    silverman_bandwidth,
    smoothed_quantile,
    smoothed_survival,
)


def test_silverman_bandwidth():
    x = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    expected = 0.9 * min(np.std(x, ddof=1), 2.0 / 1.34) * 5 ** (-0.2)
    assert silverman_bandwidth(x) == pytest.approx(expected)


def test_silverman_bandwidth_zero_iqr():
    x = np.array([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0])
    expected = 0.9 * np.std(x, ddof=1) * 7 ** (-0.2)
    assert silverman_bandwidth(x) == pytest.approx(expected)


@pytest.mark.parametrize("samples", [[1.0], [2.0, 2.0, 2.0]])
def test_silverman_bandwidth_degenerate(samples):
    with pytest.raises(DegenerateSampleError):
        silverman_bandwidth(samples)


def test_kde_at():
    assert kde_at([0.0], 0.0, bandwidth=1.0) == pytest.approx(1 / np.sqrt(2 * np.pi))
    assert kde_at([0.0, 2.0], 1.0, bandwidth=0.5) == pytest.approx(norm.pdf(2.0) / 0.5)


def test_smoothed_quantile_inverts_survival():
    scores = np.random.default_rng(5).standard_normal(150)
    q = smoothed_quantile(scores, 0.1, 0.3)
    assert smoothed_survival(scores, q, 0.3) == pytest.approx(0.1, abs=1e-10)
    assert q == pytest.approx(control_quantile(scores, 0.1), abs=0.5)


def test_gradients_match_analytic_derivatives(panel):
    model = fit(panel.markers, panel.labels)
    t, bw = 0.1, 0.3
    g, h = gradients_gh(model, panel.markers, panel.labels, t, bandwidths=(bw, bw))

    cases = panel.markers[panel.labels == 1]
    controls = panel.markers[panel.labels == 0]
    case_scores = cases @ model.slopes
    control_scores = controls @ model.slopes
    u = control_quantile(control_scores, t)

    weights = norm.pdf((case_scores - u) / bw)
    g_expected = (weights[:, None] * cases).mean(axis=0) / bw

    q = smoothed_quantile(control_scores, t, bw)
    control_weights = norm.pdf((control_scores - q) / bw)
    dq = (control_weights[:, None] * controls).sum(axis=0) / control_weights.sum()
    h_expected = -kde_at(case_scores, u, bw) * dq

    np.testing.assert_allclose(g, g_expected, rtol=1e-4)
    np.testing.assert_allclose(h, h_expected, rtol=1e-4)


def test_gradients_reject_t_outside_unit_interval(panel):
    model = fit(panel.markers, panel.labels)
    with pytest.raises(ValueError):
        gradients_gh(model, panel.markers, panel.labels, 0.0)


def test_influence_pieces_structure(panel):
    model = fit(panel.markers, panel.labels)
    pieces = influence_pieces(model, panel.markers, panel.labels, 0.1)
    is_case = panel.labels == 1
    assert np.all(pieces.a1_term[~is_case] == 0.0)
    assert np.all(pieces.a3_term[is_case] == 0.0)
    assert pieces.a1_term.sum() == pytest.approx(0.0, abs=1e-9)
    assert pieces.f_d1_at_u > 0
    assert pieces.f_d0_at_u > 0
    assert not pieces.ratio_clamped
    np.testing.assert_allclose(
        pieces.psi, pieces.a1_term + pieces.a3_term + pieces.a2_plus_a4_term
    )


def test_panel_variance_is_single_panel(panel):
    model = fit(panel.markers, panel.labels)
    estimate = panel_variance(model, panel.markers, panel.labels, 0.1)
    assert estimate.sigma_delta == estimate.sigma_f
    assert estimate.sigma_r == 0.0
    assert np.all(estimate.per_subject_restricted == 0.0)
    assert 1e-4 < estimate.sigma_f < 2e-2


def test_identical_models_have_zero_variance(panel):
    model = fit(panel.markers, panel.labels)
    estimate = sigma_components(
        model, model, panel.markers, panel.labels, 0.1, restricted_columns=[0, 1]
    )
    assert estimate.sigma_delta == 0.0
    assert estimate.sigma_delta_reported == 0.0


def test_sigma_components(panel):
    full = fit(panel.markers, panel.labels)
    restricted = fit(panel.markers[:, :1], panel.labels)
    estimate = sigma_components(full, restricted, panel.markers, panel.labels, 0.1)
    assert estimate.sigma_delta == pytest.approx(
        estimate.sigma_f + estimate.sigma_r - 2 * estimate.sigma_fr
    )
    assert estimate.sigma_delta > 0
    assert estimate.sigma_fr > 0
    np.testing.assert_allclose(estimate.matrix, estimate.matrix.T)
    assert set(estimate.bandwidths) == {
        "full_case",
        "full_control",
        "restricted_case",
        "restricted_control",
    }


def test_kde_of_standard_normal_sample():
    samples = np.random.default_rng(0).standard_normal(10000)
    assert kde_at(samples, 0.0) == pytest.approx(0.3989, abs=0.02)


@pytest.mark.parametrize("x", [0.3, 1.0, 2.5])
def test_kde_symmetric_sample(x):
    samples = [-1.5, 1.5]
    assert kde_at(samples, x, 0.7) == pytest.approx(kde_at(samples, -x, 0.7))


def test_variance_matrix_is_positive_semidefinite(panel):
    full = fit(panel.markers, panel.labels)
    restricted = fit(panel.markers[:, :1], panel.labels)
    estimate = sigma_components(full, restricted, panel.markers, panel.labels, 0.1)
    assert np.linalg.eigvalsh(estimate.matrix).min() >= -1e-12


@pytest.fixture
def large_panel(correct_scenario):
    config = dataclasses.replace(correct_scenario, n_cases=5000, n_controls=5000)
    return generate_mvn_panel(config, 17)


@pytest.mark.parametrize("seed, shift", [(1, 1.0), (2, 0.6), (3, 1.5)])
def test_univariate_gradients_cancel(seed, shift):
    rng = np.random.default_rng(seed)
    markers = np.r_[shift + rng.standard_normal(2000), rng.standard_normal(2000)]
    labels = np.r_[np.ones(2000, dtype=int), np.zeros(2000, dtype=int)]
    model = fit(markers, labels)
    g, h = gradients_gh(model, markers, labels, 0.1)
    assert abs(g[0] + h[0]) <= 0.2 * abs(g[0])


def test_gradients_are_orthogonal_to_slopes(large_panel):
    model = fit(large_panel.markers, large_panel.labels)
    g, h = gradients_gh(model, large_panel.markers, large_panel.labels, 0.1)
    beta = model.slopes
    assert abs((g + h) @ beta) <= 0.2 * abs(g @ beta)


def test_case_gradient_matches_conditional_moment(large_panel, correct_scenario):
    model = fit(large_panel.markers, large_panel.labels)
    t = 0.1
    g, _ = gradients_gh(model, large_panel.markers, large_panel.labels, t)

    beta = model.slopes
    mu = np.asarray(correct_scenario.mu_case)
    cov = np.asarray(correct_scenario.cov_case)
    control_scores = large_panel.markers[large_panel.labels == 0] @ beta
    u = control_quantile(control_scores, t)
    score_mean, score_var = beta @ mu, beta @ cov @ beta
    # case density of the score at u times E[X | score = u, case]
    density = norm.pdf(u, loc=score_mean, scale=np.sqrt(score_var))
    moment = mu + cov @ beta * (u - score_mean) / score_var
    np.testing.assert_allclose(g, density * moment, rtol=0.15)


def test_duplicated_rows_halve_sigma(panel):
    full = fit(panel.markers, panel.labels)
    restricted = fit(panel.markers[:, :1], panel.labels)
    estimate = sigma_components(full, restricted, panel.markers, panel.labels, 0.1)

    markers = np.vstack([panel.markers, panel.markers])
    labels = np.tile(panel.labels, 2)
    doubled = sigma_components(
        fit(markers, labels), fit(markers[:, :1], labels), markers, labels, 0.1
    )
    assert doubled.sigma_f / estimate.sigma_f == pytest.approx(0.5, abs=0.05)
    assert doubled.sigma_r / estimate.sigma_r == pytest.approx(0.5, abs=0.05)
    assert doubled.sigma_fr / estimate.sigma_fr == pytest.approx(0.5, abs=0.05)
