"""Calibration engine, logistic fitter, and Wald quadratic-form tests."""

import math

import numpy as np
import pytest
from scipy.stats import chi2

from mgdif.estimation import (FREE, SHARED, CalibrationSpec, Convergence,
                              SeparationError, calibrate, fit_logistic, irls,
                              wald_quadratic_form)
from mgdif.irt import ItemParams, ResponseMatrix, icc, make_grid

from conftest import simulate_groups


def brute_force_loglik(data, result, grid):
    """Marginal log-likelihood by exhaustive summation over grid nodes."""
    total = 0.0
    for i in range(data.n_persons):
        g = int(data.group_of_person[i])
        mu, sigma = result.group_dists[g]
        z = (grid.nodes - mu) / sigma
        w = np.exp(-0.5 * z * z)
        w = w / w.sum()
        like = 0.0
        for q, node in enumerate(grid.nodes):
            prob = 1.0
            for k in range(data.n_items):
                x = data.responses[i, k]
                if np.isnan(x):
                    continue
                p = float(icc(result.item_params(k, g), node))
                prob *= p if x == 1 else 1.0 - p
            like += w[q] * prob
        total += math.log(like)
    return total


def test_loglik_matches_brute_force_tiny_instance():
    """EM marginal log-likelihood equals direct summation to 1e-10."""
    grid = make_grid(2, -1.0, 1.0)
    data = ResponseMatrix(np.array([[1.0, 0.0], [0.0, 0.0], [1.0, 1.0]]),
                          np.array([0, 0, 0]), ["i1", "i2"], ["only"])
    spec = CalibrationSpec([SHARED, SHARED], ["2PL", "2PL"], grid,
                           convergence=Convergence(max_cycles=30))
    result = calibrate(data, spec)
    assert abs(result.loglik - brute_force_loglik(data, result, grid)) <= 1e-10


def test_loglik_matches_brute_force_with_missing_and_groups():
    """The exhaustive-summation identity also holds with gaps and 2 groups."""
    grid = make_grid(3, -2.0, 2.0)
    data = ResponseMatrix(
        np.array([[1.0, np.nan], [0.0, 1.0], [np.nan, 0.0], [1.0, 1.0]]),
        np.array([0, 0, 1, 1]), ["i1", "i2"], ["ref", "foc"])
    spec = CalibrationSpec([SHARED, FREE], ["2PL", "2PL"], grid,
                           convergence=Convergence(max_cycles=30))
    result = calibrate(data, spec)
    assert abs(result.loglik - brute_force_loglik(data, result, grid)) <= 1e-10


def test_parameter_recovery_single_group():
    """Single-group 2PL data from known truth recovers a and b."""
    items = [ItemParams(1.5, 0.0), ItemParams(1.5, 0.0)]
    data = simulate_groups(items, [(0.0, 1.0)], [5000], seed=11)
    spec = CalibrationSpec([SHARED] * 2, ["2PL"] * 2, make_grid(41, -4, 4))
    result = calibrate(data, spec)
    for k in range(2):
        a, b, _ = result.params[k, 0]
        assert abs(a - 1.5) <= 0.15
        assert abs(b - 0.0) <= 0.1


def test_b_recovery_mean_absolute_error():
    """Across a 6-item 2PL test at n=5000, mean |b_hat - b| stays below 0.1."""
    items = [ItemParams(a, b) for a, b in
             ((1.2, -1.0), (0.8, -0.3), (1.5, 0.0), (1.0, 0.4), (1.3, 0.9),
              (0.9, 1.4))]
    data = simulate_groups(items, [(0.0, 1.0)], [5000], seed=23)
    spec = CalibrationSpec([SHARED] * 6, ["2PL"] * 6, make_grid(41, -4, 4))
    result = calibrate(data, spec)
    errs = [abs(result.params[k, 0, 1] - items[k].b) for k in range(6)]
    assert np.mean(errs) < 0.1


def test_shared_constraint_forces_equal_estimates(two_group_2pl):
    spec = CalibrationSpec([SHARED] * 6, ["2PL"] * 6, make_grid(21, -4, 4),
                           convergence=Convergence(max_cycles=60))
    result = calibrate(two_group_2pl, spec)
    assert np.allclose(result.params[:, 0, :], result.params[:, 1, :])


def test_loglik_trace_monotone(two_group_2pl):
    spec = CalibrationSpec([SHARED] * 6, ["2PL"] * 6, make_grid(21, -4, 4))
    result = calibrate(two_group_2pl, spec)
    assert result.converged
    trace = np.asarray(result.loglik_trace)
    assert np.all(np.diff(trace) >= -1e-8)


def test_posterior_masses_are_distributions(two_group_2pl):
    spec = CalibrationSpec([SHARED] * 6, ["2PL"] * 6, make_grid(21, -4, 4))
    result = calibrate(two_group_2pl, spec)
    assert result.posterior_masses.shape == (two_group_2pl.n_persons, 21)
    assert np.allclose(result.posterior_masses.sum(axis=1), 1.0)
    assert np.all(result.posterior_masses >= 0)


def test_reference_group_distribution_fixed(two_group_2pl):
    spec = CalibrationSpec([SHARED] * 6, ["2PL"] * 6, make_grid(21, -4, 4))
    result = calibrate(two_group_2pl, spec)
    assert result.group_dists[0] == (0.0, 1.0)
    mu1, sigma1 = result.group_dists[1]
    assert -1.0 < mu1 < 0.2       # truth -0.4
    assert 0.5 < sigma1 < 1.5     # truth 0.9


def test_free_items_differ_across_groups(two_group_2pl):
    constraints = [FREE] + [SHARED] * 5
    spec = CalibrationSpec(constraints, ["2PL"] * 6, make_grid(21, -4, 4))
    result = calibrate(two_group_2pl, spec)
    assert not np.allclose(result.params[0, 0, :2], result.params[0, 1, :2])
    assert np.allclose(result.params[1:, 0, :], result.params[1:, 1, :])
    assert result.param_index.has("a", 0, 0)
    assert result.param_index.has("a", 0, 1)


def test_covariance_symmetric_psd(two_group_2pl):
    spec = CalibrationSpec([FREE] + [SHARED] * 5, ["2PL"] * 6,
                           make_grid(21, -4, 4))
    result = calibrate(two_group_2pl, spec)
    cov = result.covariance
    assert np.allclose(cov, cov.T)
    eig = np.linalg.eigvalsh(cov)
    assert eig.min() >= -1e-8 * max(1.0, eig.max())
    assert len(result.param_index) == cov.shape[0]


def test_degenerate_item_excluded():
    """An item answered identically by everyone is dropped with a record."""
    rng = np.random.default_rng(5)
    resp = (rng.random((120, 3)) < 0.6).astype(float)
    resp[:, 1] = 1.0
    data = ResponseMatrix(resp, np.zeros(120, dtype=int),
                          ["i1", "i2", "i3"], ["g"])
    spec = CalibrationSpec([SHARED] * 3, ["2PL"] * 3, make_grid(11, -4, 4))
    result = calibrate(data, spec)
    assert result.excluded_items == ["i2"]
    assert result.item_ids == ["i1", "i3"]
    assert result.params.shape[0] == 2


def test_json_roundtrip(two_group_2pl):
    spec = CalibrationSpec([SHARED] * 6, ["2PL"] * 6, make_grid(21, -4, 4))
    result = calibrate(two_group_2pl, spec)
    blob = result.to_json()
    assert isinstance(blob, str)
    import json
    parsed = json.loads(blob)
    assert parsed["loglik"] == pytest.approx(result.loglik)
    assert len(parsed["loglik_trace"]) == len(result.loglik_trace)
    assert parsed["group_dists"][0] == [0.0, 1.0]


# ---------------------------------------------------------------------------
# logistic fitter


def test_fit_logistic_two_point_closed_form():
    """Saturated two-point fit matches logit algebra to 1e-8."""
    scores = np.array([0.0] * 10 + [1.0] * 10)
    p0, p1 = 0.3, 0.8
    y = np.array([1.0] * 3 + [0.0] * 7 + [1.0] * 8 + [0.0] * 2)
    fit = fit_logistic(scores, y, np.zeros(20, dtype=int))
    alpha = math.log(p0 / (1 - p0))
    beta = math.log(p1 / (1 - p1)) - alpha
    assert abs(fit.alpha[0] - alpha) <= 1e-8
    assert abs(fit.beta[0] - beta) <= 1e-8
    assert fit.converged


def test_fit_logistic_per_group_blocks():
    rng = np.random.default_rng(3)
    scores = rng.integers(0, 10, size=300).astype(float)
    groups = np.repeat([0, 1], 150)
    logits = -1.0 + 0.5 * scores
    y = (rng.random(300) < 1 / (1 + np.exp(-logits))).astype(float)
    fit = fit_logistic(scores, y, groups)
    assert fit.alpha.shape == (2,) and fit.beta.shape == (2,)
    assert fit.covariance.shape == (4, 4)
    # cross-group covariance blocks are exactly zero
    assert np.allclose(fit.covariance[:2][:, 2:], 0.0)


def test_fit_logistic_separation_error_names_group():
    scores = np.array([0.0, 1.0, 2.0, 0.0, 1.0, 2.0])
    y = np.array([1.0, 1.0, 1.0, 0.0, 1.0, 0.0])
    groups = np.array([0, 0, 0, 1, 1, 1])
    with pytest.raises(SeparationError) as err:
        fit_logistic(scores, y, groups)
    assert err.value.group == 0


def test_fit_logistic_null_slope_coverage():
    """With responses independent of the score, |beta| < 3 SE almost always."""
    rng = np.random.default_rng(17)
    hits = 0
    n_sets = 200
    for _ in range(n_sets):
        scores = rng.integers(0, 8, size=250).astype(float)
        y = (rng.random(250) < 0.5).astype(float)
        try:
            fit = fit_logistic(scores, y, np.zeros(250, dtype=int))
        except SeparationError:
            continue
        se = math.sqrt(fit.covariance[1, 1])
        hits += abs(fit.beta[0]) < 3 * se
    assert hits / n_sets >= 0.99


def test_irls_gradient_zero_at_optimum():
    """Score equations hold at the fitted coefficients."""
    rng = np.random.default_rng(29)
    X = np.column_stack([np.ones(400), rng.normal(size=400)])
    logits = 0.3 - 0.8 * X[:, 1]
    y = (rng.random(400) < 1 / (1 + np.exp(-logits))).astype(float)
    coef, _cov = irls(X, y)
    p = 1 / (1 + np.exp(-(X @ coef)))
    grad = X.T @ (y - p)
    assert np.max(np.abs(grad)) < 1e-6
    # analytic gradient matches central finite differences of the loglik
    def loglik(c):
        eta = X @ c
        return float(y @ eta - np.logaddexp(0.0, eta).sum())
    h = 1e-6
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        fd = (loglik(coef + e) - loglik(coef - e)) / (2 * h)
        assert fd == pytest.approx(grad[j], abs=1e-5)


# ---------------------------------------------------------------------------
# Wald quadratic form


def test_wald_zero_contrast_gives_zero():
    est = np.array([1.0, 1.0])
    C = np.array([[1.0, -1.0]])
    res = wald_quadratic_form(est, C, np.eye(2))
    assert res.statistic == pytest.approx(0.0, abs=1e-15)
    assert res.p == pytest.approx(1.0)


def test_wald_scalar_case():
    res = wald_quadratic_form(np.array([2.0]), np.array([[1.0]]),
                              np.array([[1.0]]))
    assert res.statistic == pytest.approx(4.0)
    assert res.df == 1
    assert res.p == pytest.approx(0.045500263896358414, abs=1e-12)


def test_wald_two_contrasts_identity():
    est = np.array([1.0, 1.0])
    res = wald_quadratic_form(est, np.eye(2), np.eye(2))
    assert res.statistic == pytest.approx(2.0)
    assert res.df == 2
    assert res.p == pytest.approx(math.exp(-1.0), abs=1e-12)


def test_wald_row_scaling_invariance():
    rng = np.random.default_rng(41)
    est = rng.normal(size=5)
    L = rng.normal(size=(5, 5))
    cov = L @ L.T + np.eye(5)
    C = rng.normal(size=(3, 5))
    base = wald_quadratic_form(est, C, cov)
    scaled = wald_quadratic_form(est, np.diag([2.0, 0.5, 7.0]) @ C, cov)
    assert scaled.statistic == pytest.approx(base.statistic, rel=1e-10)
    assert scaled.df == base.df == 3


def test_wald_singular_falls_back_to_pseudo_inverse():
    est = np.array([1.0, 2.0, 3.0])
    C = np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])  # rank 1
    res = wald_quadratic_form(est, C, np.eye(3))
    assert res.used_pinv
    assert res.df == 1
    assert res.statistic == pytest.approx(1.0)
    assert res.p == pytest.approx(chi2.sf(1.0, 1))
