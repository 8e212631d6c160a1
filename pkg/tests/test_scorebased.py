"""Observed-score DIF methods: matching scores, GLR, GMH, Holm adjustment."""

import numpy as np
import pytest

from mgdif.estimation import irls, wald_quadratic_form
from mgdif.irt import ResponseMatrix
from mgdif.scorebased import (glr_test, gmh_test, holm_adjust,
                              matching_scores, run_glr, run_gmh)


def _matrix_from_patterns(group_patterns, item_ids, group_names):
    """Build a ResponseMatrix by repeating (pattern, count) per group."""
    rows, gop = [], []
    for g, patterns in enumerate(group_patterns):
        for pattern, count in patterns:
            rows += [list(pattern)] * count
            gop += [g] * count
    return ResponseMatrix(np.array(rows, dtype=float), np.array(gop),
                          item_ids, group_names)


# ---------------------------------------------------------------------------
# matching scores


def test_matching_scores_all_zero():
    data = _matrix_from_patterns([[((0, 0, 0), 4)]], ["a1", "a2", "s"], ["g"])
    ms = matching_scores(data, ["a1", "a2"], "s")
    assert np.array_equal(ms.scores, np.zeros(4, dtype=int))


def test_matching_scores_bounds_and_membership():
    rng = np.random.default_rng(3)
    resp = (rng.random((50, 15)) < 0.6).astype(float)
    data = ResponseMatrix(resp, np.zeros(50, dtype=int),
                          [f"i{k}" for k in range(15)], ["g"])
    anchors = [f"i{k}" for k in range(14)]
    ms = matching_scores(data, anchors, "i14")
    assert ms.scores.min() >= 0 and ms.scores.max() <= 15
    assert ms.item_set == anchors + ["i14"]
    expected = resp.sum(axis=1).astype(int)
    assert np.array_equal(ms.scores, expected)


def test_matching_scores_missing_counts_as_zero():
    resp = np.array([[1.0, np.nan, 1.0], [np.nan, np.nan, 0.0]])
    data = ResponseMatrix(resp, np.zeros(2, dtype=int),
                          ["a1", "a2", "s"], ["g"])
    ms = matching_scores(data, ["a1", "a2"], "s")
    assert np.array_equal(ms.scores, [2, 0])
    assert np.array_equal(ms.missing_counts, [1, 2])


def test_matching_scores_rejects_studied_anchor():
    data = _matrix_from_patterns([[((1, 0), 3)]], ["a1", "s"], ["g"])
    with pytest.raises(ValueError):
        matching_scores(data, ["a1", "s"], "s")


# ---------------------------------------------------------------------------
# Holm adjustment


def test_holm_three_vector_hand_computed():
    assert holm_adjust([0.01, 0.04, 0.03]) == pytest.approx(
        [0.03, 0.06, 0.06], abs=0)


def test_holm_fixed_vectors_exact():
    assert holm_adjust([0.2]) == [0.2]
    assert holm_adjust([1.0, 1.0, 1.0]) == [1.0, 1.0, 1.0]
    assert holm_adjust([0.01, 0.011, 0.012, 0.013]) == pytest.approx(
        [0.04, 0.04, 0.04, 0.04], abs=1e-15)
    assert holm_adjust([0.3, 0.01]) == pytest.approx([0.3, 0.02], abs=0)
    assert holm_adjust([0.5, 0.6, 0.7, 0.2, 0.1]) == pytest.approx(
        [1.0, 1.0, 1.0, 0.8, 0.5], abs=1e-15)


def test_holm_monotone_and_bounded():
    rng = np.random.default_rng(8)
    for _ in range(40):
        p = rng.uniform(0, 1, size=rng.integers(1, 12))
        adj = np.array(holm_adjust(p))
        assert np.all(adj >= p - 1e-15)
        assert np.all(adj <= 1.0)
        order = np.argsort(p, kind="stable")
        assert np.all(np.diff(adj[order]) >= -1e-15)


def test_holm_rejects_bad_pvalues():
    with pytest.raises(ValueError):
        holm_adjust([0.5, 1.5])
    with pytest.raises(ValueError):
        holm_adjust([-0.1])


def test_holm_empty():
    assert holm_adjust([]) == []


# ---------------------------------------------------------------------------
# GMH


def _mh_chi_square_oracle(strata):
    """Classical 2-group uncorrected MH chi-square from (n0, x0, n1, x1)
    per stratum, written out longhand."""
    num, var = 0.0, 0.0
    for n0, x0, n1, x1 in strata:
        T = n0 + n1
        m1 = x0 + x1
        m0 = T - m1
        num += x1 - n1 * m1 / T
        var += n1 * n0 * m1 * m0 / (T * T * (T - 1.0))
    return num * num / var


def test_gmh_equals_two_group_mh_on_hand_tables():
    """Three hand-built stratified tables: quadratic form collapses to the
    classical uncorrected Mantel-Haenszel chi-square."""
    cases = []
    # scores span {1, 2} with both strata mixed and non-degenerate
    cases.append(_matrix_from_patterns(
        [[((1, 0, 0), 5), ((0, 1, 0), 3), ((0, 0, 1), 4),
          ((1, 1, 0), 6), ((1, 0, 1), 2), ((0, 1, 1), 3)],
         [((1, 0, 0), 2), ((0, 1, 0), 4), ((0, 0, 1), 6),
          ((1, 1, 0), 3), ((1, 0, 1), 5), ((0, 1, 1), 1)]],
        ["a1", "a2", "s"], ["ref", "foc"]))
    cases.append(_matrix_from_patterns(
        [[((1, 0, 0), 9), ((0, 0, 1), 2), ((1, 1, 0), 4), ((1, 0, 1), 4)],
         [((1, 0, 0), 5), ((0, 0, 1), 5), ((1, 1, 0), 2), ((1, 0, 1), 7)]],
        ["a1", "a2", "s"], ["ref", "foc"]))
    cases.append(_matrix_from_patterns(
        [[((1, 0), 8), ((0, 1), 5)], [((1, 0), 6), ((0, 1), 9)]],
        ["a1", "s"], ["ref", "foc"]))

    for data in cases:
        anchors = [i for i in data.item_ids if i != "s"]
        res = gmh_test(data, anchors, "s")
        ms = matching_scores(data, anchors, "s")
        k = data.item_index("s")
        strata = []
        for sval in np.unique(ms.scores):
            rows = ms.scores == sval
            grp = data.group_of_person[rows]
            y = data.responses[rows, k]
            n0, n1 = np.sum(grp == 0), np.sum(grp == 1)
            x0, x1 = y[grp == 0].sum(), y[grp == 1].sum()
            T, m1 = n0 + n1, x0 + x1
            if n0 == 0 or n1 == 0 or m1 <= 0 or m1 >= T:
                continue
            strata.append((n0, x0, n1, x1))
        assert res.testable and res.df == 1
        assert res.statistic == pytest.approx(_mh_chi_square_oracle(strata),
                                              abs=1e-9)


def test_gmh_zero_when_strata_proportions_equal():
    data = _matrix_from_patterns(
        [[((1, 0), 4), ((0, 1), 4)], [((1, 0), 6), ((0, 1), 6)]],
        ["a1", "s"], ["ref", "foc"])
    res = gmh_test(data, ["a1"], "s")
    assert res.testable
    assert res.statistic == pytest.approx(0.0, abs=1e-12)


def test_gmh_reference_swap_invariance():
    data = _matrix_from_patterns(
        [[((1, 0, 0), 5), ((0, 0, 1), 4), ((1, 1, 0), 6), ((1, 0, 1), 2)],
         [((1, 0, 0), 3), ((0, 0, 1), 6), ((1, 1, 0), 3), ((1, 0, 1), 5)]],
        ["a1", "a2", "s"], ["ref", "foc"])
    swapped = ResponseMatrix(data.responses, 1 - data.group_of_person,
                             data.item_ids, ["foc", "ref"])
    a = gmh_test(data, ["a1", "a2"], "s")
    b = gmh_test(swapped, ["a1", "a2"], "s")
    assert a.statistic == pytest.approx(b.statistic, rel=1e-12)


def test_gmh_pools_stratum_missing_a_group():
    """A stratum with no focal persons merges toward the median stratum;
    the result matches the hand-pooled classical chi-square."""
    # focal group has no score-3 persons; reference does
    data = _matrix_from_patterns(
        [[((1, 0, 0), 6), ((0, 0, 1), 5), ((1, 1, 0), 5), ((1, 0, 1), 4),
          ((1, 1, 1), 3)],
         [((1, 0, 0), 4), ((0, 0, 1), 7), ((1, 1, 0), 6), ((1, 0, 1), 3)]],
        ["a1", "a2", "s"], ["ref", "foc"])
    res = gmh_test(data, ["a1", "a2"], "s")
    # hand-pool: score-3 persons (3 ref, all correct) merge into score 2
    strata = [(11, 5, 11, 7),               # score 1 untouched
              (9 + 3, 4 + 3, 9, 3)]         # score 2 absorbs score 3
    assert res.testable
    assert res.statistic == pytest.approx(_mh_chi_square_oracle(strata),
                                          abs=1e-9)


def test_gmh_all_degenerate_untestable():
    data = _matrix_from_patterns(
        [[((1, 1), 5), ((0, 0), 5)], [((1, 1), 5), ((0, 0), 5)]],
        ["a1", "s"], ["ref", "foc"])
    res = gmh_test(data, ["a1"], "s")
    assert not res.testable
    assert "degenerate" in res.reason


def test_gmh_three_group_statistic_positive_df():
    rng = np.random.default_rng(5)
    resp = (rng.random((600, 6)) < 0.55).astype(float)
    gop = np.repeat([0, 1, 2], 200)
    data = ResponseMatrix(resp, gop, [f"i{k}" for k in range(6)],
                          ["r", "f1", "f2"])
    res = gmh_test(data, [f"i{k}" for k in range(5)], "i5")
    assert res.testable
    assert res.df == 2
    assert res.statistic >= 0
    assert 0 <= res.p <= 1


def test_run_gmh_holm_adjustment_marks_pvalues():
    rng = np.random.default_rng(12)
    resp = (rng.random((400, 8)) < 0.5).astype(float)
    gop = np.repeat([0, 1], 200)
    data = ResponseMatrix(resp, gop, [f"i{k}" for k in range(8)], ["r", "f"])
    anchors = [f"i{k}" for k in range(4)]
    out = run_gmh(data, anchors, adjustment="holm")
    for item, res in out.items():
        assert res.p_adjusted is not None
        assert res.p_adjusted >= res.p - 1e-15
    with pytest.raises(ValueError):
        run_gmh(data, anchors, adjustment="bonferroni")


# ---------------------------------------------------------------------------
# GLR


def test_glr_identical_groups_high_pvalues():
    rng = np.random.default_rng(21)
    half = (rng.random((300, 6)) < 0.55).astype(float)
    resp = np.vstack([half, half])
    gop = np.repeat([0, 1], 300)
    data = ResponseMatrix(resp, gop, [f"i{k}" for k in range(6)], ["r", "f"])
    res = glr_test(data, [f"i{k}" for k in range(5)], "i5")
    assert res.nonuniform.testable and res.uniform.testable
    assert res.nonuniform.statistic == pytest.approx(0.0, abs=1e-8)
    assert res.uniform.statistic == pytest.approx(0.0, abs=1e-8)
    assert res.nonuniform.p > 0.5 and res.uniform.p > 0.5


def test_glr_df_equals_focal_count():
    rng = np.random.default_rng(6)
    resp = (rng.random((900, 5)) < 0.55).astype(float)
    gop = np.repeat([0, 1, 2], 300)
    data = ResponseMatrix(resp, gop, [f"i{k}" for k in range(5)],
                          ["r", "f1", "f2"])
    res = glr_test(data, [f"i{k}" for k in range(4)], "i4")
    assert res.nonuniform.df == 2
    assert res.uniform.df == 2


def test_glr_constant_group_untestable():
    patterns_ref = [((1, 0, 1), 10), ((0, 1, 0), 10), ((1, 1, 1), 5)]
    patterns_foc = [((1, 0, 0), 10), ((0, 1, 0), 10)]  # studied always 0
    data = _matrix_from_patterns([patterns_ref, patterns_foc],
                                 ["a1", "a2", "s"], ["ref", "foc"])
    res = glr_test(data, ["a1", "a2"], "s")
    assert not res.nonuniform.testable
    assert "foc" in res.nonuniform.reason


def test_glr_detects_group_gap_given_score():
    """Focal group is 25 points worse on the studied item at every score
    level: the uniform deviation test catches it."""
    rng = np.random.default_rng(33)
    n = 1200
    rows, gop = [], []
    for g, shift in ((0, 0.0), (1, -1.4)):
        theta = rng.normal(0, 1, n)
        anchor_p = 1 / (1 + np.exp(-(theta[:, None] - [-0.5, 0.0, 0.5, 1.0])))
        anchors = (rng.random((n, 4)) < anchor_p).astype(float)
        studied_p = 1 / (1 + np.exp(-(theta + shift)))
        studied = (rng.random(n) < studied_p).astype(float)
        rows.append(np.column_stack([anchors, studied]))
        gop += [g] * n
    data = ResponseMatrix(np.vstack(rows), np.array(gop),
                          ["a1", "a2", "a3", "a4", "s"], ["ref", "foc"])
    res = glr_test(data, ["a1", "a2", "a3", "a4"], "s")
    assert res.uniform.p < 1e-4


def test_glr_interaction_statistic_scale_invariant():
    """The slope-deviation quadratic form does not change when the score is
    affinely rescaled (the sandwich absorbs the reparameterization)."""
    rng = np.random.default_rng(14)
    n = 500
    s = rng.integers(0, 16, n).astype(float)
    grp = rng.integers(0, 3, n)
    eta = -1.0 + 0.25 * s + 0.3 * (grp == 1) - 0.12 * s * (grp == 2)
    y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(float)

    def stat(scores):
        cols = [np.ones(n), scores, (grp == 1).astype(float),
                (grp == 2).astype(float), scores * (grp == 1),
                scores * (grp == 2)]
        X = np.column_stack(cols)
        coef, cov = irls(X, y)
        C = np.zeros((2, 6))
        C[0, 4] = 1.0
        C[1, 5] = 1.0
        return wald_quadratic_form(coef, C, cov).statistic

    assert stat(s) == pytest.approx(stat(3.0 * s + 7.0), rel=1e-6)


def test_run_glr_families_and_holm():
    rng = np.random.default_rng(44)
    resp = (rng.random((500, 8)) < 0.5).astype(float)
    gop = np.repeat([0, 1], 250)
    data = ResponseMatrix(resp, gop, [f"i{k}" for k in range(8)], ["r", "f"])
    anchors = [f"i{k}" for k in range(5)]
    out = run_glr(data, anchors, adjustment="holm")
    assert set(out) == {"i5", "i6", "i7"}
    for res in out.values():
        for t in (res.nonuniform, res.uniform):
            assert t.p_adjusted is not None
            assert t.p_adjusted >= t.p - 1e-15
