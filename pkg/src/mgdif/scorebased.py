"""Observed-score DIF tests: generalized logistic regression and
generalized Mantel-Haenszel, plus Holm's step-down p-value adjustment.

Both methods match examinees on the total score over the anchor items plus
the studied item. GLR fits a pooled logistic model with focal-group
intercept and slope deviations and Wald-tests the deviation blocks; GMH
stratifies on the matching score and forms the quadratic-form chi-square
over the focal groups' correct-count deviations from their conditional
expectations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from .estimation import SeparationError, irls, wald_quadratic_form
from .irt import ResponseMatrix

log = logging.getLogger(__name__)

GLR_UNIFORM = "glr_uniform"
GLR_NONUNIFORM = "glr_nonuniform"
GMH = "gmh"


@dataclass
class MatchingScore:
    """Integer matching scores over anchors + studied item, missing as 0."""

    scores: np.ndarray
    missing_counts: np.ndarray
    item_set: list


@dataclass
class ScoreTestResult:
    """One statistic for one studied item; untestable items carry a reason."""

    item: object
    statistic: float = np.nan
    df: int = 0
    p: float = np.nan
    p_adjusted: float = None
    testable: bool = True
    reason: str = ""

    def effective_p(self) -> float:
        return self.p if self.p_adjusted is None else self.p_adjusted


@dataclass
class GlrItemResult:
    item: object
    nonuniform: ScoreTestResult = None
    uniform: ScoreTestResult = None


def matching_scores(data: ResponseMatrix, anchors, studied_item) -> MatchingScore:
    """Total score over the anchor set plus the studied item.

    Missing responses count as 0 toward the score; the per-person number of
    missing entries in the matching set is reported alongside.
    """
    if studied_item in anchors:
        raise ValueError("studied item may not be an anchor")
    items = list(anchors) + [studied_item]
    cols = [data.item_index(i) for i in items]
    block = data.responses[:, cols]
    missing = np.isnan(block).sum(axis=1)
    scores = np.nan_to_num(block).sum(axis=1).astype(int)
    return MatchingScore(scores, missing.astype(int), items)


def holm_adjust(pvalues):
    """Step-down familywise adjustment.

    Sort ascending, multiply the i-th smallest by (m - i + 1), enforce
    monotonicity by running maximum, cap at 1, restore input order.
    """
    p = np.asarray(pvalues, dtype=float)
    if p.size == 0:
        return []
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    order = np.argsort(p, kind="stable")
    m = p.size
    scaled = p[order] * (m - np.arange(m))
    adjusted = np.minimum(1.0, np.maximum.accumulate(scaled))
    out = np.empty_like(p)
    out[order] = adjusted
    return out.tolist()


# ---------------------------------------------------------------------------
# generalized logistic regression


def _glr_design(scores, groups, G, interactions):
    cols = [np.ones_like(scores, dtype=float), scores.astype(float)]
    for h in range(1, G):
        cols.append((groups == h).astype(float))
    if interactions:
        for h in range(1, G):
            cols.append((groups == h) * scores.astype(float))
    return np.column_stack(cols)


def glr_test(data: ResponseMatrix, anchors, studied_item,
             alpha: float = 0.05) -> GlrItemResult:
    """Pooled logistic DIF test for one studied item.

    Full model: logit P(X=1) = alpha + beta*S + sum_h (alpha_h d_h +
    beta_h d_h S) over focal groups h. The nonuniform statistic Wald-tests
    all beta_h = 0 (df = H) on the full fit; the uniform statistic refits
    with a common slope and Wald-tests all alpha_h = 0 (df = H). Persons
    with a missing studied response are dropped. Separation or a divergent
    fit marks the item untestable.
    """
    G = data.n_groups
    H = G - 1
    ms = matching_scores(data, anchors, studied_item)
    k = data.item_index(studied_item)
    keep = ~np.isnan(data.responses[:, k])
    y = data.responses[keep, k]
    s = ms.scores[keep]
    grp = data.group_of_person[keep]

    out = GlrItemResult(studied_item)
    for g in range(G):
        yg = y[grp == g]
        if yg.size == 0 or yg.min() == yg.max():
            reason = f"constant responses in group {data.group_names[g]}"
            log.warning("glr %s untestable: %s", studied_item, reason)
            fail = ScoreTestResult(studied_item, testable=False, reason=reason)
            out.nonuniform = fail
            out.uniform = fail
            return out

    try:
        X_full = _glr_design(s, grp, G, interactions=True)
        coef_full, cov_full = irls(X_full, y)
        C_non = np.zeros((H, X_full.shape[1]))
        for h in range(H):
            C_non[h, 2 + H + h] = 1.0
        t_non = wald_quadratic_form(coef_full, C_non, cov_full)
        out.nonuniform = ScoreTestResult(studied_item, t_non.statistic,
                                         t_non.df, t_non.p)

        X_common = _glr_design(s, grp, G, interactions=False)
        coef_c, cov_c = irls(X_common, y)
        C_uni = np.zeros((H, X_common.shape[1]))
        for h in range(H):
            C_uni[h, 2 + h] = 1.0
        t_uni = wald_quadratic_form(coef_c, C_uni, cov_c)
        out.uniform = ScoreTestResult(studied_item, t_uni.statistic,
                                      t_uni.df, t_uni.p)
    except SeparationError as exc:
        reason = str(exc)
        log.warning("glr %s untestable: %s", studied_item, reason)
        fail = ScoreTestResult(studied_item, testable=False, reason=reason)
        out.nonuniform = fail
        out.uniform = fail
    return out


def run_glr(data: ResponseMatrix, anchors, studied=None,
            adjustment: str = None) -> dict:
    """GLR over a family of studied items.

    Returns {item: GlrItemResult}. With adjustment="holm" the p-values are
    Holm-adjusted within each variant family (testable items only).
    """
    studied = list(studied) if studied is not None else [
        i for i in data.item_ids if i not in anchors]
    results = {i: glr_test(data, anchors, i) for i in studied}
    if adjustment == "holm":
        for pick in (lambda r: r.nonuniform, lambda r: r.uniform):
            testable = [i for i in studied if pick(results[i]).testable]
            adj = holm_adjust([pick(results[i]).p for i in testable])
            for i, padj in zip(testable, adj):
                pick(results[i]).p_adjusted = padj
    elif adjustment is not None:
        raise ValueError(f"unknown adjustment {adjustment!r}")
    return results


# ---------------------------------------------------------------------------
# generalized Mantel-Haenszel


def _stratum_tables(scores, y, grp, G):
    """Sorted stratum list of (label, n_by_group, correct_by_group)."""
    strata = []
    for s in np.unique(scores):
        rows = scores == s
        n = np.bincount(grp[rows], minlength=G).astype(float)
        x1 = np.bincount(grp[rows], weights=y[rows], minlength=G)
        strata.append([float(s), n, x1])
    return strata


def _pool_sparse_strata(strata, median):
    """Merge strata missing any group toward the median score."""
    while len(strata) > 1:
        bad = next((i for i, (_, n, _) in enumerate(strata)
                    if np.any(n == 0)), None)
        if bad is None:
            break
        label, n, x1 = strata[bad]
        if label < median and bad + 1 < len(strata):
            target = bad + 1
        elif bad - 1 >= 0:
            target = bad - 1
        else:
            target = bad + 1
        strata[target][1] = strata[target][1] + n
        strata[target][2] = strata[target][2] + x1
        del strata[bad]
    return strata


def gmh_test(data: ResponseMatrix, anchors, studied_item,
             alpha: float = 0.05) -> ScoreTestResult:
    """Generalized Mantel-Haenszel chi-square for one studied item.

    Strata are distinct matching scores; strata missing a group are pooled
    with the adjacent stratum toward the median score, and strata whose
    response margin is degenerate (all correct or all incorrect) are
    dropped. chi2 = (A-E)' V^{-1} (A-E) with df = number of focal groups.
    With two groups this is the uncorrected Mantel-Haenszel chi-square.
    """
    G = data.n_groups
    H = G - 1
    ms = matching_scores(data, anchors, studied_item)
    k = data.item_index(studied_item)
    keep = ~np.isnan(data.responses[:, k])
    y = data.responses[keep, k]
    scores = ms.scores[keep]
    grp = data.group_of_person[keep]

    strata = _stratum_tables(scores, y, grp, G)
    strata = _pool_sparse_strata(strata, float(np.median(scores)))
    # drop strata that still miss a group (possible only if pooling collapsed
    # everything) or carry a degenerate response margin
    usable = []
    for label, n, x1 in strata:
        T = n.sum()
        m1 = x1.sum()
        if np.any(n == 0) or m1 <= 0 or m1 >= T:
            continue
        usable.append((label, n, x1))
    if not usable:
        reason = "all strata degenerate"
        log.warning("gmh %s untestable: %s", studied_item, reason)
        return ScoreTestResult(studied_item, testable=False, reason=reason)

    A = np.zeros(H)
    E = np.zeros(H)
    V = np.zeros((H, H))
    for _, n, x1 in usable:
        T = n.sum()
        m1 = x1.sum()
        m0 = T - m1
        nf = n[1:]
        A += x1[1:]
        E += m1 * nf / T
        V += (m1 * m0 / (T * T * (T - 1.0))) * (T * np.diag(nf) - np.outer(nf, nf))
    diff = A - E
    try:
        stat = float(diff @ np.linalg.solve(V, diff))
    except np.linalg.LinAlgError:
        reason = "singular stratum covariance"
        log.warning("gmh %s untestable: %s", studied_item, reason)
        return ScoreTestResult(studied_item, testable=False, reason=reason)
    if not np.isfinite(stat) or stat < 0:
        return ScoreTestResult(studied_item, testable=False,
                               reason="indefinite stratum covariance")
    return ScoreTestResult(studied_item, stat, H, float(chi2.sf(stat, H)))


def run_gmh(data: ResponseMatrix, anchors, studied=None,
            adjustment: str = None) -> dict:
    """GMH over a family of studied items, optionally Holm-adjusted."""
    studied = list(studied) if studied is not None else [
        i for i in data.item_ids if i not in anchors]
    results = {i: gmh_test(data, anchors, i) for i in studied}
    if adjustment == "holm":
        testable = [i for i in studied if results[i].testable]
        adj = holm_adjust([results[i].p for i in testable])
        for i, padj in zip(testable, adj):
            results[i].p_adjusted = padj
    elif adjustment is not None:
        raise ValueError(f"unknown adjustment {adjustment!r}")
    return results
