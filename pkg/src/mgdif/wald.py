"""Wald-type DIF tests on IRT item parameters.

Anchor identification ("screen round") refits every item with free per-group
(a, b) while holding the group ability distributions at their concurrent-
calibration estimates, and tests each item's stacked (a, b) differences
against the reference group (df = 2H for H focal groups). Unflagged items
become anchors. The confirmatory round then calibrates anchors shared and
the remaining items free, testing a-differences (nonuniform DIF, df = H)
and b-differences (uniform DIF, df = H) separately.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .estimation import (FREE, SHARED, CalibrationResult, CalibrationSpec,
                         Convergence, calibrate, wald_quadratic_form)
from .irt import QuadratureGrid, ResponseMatrix, default_grid

WALD2 = "wald2"
FALLBACK_SECOND_HALF = "fallback_second_half"


@dataclass
class AnchorSet:
    """Items held equal across groups, plus how they were chosen."""

    items: list
    source: str
    screen_pvalues: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.items:
            raise ValueError("anchor set may not be empty")


@dataclass
class WaldItemVerdict:
    item: object
    stat_a: float
    df_a: int
    p_a: float
    stat_b: float
    df_b: int
    p_b: float
    flagged_nonuniform: bool
    flagged_uniform: bool
    used_pinv: bool


@dataclass
class WaldVerdict:
    """Per studied item uniform/nonuniform decisions at one alpha."""

    alpha: float
    anchors: AnchorSet
    studied: list
    items: dict                    # item id -> WaldItemVerdict
    calibration: CalibrationResult


def _difference_contrast(index, kind, k, reference_group, groups):
    rows = []
    for g in groups:
        if g == reference_group:
            continue
        row = np.zeros(len(index))
        row[index.col(kind, k, reference_group)] = 1.0
        row[index.col(kind, k, g)] = -1.0
        rows.append(row)
    return np.array(rows)


def _item_test(result, k, reference_group, kinds):
    """Wald test of parameter equality vs the reference for one free item."""
    est = result.free_estimates()
    G = len(result.group_names)
    rows = [_difference_contrast(result.param_index, kind, k,
                                 reference_group, range(G))
            for kind in kinds]
    C = np.vstack(rows)
    return wald_quadratic_form(est, C, result.covariance)


def wald2_identify_anchors(data: ResponseMatrix, item_models: list,
                           alpha: float = 0.05,
                           grid: QuadratureGrid = None,
                           convergence: Convergence = None,
                           stage1: CalibrationResult = None,
                           reference_group: int = 0) -> AnchorSet:
    """Two-stage anchor screen.

    Stage 1 calibrates everything shared with focal distributions free;
    stage 2 fixes those distributions and refits all items free per group,
    flagging items whose stacked (a, b) deviations from the reference are
    significant at `alpha`. Anchors are the unflagged items. When the screen
    is degenerate — every item flagged (no anchors) or no item flagged
    (nothing left to study) — the deterministic fallback anchors on the
    second half of the item list.
    """
    grid = grid or default_grid()
    K = data.n_items
    if stage1 is None:
        spec1 = CalibrationSpec([SHARED] * K, list(item_models), grid,
                                reference_group=reference_group)
        if convergence is not None:
            spec1.convergence = convergence
        stage1 = calibrate(data, spec1)

    start = {"a": stage1.params[:, :, 0], "b": stage1.params[:, :, 1],
             "c": stage1.params[:, 0, 2]}
    if stage1.excluded_items:
        keep = [k for k, iid in enumerate(data.item_ids)
                if iid not in stage1.excluded_items]
        data = ResponseMatrix(data.responses[:, keep], data.group_of_person,
                              [data.item_ids[k] for k in keep],
                              data.group_names, data.person_ids)
        item_models = [item_models[k] for k in keep]
        K = data.n_items

    spec2 = CalibrationSpec([FREE] * K, list(item_models), grid,
                            reference_group=reference_group,
                            estimate_dists=False,
                            fixed_dists=list(stage1.group_dists),
                            start=start)
    if convergence is not None:
        spec2.convergence = convergence
    stage2 = calibrate(data, spec2)

    pvals = {}
    flagged = []
    for k, iid in enumerate(stage2.item_ids):
        test = _item_test(stage2, k, reference_group, ("a", "b"))
        pvals[iid] = test.p
        if test.p <= alpha:
            flagged.append(iid)

    anchors = [iid for iid in stage2.item_ids if iid not in flagged]
    if not anchors or not flagged:
        half = list(data.item_ids)[K // 2:]
        return AnchorSet(half, FALLBACK_SECOND_HALF, pvals)
    return AnchorSet(anchors, WALD2, pvals)


def wald1_test(data: ResponseMatrix, item_models: list, anchors: AnchorSet,
               alpha: float = 0.05, grid: QuadratureGrid = None,
               convergence: Convergence = None,
               start: dict = None,
               reference_group: int = 0) -> WaldVerdict:
    """Confirmatory per-parameter DIF test for all non-anchor items.

    One calibration with anchors shared and every other item free per group
    (c stays shared); each studied item gets a nonuniform test on the
    a-contrasts and a uniform test on the b-contrasts. Uniform DIF is
    flagged only when the nonuniform test is not significant, honoring the
    equal-slopes premise of the difficulty hypothesis.
    """
    grid = grid or default_grid()
    studied = [iid for iid in data.item_ids if iid not in anchors.items]
    cons = [SHARED if iid in anchors.items else FREE for iid in data.item_ids]
    spec = CalibrationSpec(cons, list(item_models), grid,
                           reference_group=reference_group, start=start)
    if convergence is not None:
        spec.convergence = convergence
    result = calibrate(data, spec)

    verdicts = {}
    for iid in studied:
        if iid in result.excluded_items:
            continue
        k = result.item_ids.index(iid)
        ta = _item_test(result, k, reference_group, ("a",))
        tb = _item_test(result, k, reference_group, ("b",))
        flag_a = ta.p <= alpha
        flag_b = (tb.p <= alpha) and not flag_a
        verdicts[iid] = WaldItemVerdict(
            iid, ta.statistic, ta.df, ta.p, tb.statistic, tb.df, tb.p,
            flagged_nonuniform=flag_a, flagged_uniform=flag_b,
            used_pinv=ta.used_pinv or tb.used_pinv)
    return WaldVerdict(alpha, anchors, studied, verdicts, result)
