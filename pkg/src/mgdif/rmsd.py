"""RMSD item-fit statistics for multi-group DIF screening.

An all-items-shared concurrent calibration provides model ICCs and person
posteriors; each group's pseudo-observed ICC (posterior-weighted proportion
correct per node) is compared to the model curve, weighted by the group's
ability mass. An item is flagged when any group's RMSD reaches the cutoff,
which is either a fixed value or a group-count-dependent predicted cutoff.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .estimation import (SHARED, CalibrationResult, CalibrationSpec,
                         calibrate, canonical_person_order)
from .irt import QuadratureGrid, ResponseMatrix, default_grid, icc

FIXED = "fixed"
PREDICTED = "predicted"

PREDICTED_CUTOFFS = {2: 0.060, 5: 0.070, 10: 0.075, 15: 0.075}

_MASS_FLOOR = 1e-8


@dataclass(frozen=True)
class CutoffPolicy:
    """Fixed cutoff or predicted cutoff chosen by number of groups."""

    kind: str
    fixed_value: float = None

    def __post_init__(self):
        if self.kind not in (FIXED, PREDICTED):
            raise ValueError(f"unknown cutoff policy {self.kind!r}")
        if self.kind == FIXED:
            if self.fixed_value is None or not 0 < self.fixed_value < 1:
                raise ValueError("fixed cutoff must lie in (0, 1)")

    @classmethod
    def fixed(cls, value: float = 0.1) -> "CutoffPolicy":
        return cls(FIXED, value)

    @classmethod
    def predicted(cls) -> "CutoffPolicy":
        return cls(PREDICTED)

    def cutoff_for(self, n_groups: int) -> float:
        if self.kind == FIXED:
            return self.fixed_value
        # nearest tabled group count; ties resolved toward more groups
        best = min(sorted(PREDICTED_CUTOFFS),
                   key=lambda k: (abs(k - n_groups), -k))
        return PREDICTED_CUTOFFS[best]

    def tag(self, n_groups: int) -> str:
        if self.kind == FIXED:
            return f"fixed({self.fixed_value:g})"
        return f"predicted({n_groups}->{self.cutoff_for(n_groups):g})"


@dataclass
class RmsdResult:
    """Per-(item, group) RMSD values with per-item flag decisions."""

    item_ids: list
    group_names: list
    values: np.ndarray         # (items, groups)
    cutoff_value: float
    policy_tag: str
    flagged: np.ndarray        # (items,) bool
    excluded_items: list = field(default_factory=list)

    def max_values(self) -> np.ndarray:
        return self.values.max(axis=1)


def pseudo_observed_icc(calib: CalibrationResult, data: ResponseMatrix,
                        item, group: int):
    """Posterior-mass ratio curve for one item in one group.

    Returns (probabilities, masses) over the calibration grid. Nodes whose
    observed posterior mass falls below 1e-8 carry the model ICC as a
    neutral fill so they cannot contribute spurious misfit.
    """
    k = calib.item_ids.index(item) if not isinstance(item, int) else item
    rows = data.persons_in_group(group)
    if rows.size == 0:
        raise ValueError(f"group {group} has no persons")
    rows = rows[_within_group_order(data, rows)]
    T = calib.posterior_masses[rows]
    x = np.nan_to_num(data.responses[rows, k])
    seen = data.observed_mask()[rows, k].astype(float)
    num = T.T @ x
    den = T.T @ seen
    model = icc(calib.item_params(k, group), calib.grid.nodes)
    with np.errstate(invalid="ignore", divide="ignore"):
        pi = np.where(den >= _MASS_FLOOR, num / np.maximum(den, _MASS_FLOOR),
                      model)
    return pi, den


def _within_group_order(data: ResponseMatrix, rows: np.ndarray) -> np.ndarray:
    """Canonical (pattern-sorted) position order for one group's persons,
    so per-group aggregations are invariant to input row order."""
    return canonical_person_order(data.responses[rows],
                                  np.zeros(rows.size, dtype=int))


def rmsd(pseudo, model, weights) -> float:
    """Root mean square deviation between two node curves under a mass.

    `weights` must be normalized (sums to 1).
    """
    w = np.asarray(weights, dtype=float)
    if abs(w.sum() - 1.0) > 1e-8:
        raise ValueError("weights must be normalized")
    gap = np.asarray(pseudo, dtype=float) - np.asarray(model, dtype=float)
    return float(np.sqrt(np.sum(gap * gap * w)))


def run_rmsd(data: ResponseMatrix, policy: CutoffPolicy,
             item_models: list, grid: QuadratureGrid = None,
             calib: CalibrationResult = None,
             convergence=None) -> RmsdResult:
    """Calibrate (all items shared across groups) and flag misfitting items.

    Per item and group, compares the pseudo-observed ICC against the model
    ICC with the group's normalized aggregated posterior mass as weights; an
    item is flagged when the maximum RMSD over groups reaches the policy's
    cutoff for this group count.
    """
    if data.n_groups < 2:
        raise ValueError("need at least 2 groups")
    if calib is None:
        spec = CalibrationSpec([SHARED] * data.n_items, list(item_models),
                               grid or default_grid())
        if convergence is not None:
            spec.convergence = convergence
        calib = calibrate(data, spec)

    item_ids = calib.item_ids
    K = len(item_ids)
    G = data.n_groups
    kept = [data.item_index(i) for i in item_ids]
    obs = data.observed_mask()[:, kept].astype(float)
    Xf = np.nan_to_num(data.responses[:, kept])
    nodes = calib.grid.nodes

    values = np.empty((K, G))
    for g in range(G):
        rows = data.persons_in_group(g)
        if rows.size == 0:
            raise ValueError(f"group {g} has no persons")
        rows = rows[_within_group_order(data, rows)]
        T = calib.posterior_masses[rows]
        num = T.T @ Xf[rows]          # (nodes, items)
        den = T.T @ obs[rows]
        mass = T.sum(axis=0)
        w = mass / mass.sum()
        P = np.stack([icc(calib.item_params(k, g), nodes) for k in range(K)],
                     axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            pi = np.where(den >= _MASS_FLOOR,
                          num / np.maximum(den, _MASS_FLOOR), P)
        gap = pi - P
        values[:, g] = np.sqrt((gap * gap * w[:, None]).sum(axis=0))

    cutoff = policy.cutoff_for(G)
    flagged = values.max(axis=1) >= cutoff
    return RmsdResult(list(item_ids), list(data.group_names), values,
                      cutoff, policy.tag(G), flagged,
                      excluded_items=list(calib.excluded_items))
