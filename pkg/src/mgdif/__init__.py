"""Multi-group differential item functioning toolkit.

Detects items that behave differently across many examinee groups using
four complementary methods — an item-fit distance with fixed or
group-count-calibrated cutoffs, an anchored multi-parameter contrast test,
a pooled logistic regression test, and a stratified count-based test —
plus a simulation and replication harness for studying their error rates.
"""

from .booklet import Booklet, EffectSizeRow, effect_size_table, load_booklet
from .estimation import (FREE, SHARED, CalibrationResult, CalibrationSpec,
                         Convergence, CPrior, NonConvergenceError,
                         SeparationError, calibrate, fit_logistic,
                         wald_quadratic_form)
from .harness import (METHODS, MetricsCell, ResultStore, RunPlan,
                      acceptance_band, analyze_dataset, desk_plan, full_plan,
                      render_report, run, run_replication, summarize)
from .irt import (GroupSpec, ItemParams, QuadratureGrid, ResponseMatrix,
                  default_grid, icc, icc_area_difference, make_grid)
from .rmsd import CutoffPolicy, RmsdResult, pseudo_observed_icc, rmsd, run_rmsd
from .scorebased import (GlrItemResult, MatchingScore, ScoreTestResult,
                         glr_test, gmh_test, holm_adjust, matching_scores,
                         run_glr, run_gmh)
from .simgen import ConditionSpec, GeneratedDataset, build_roster, generate
from .wald import (AnchorSet, WaldItemVerdict, WaldVerdict, wald1_test,
                   wald2_identify_anchors)

__version__ = "1.0.0"

__all__ = [
    "AnchorSet", "Booklet", "CPrior", "CalibrationResult", "CalibrationSpec",
    "ConditionSpec", "Convergence", "CutoffPolicy", "EffectSizeRow", "FREE",
    "GeneratedDataset", "GlrItemResult", "GroupSpec", "ItemParams", "METHODS",
    "MatchingScore", "MetricsCell", "NonConvergenceError", "QuadratureGrid",
    "ResponseMatrix", "ResultStore", "RmsdResult", "RunPlan",
    "ScoreTestResult", "SeparationError", "WaldItemVerdict", "WaldVerdict",
    "acceptance_band", "analyze_dataset", "build_roster", "calibrate",
    "default_grid", "desk_plan", "effect_size_table", "fit_logistic",
    "full_plan", "generate", "glr_test", "gmh_test", "holm_adjust", "icc",
    "icc_area_difference", "load_booklet", "make_grid", "matching_scores",
    "pseudo_observed_icc", "render_report", "rmsd", "run", "run_glr",
    "run_gmh", "run_replication", "run_rmsd", "summarize", "wald1_test",
    "wald2_identify_anchors", "wald_quadratic_form",
]
