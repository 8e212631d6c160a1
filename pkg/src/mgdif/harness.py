"""Condition x replication x method orchestration.

Each replication generates a dataset, runs the requested method variants on
it (sharing calibrations and anchor screens across variants), and appends
per-item rows to an append-only CSV store keyed by (condition fingerprint,
rep, method). Aggregation computes per-replication Type-I error (flags over
clean items) and power (flags over truth items), then means/SDs across
replications. Report rendering mirrors the two-forms-per-method table
layout and rate-vs-group-count line plots.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .booklet import Booklet, load_booklet
from .estimation import SHARED, CalibrationSpec, Convergence, calibrate
from .irt import ResponseMatrix, default_grid
from .rmsd import CutoffPolicy, run_rmsd
from .scorebased import holm_adjust, run_glr, run_gmh
from .simgen import ConditionSpec, draw_dif_items, generate
from .wald import wald1_test, wald2_identify_anchors

log = logging.getLogger(__name__)

METHODS = ("rmsd_fixed", "rmsd_predicted", "wald1_uniform",
           "wald1_nonuniform", "glr_uniform", "glr_nonuniform",
           "gmh_unadjusted", "gmh_adjusted")

# paired presentation columns per method family
FORMS = {
    "rmsd": ("rmsd_predicted", "rmsd_fixed"),
    "wald1": ("wald1_uniform", "wald1_nonuniform"),
    "glr": ("glr_uniform", "glr_nonuniform"),
    "gmh": ("gmh_unadjusted", "gmh_adjusted"),
}

STORE_COLUMNS = ("condition", "rep", "method", "item", "group", "statistic",
                 "cutoff", "flagged")

ITEMS_PER_RUN = 29  # completeness threshold for a (condition, rep, method)


@dataclass
class RunPlan:
    """What to execute: conditions, method variants, replication count."""

    conditions: list
    methods: tuple = METHODS
    replications: int = 100
    alpha: float = 0.05
    workers: int = 1

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown methods: {unknown}")


@dataclass
class MetricsCell:
    """Aggregated rates for one (condition, method)."""

    condition: str
    method: str
    n_reps: int
    type1_mean: float
    type1_sd: float
    power_mean: float           # nan when the condition has no truth items
    power_sd: float
    untestable: int


def desk_plan(seed: int = 0, replications: int = 30,
              methods=METHODS) -> RunPlan:
    """Desk-scale profile: 2- and 5-group cells, every scenario and study."""
    conditions = []
    for study, prop in (("dif_free", None), ("dif_in_a", "p20"),
                        ("dif_in_a", "p30"), ("dif_in_b", "p20"),
                        ("dif_in_b", "p30")):
        for scenario in ("small_low", "small_high", "large_low", "large_high"):
            for n_groups in (2, 5):
                conditions.append(ConditionSpec(n_groups, scenario, study,
                                                prop, seed))
    return RunPlan(conditions, methods, replications)


def full_plan(seed: int = 0) -> RunPlan:
    """Full-scale profile: all 80 conditions at 100 replications."""
    conditions = []
    for study, props in (("dif_free", (None,)), ("dif_in_a", ("p20", "p30")),
                         ("dif_in_b", ("p20", "p30"))):
        for prop in props:
            for scenario in ("small_low", "small_high", "large_low",
                             "large_high"):
                for n_groups in (2, 5, 10, 15):
                    conditions.append(ConditionSpec(n_groups, scenario,
                                                    study, prop, seed))
    return RunPlan(conditions, replications=100)


class ResultStore:
    """Append-only CSV of per-item method decisions, resumable by key."""

    def __init__(self, path):
        self.path = str(path)
        self._counts = {}
        if os.path.exists(self.path):
            with open(self.path, newline="") as fh:
                reader = csv.DictReader(fh)
                if reader.fieldnames and tuple(reader.fieldnames) != STORE_COLUMNS:
                    raise ValueError(f"store {self.path} has unexpected "
                                     f"columns {reader.fieldnames}")
                for row in reader:
                    key = (row["condition"], int(row["rep"]), row["method"])
                    self._counts[key] = self._counts.get(key, 0) + 1
        else:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(STORE_COLUMNS)

    def done(self, condition: str, rep: int, method: str) -> bool:
        return self._counts.get((condition, rep, method), 0) >= ITEMS_PER_RUN

    def append(self, rows):
        with open(self.path, "a", newline="") as fh:
            writer = csv.writer(fh)
            for row in rows:
                writer.writerow(row)
                key = (row[0], int(row[1]), row[2])
                self._counts[key] = self._counts.get(key, 0) + 1

    def rows(self):
        with open(self.path, newline="") as fh:
            yield from csv.DictReader(fh)


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return f"{x:.10g}"


def analyze_dataset(data: ResponseMatrix, booklet: Booklet,
                    methods=METHODS, alpha: float = 0.05,
                    convergence: Convergence = None,
                    condition: str = "adhoc", rep: int = 0):
    """Run the requested method variants on one dataset.

    Returns store rows (one per item per method). Calibrations are shared:
    the all-shared concurrent fit feeds RMSD and the anchor screen; Wald-1,
    GLR, and GMH all use the screen's anchor set.
    """
    models = [booklet.item(i).model for i in data.item_ids]
    grid = default_grid()
    rows = []
    item_ids = list(data.item_ids)

    needs_irt = any(m.startswith(("rmsd", "wald1")) for m in methods)
    needs_anchors = any(m.startswith(("wald1", "glr", "gmh")) for m in methods)

    stage1 = None
    if needs_irt or needs_anchors:
        spec1 = CalibrationSpec([SHARED] * data.n_items, models, grid)
        if convergence is not None:
            spec1.convergence = convergence
        stage1 = calibrate(data, spec1)

    if any(m.startswith("rmsd") for m in methods):
        base = run_rmsd(data, CutoffPolicy.fixed(0.1), models, grid,
                        calib=stage1)
        for method, policy in (("rmsd_fixed", CutoffPolicy.fixed(0.1)),
                               ("rmsd_predicted", CutoffPolicy.predicted())):
            if method not in methods:
                continue
            cutoff = policy.cutoff_for(data.n_groups)
            for k, iid in enumerate(base.item_ids):
                g = int(np.argmax(base.values[k]))
                stat = float(base.values[k].max())
                rows.append((condition, rep, method, iid,
                             data.group_names[g], _fmt(stat), _fmt(cutoff),
                             "1" if stat >= cutoff else "0"))
            for iid in base.excluded_items:
                rows.append((condition, rep, method, iid, "", "",
                             _fmt(cutoff), "NA"))

    anchors = None
    if needs_anchors:
        start = {"a": stage1.params[:, :, 0], "b": stage1.params[:, :, 1],
                 "c": stage1.params[:, 0, 2],
                 "dists": list(stage1.group_dists)}
        anchors = wald2_identify_anchors(data, models, alpha, grid,
                                         convergence, stage1=stage1)

    if any(m.startswith("wald1") for m in methods):
        verdict = wald1_test(data, models, anchors, alpha, grid, convergence,
                             start=start)
        for method, pick_flag in (
                ("wald1_uniform", lambda v: v.flagged_uniform),
                ("wald1_nonuniform", lambda v: v.flagged_nonuniform)):
            if method not in methods:
                continue
            for iid in item_ids:
                if iid in verdict.items:
                    v = verdict.items[iid]
                    stat = v.stat_b if method == "wald1_uniform" else v.stat_a
                    rows.append((condition, rep, method, iid, "all",
                                 _fmt(stat), _fmt(alpha),
                                 "1" if pick_flag(v) else "0"))
                elif iid in verdict.calibration.excluded_items:
                    rows.append((condition, rep, method, iid, "", "",
                                 _fmt(alpha), "NA"))
                else:
                    rows.append((condition, rep, method, iid, "all", "",
                                 _fmt(alpha), "0"))

    studied = [i for i in item_ids if i not in anchors.items] \
        if anchors is not None else []

    if any(m.startswith("glr") for m in methods):
        glr = run_glr(data, anchors.items, studied)
        for method, pick in (("glr_uniform", lambda r: r.uniform),
                             ("glr_nonuniform", lambda r: r.nonuniform)):
            if method not in methods:
                continue
            for iid in item_ids:
                if iid in glr:
                    t = pick(glr[iid])
                    if not t.testable:
                        rows.append((condition, rep, method, iid, "all", "",
                                     _fmt(alpha), "NA"))
                    else:
                        rows.append((condition, rep, method, iid, "all",
                                     _fmt(t.statistic), _fmt(alpha),
                                     "1" if t.p <= alpha else "0"))
                else:
                    rows.append((condition, rep, method, iid, "all", "",
                                 _fmt(alpha), "0"))

    if any(m.startswith("gmh") for m in methods):
        gmh = run_gmh(data, anchors.items, studied)
        testable = [i for i in studied if gmh[i].testable]
        adjusted = dict(zip(testable,
                            holm_adjust([gmh[i].p for i in testable])))
        for method in ("gmh_unadjusted", "gmh_adjusted"):
            if method not in methods:
                continue
            for iid in item_ids:
                if iid in gmh:
                    t = gmh[iid]
                    if not t.testable:
                        rows.append((condition, rep, method, iid, "all", "",
                                     _fmt(alpha), "NA"))
                    else:
                        p = adjusted[iid] if method == "gmh_adjusted" else t.p
                        rows.append((condition, rep, method, iid, "all",
                                     _fmt(t.statistic), _fmt(alpha),
                                     "1" if p <= alpha else "0"))
                else:
                    rows.append((condition, rep, method, iid, "all", "",
                                 _fmt(alpha), "0"))
    return rows


def run_replication(cond: ConditionSpec, rep: int, methods=METHODS,
                    alpha: float = 0.05, booklet: Booklet = None,
                    convergence: Convergence = None):
    """Generate one replication and analyze it with the requested methods."""
    booklet = booklet or load_booklet()
    gen = generate(cond, rep, booklet)
    return analyze_dataset(gen.data, booklet, methods, alpha, convergence,
                           condition=cond.fingerprint, rep=rep)


def _pool_worker(payload):
    cond_args, rep, methods, alpha = payload
    cond = ConditionSpec(*cond_args)
    return run_replication(cond, rep, methods, alpha)


def run(plan: RunPlan, store: ResultStore, booklet: Booklet = None,
        convergence: Convergence = None, progress=None):
    """Execute a plan against a store, skipping completed work units.

    A work unit is one (condition, rep); its missing method variants are
    computed together so calibrations are shared. Returns the summary
    metrics for the plan's conditions and methods.
    """
    booklet = booklet or load_booklet()
    pending = []
    for cond in plan.conditions:
        for rep in range(plan.replications):
            missing = tuple(m for m in plan.methods
                            if not store.done(cond.fingerprint, rep, m))
            if missing:
                pending.append((cond, rep, missing))

    finished = 0
    if plan.workers > 1:
        payloads = [((c.n_groups, c.scenario, c.study, c.dif_proportion,
                      c.seed), rep, methods, plan.alpha)
                    for c, rep, methods in pending]
        with ProcessPoolExecutor(max_workers=plan.workers) as pool:
            futures = [pool.submit(_pool_worker, p) for p in payloads]
            for (cond, rep, methods), fut in zip(pending, futures):
                store.append(fut.result())
                finished += 1
                if progress:
                    progress(finished, cond, rep)
    else:
        for cond, rep, methods in pending:
            store.append(run_replication(cond, rep, methods, plan.alpha,
                                         booklet, convergence))
            finished += 1
            if progress:
                progress(finished, cond, rep)
    return summarize(store, plan, booklet)


def acceptance_band(nominal: float, n_reps: int):
    """Bernoulli 95% band around a nominal rate at a replication count."""
    if n_reps < 1:
        raise ValueError("n_reps must be >= 1")
    half = 1.96 * math.sqrt(nominal * (1.0 - nominal) / n_reps)
    return (nominal - half, nominal + half)


def rep_rates(rows, truth, alpha_not_used=None):
    """Per-replication Type-I and power from one (condition, rep, method).

    Items never studied count as unflagged; untestable items leave both
    the numerator and denominator.
    """
    clean_flags = clean_total = 0
    truth_flags = truth_total = 0
    untestable = 0
    for item, flagged in rows:
        if flagged == "NA":
            untestable += 1
            continue
        hit = flagged == "1"
        if item in truth:
            truth_total += 1
            truth_flags += hit
        else:
            clean_total += 1
            clean_flags += hit
    type1 = clean_flags / clean_total if clean_total else float("nan")
    power = truth_flags / truth_total if truth_total else float("nan")
    return type1, power, untestable


def summarize(store: ResultStore, plan: RunPlan,
              booklet: Booklet = None) -> list:
    """Mean/SD of Type-I error and power per (condition, method)."""
    booklet = booklet or load_booklet()
    wanted = {c.fingerprint: c for c in plan.conditions}
    grouped = {}
    for row in store.rows():
        cond = row["condition"]
        if cond not in wanted:
            continue
        rep = int(row["rep"])
        method = row["method"]
        if method not in plan.methods:
            continue
        grouped.setdefault((cond, method), {}).setdefault(rep, []).append(
            (row["item"], row["flagged"]))

    cells = []
    truth_cache = {}
    for cond in plan.conditions:
        for method in plan.methods:
            reps = grouped.get((cond.fingerprint, method), {})
            complete = sorted(r for r, rows in reps.items()
                              if len(rows) >= ITEMS_PER_RUN
                              and r < plan.replications)
            t1s, pws, unt = [], [], 0
            for rep in complete:
                key = (cond.fingerprint, rep)
                if key not in truth_cache:
                    truth_cache[key] = draw_dif_items(cond, rep, booklet)
                t1, pw, u = rep_rates(reps[rep], truth_cache[key])
                if not math.isnan(t1):
                    t1s.append(t1)
                if not math.isnan(pw):
                    pws.append(pw)
                unt += u
            def _mean(v):
                return float(np.mean(v)) if v else float("nan")
            def _sd(v):
                return float(np.std(v, ddof=1)) if len(v) > 1 else float("nan")
            cells.append(MetricsCell(cond.fingerprint, method, len(complete),
                                     _mean(t1s), _sd(t1s), _mean(pws),
                                     _sd(pws), unt))
    return cells


# ---------------------------------------------------------------------------
# report rendering


def _cell_lookup(cells):
    return {(c.condition, c.method): c for c in cells}


def _suppress_power(cells):
    """Power cells hidden when the matching DIF-free Type-I exceeded the
    band; returns the set of (condition, method) to blank."""
    lookup = _cell_lookup(cells)
    _, hi = acceptance_band(0.05, 100)
    blank = set()
    for c in cells:
        if math.isnan(c.power_mean):
            continue
        parts = c.condition.split("-")
        null_cond = "-".join(parts[:2] + ["dif_free", "none", parts[-1]])
        null_cell = lookup.get((null_cond, c.method))
        if null_cell and not math.isnan(null_cell.type1_mean) \
                and null_cell.type1_mean > hi:
            blank.add((c.condition, c.method))
    return blank


def render_csv(cells, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["condition", "method", "n_reps", "type1_mean", "type1_sd",
                    "power_mean", "power_sd", "untestable"])
        for c in sorted(cells, key=lambda c: (c.condition, c.method)):
            w.writerow([c.condition, c.method, c.n_reps, _fmt(c.type1_mean),
                        _fmt(c.type1_sd), _fmt(c.power_mean),
                        _fmt(c.power_sd), c.untestable])
    return [path]


def _md_rate(cell, kind, blanked=False):
    if cell is None or cell.n_reps == 0:
        return "-"
    val = cell.type1_mean if kind == "type1" else cell.power_mean
    sd = cell.type1_sd if kind == "type1" else cell.power_sd
    if blanked or math.isnan(val):
        return "-"
    if math.isnan(sd):
        return f"{val:.3f}"
    return f"{val:.3f} ({sd:.3f})"


def render_markdown(cells, path):
    """One table per condition family: method rows x (group-count, form)
    columns; power blanked where Type-I was inflated."""
    lookup = _cell_lookup(cells)
    blank = _suppress_power(cells)
    conds = sorted({c.condition for c in cells})
    meta = {}
    for cond in conds:
        g, scenario, study, prop, seed = cond.split("-")
        meta[cond] = (int(g[1:]), scenario, study, prop, seed)
    group_counts = sorted({meta[c][0] for c in conds})
    scenarios = sorted({meta[c][1] for c in conds})
    studies = sorted({(meta[c][2], meta[c][3]) for c in conds})
    seeds = sorted({meta[c][4] for c in conds})

    lines = []
    for study, prop in studies:
        kind = "type1" if study == "dif_free" else "power"
        title = {"type1": "Type-I error", "power": "Power"}[kind]
        for scenario in scenarios:
            lines.append(f"## {title} - {study} {prop} - {scenario}")
            lines.append("")
            header = ["method"]
            for n in group_counts:
                header += [f"{n}grp F1", f"{n}grp F2"]
            lines.append("| " + " | ".join(header) + " |")
            lines.append("|" + "---|" * len(header))
            for family, (m1, m2) in FORMS.items():
                row = [family]
                for n in group_counts:
                    for m in (m1, m2):
                        cell = None
                        for seed in seeds:
                            cond = f"g{n}-{scenario}-{study}-{prop}-{seed}"
                            cell = lookup.get((cond, m)) or cell
                        blanked = cell is not None and kind == "power" \
                            and (cell.condition, m) in blank
                        row.append(_md_rate(cell, kind, blanked))
                lines.append("| " + " | ".join(row) + " |")
            lines.append("")
    with open(path, "w") as fh:
        fh.write("\n".join(lines))
    return [path]


def render_plots(cells, out_dir):
    """One SVG per method family: mean rate vs group count, per scenario."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(out_dir, exist_ok=True)
    conds = {}
    for c in cells:
        g, scenario, study, prop, seed = c.condition.split("-")
        conds[c.condition] = (int(g[1:]), scenario, study, prop)
    files = []
    for family, variants in FORMS.items():
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.5), sharey=True)
        for ax, method in zip(axes, variants):
            per_scenario = {}
            for c in cells:
                if c.method != method or math.isnan(c.type1_mean):
                    continue
                n, scenario, study, prop = conds[c.condition]
                if study != "dif_free":
                    continue
                per_scenario.setdefault(scenario, []).append((n, c.type1_mean))
            for scenario, pts in sorted(per_scenario.items()):
                pts.sort()
                ax.plot([p[0] for p in pts], [p[1] for p in pts],
                        marker="o", label=scenario)
            ax.axhline(0.05, ls="--", lw=0.8, color="gray")
            ax.set_title(method)
            ax.set_xlabel("groups")
        axes[0].set_ylabel("Type-I error")
        if axes[0].get_legend_handles_labels()[0]:
            axes[0].legend(fontsize=7)
        path = os.path.join(out_dir, f"type1_{family}.svg")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
        files.append(path)
    return files


def render_report(cells, fmt: str, out_dir: str):
    """Render aggregated metrics; fmt in {csv, markdown, svg-plots}."""
    if not cells:
        raise ValueError("no metrics to render")
    os.makedirs(out_dir, exist_ok=True)
    if fmt == "csv":
        return render_csv(cells, os.path.join(out_dir, "metrics.csv"))
    if fmt == "markdown":
        return render_markdown(cells, os.path.join(out_dir, "report.md"))
    if fmt == "svg-plots":
        return render_plots(cells, os.path.join(out_dir, "plots"))
    raise ValueError(f"unknown report format {fmt!r}")
