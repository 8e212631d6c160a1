"""Command-line interface.

Subcommands:
  simulate  write one synthetic response matrix (plus truth sidecar)
  analyze   run detection methods on a response CSV
  run       execute a Monte Carlo plan into a resumable store
  report    aggregate a store into CSV / markdown / SVG plots
  verify    run the acceptance battery; nonzero exit on any failure

Environment overrides: MGDIF_WORKERS (worker count for `run`),
MGDIF_OUT_DIR (output directory for `report`).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - python < 3.11
    import tomli as tomllib

import numpy as np

from . import acceptance
from .booklet import load_booklet
from .harness import (METHODS, STORE_COLUMNS, ResultStore, RunPlan,
                      analyze_dataset, desk_plan, full_plan, render_report,
                      run, summarize)
from .irt import ResponseMatrix
from .simgen import (DIF_COUNTS, N_GROUP_CHOICES, SCENARIO_GROUPS, STUDIES,
                     ConditionSpec, generate)

log = logging.getLogger("mgdif")


def _add_condition_args(p):
    p.add_argument("--n-groups", type=int, choices=N_GROUP_CHOICES,
                   required=True)
    p.add_argument("--scenario", choices=sorted(SCENARIO_GROUPS),
                   required=True)
    p.add_argument("--study", choices=STUDIES, required=True)
    p.add_argument("--dif-proportion", choices=sorted(DIF_COUNTS),
                   default=None)
    p.add_argument("--seed", type=int, default=0)


def _condition_from_args(args):
    return ConditionSpec(args.n_groups, args.scenario, args.study,
                         args.dif_proportion, args.seed)


def _parse_methods(text):
    methods = tuple(m.strip() for m in text.split(",") if m.strip())
    for m in methods:
        if m not in METHODS:
            raise SystemExit(f"unknown method {m!r}; choose from "
                             f"{', '.join(METHODS)}")
    return methods


def _workers(args):
    env = os.environ.get("MGDIF_WORKERS")
    if env:
        return max(1, int(env))
    return max(1, args.workers)


# ---------------------------------------------------------------------------


def cmd_simulate(args):
    cond = _condition_from_args(args)
    ds = generate(cond, rep=args.rep)
    ds.data.to_csv(args.out)
    sidecar = {
        "condition": cond.fingerprint,
        "rep": args.rep,
        "truth": sorted(ds.truth),
        "shifted_param": ds.shifted_param,
        "roster": [[gs.name, role] for gs, role in ds.roster],
    }
    truth_path = args.truth_out or (os.path.splitext(args.out)[0]
                                    + ".truth.json")
    with open(truth_path, "w") as fh:
        json.dump(sidecar, fh, indent=2)
        fh.write("\n")
    log.info("wrote %s (%d persons x %d items) and %s", args.out,
             ds.data.n_persons, ds.data.n_items, truth_path)
    return 0


def cmd_analyze(args):
    data = ResponseMatrix.from_csv(args.data)
    methods = _parse_methods(args.methods)
    booklet = load_booklet()
    rows = analyze_dataset(data, booklet, methods, alpha=args.alpha)
    if args.out:
        store = ResultStore(args.out)
        store.append(rows)
    flagged = {}
    for row in rows:
        rec = dict(zip(STORE_COLUMNS, row))
        if rec["flagged"] == "1":
            flagged.setdefault(rec["method"], []).append(rec["item"])
    for method in methods:
        items = flagged.get(method, [])
        print(f"{method}: {len(items)} flagged"
              + (f" ({', '.join(items)})" if items else ""))
    return 0


def _plan_from_config(path):
    with open(path, "rb") as fh:
        cfg = tomllib.load(fh)
    profile = cfg.get("profile")
    seed = int(cfg.get("seed", 0))
    if profile == "desk":
        plan = desk_plan(seed=seed, replications=int(cfg.get("replications", 30)))
    elif profile == "full":
        plan = full_plan(seed=seed)
    elif profile is not None:
        raise SystemExit(f"unknown profile {profile!r} in {path}")
    else:
        conds = []
        for entry in cfg.get("conditions", []):
            conds.append(ConditionSpec(
                int(entry["n_groups"]), entry["scenario"], entry["study"],
                entry.get("dif_proportion"), int(entry.get("seed", seed))))
        if not conds:
            raise SystemExit(f"{path} declares neither profile nor conditions")
        plan = RunPlan(conds, replications=int(cfg.get("replications", 100)))
    methods = cfg.get("methods")
    if methods:
        plan = RunPlan(plan.conditions, tuple(methods), plan.replications,
                       plan.alpha, plan.workers)
    if "alpha" in cfg:
        plan = RunPlan(plan.conditions, plan.methods, plan.replications,
                       float(cfg["alpha"]), plan.workers)
    if "workers" in cfg:
        plan = RunPlan(plan.conditions, plan.methods, plan.replications,
                       plan.alpha, int(cfg["workers"]))
    return plan


def _plan_for_run(args):
    if args.config:
        plan = _plan_from_config(args.config)
    elif args.profile == "desk":
        plan = desk_plan(seed=args.seed, replications=args.replications or 30)
    elif args.profile == "full":
        plan = full_plan(seed=args.seed)
    else:
        raise SystemExit("pass --profile desk|full or --config plan.toml")
    if args.replications:
        plan = RunPlan(plan.conditions, plan.methods, args.replications,
                       plan.alpha, plan.workers)
    if args.methods:
        plan = RunPlan(plan.conditions, _parse_methods(args.methods),
                       plan.replications, plan.alpha, plan.workers)
    return RunPlan(plan.conditions, plan.methods, plan.replications,
                   plan.alpha, _workers(args) if args.workers or
                   os.environ.get("MGDIF_WORKERS") else plan.workers)


def cmd_run(args):
    plan = _plan_for_run(args)
    store = ResultStore(args.store)
    booklet = load_booklet()
    total = len(plan.conditions) * plan.replications

    def progress(done, cond, rep):
        log.info("replication %d/%d (%s rep %d)", done, total,
                 cond.fingerprint, rep)

    cells = run(plan, store, booklet, progress=progress)
    log.info("store %s holds %d condition/method cells", args.store,
             len(cells))
    return 0


def _plan_from_store(store):
    """Rebuild a plan covering everything a store contains."""
    conds = {}
    methods = set()
    max_rep = {}
    for row in store.rows():
        fp = row["condition"]
        methods.add(row["method"])
        max_rep[fp] = max(max_rep.get(fp, -1), int(row["rep"]))
        if fp not in conds:
            g, scenario, study, prop, s = fp.split("-")
            conds[fp] = ConditionSpec(
                int(g[1:]), scenario, study,
                None if prop == "none" else prop, int(s[1:]))
    if not conds:
        raise SystemExit("store is empty; run `mgdif run` first")
    ordered = tuple(m for m in METHODS if m in methods)
    return RunPlan(list(conds.values()), ordered,
                   replications=max(max_rep.values()) + 1)


def cmd_report(args):
    store = ResultStore(args.store)
    plan = _plan_from_store(store)
    booklet = load_booklet()
    cells = summarize(store, plan, booklet)
    out_dir = os.environ.get("MGDIF_OUT_DIR", args.out_dir)
    paths = render_report(cells, args.format, out_dir)
    for p in paths:
        print(p)
    return 0


def cmd_verify(args):
    results = acceptance.run_all(args.store, echo=print,
                                 progress=_verify_progress(args))
    return 0 if all(r.passed for r in results) else 1


def _verify_progress(args):
    if args.quiet:
        return None

    def progress(done, cond, rep):
        log.info("acceptance replication %s rep %d", cond.fingerprint, rep)

    return progress


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mgdif",
        description="Multi-group differential item functioning toolkit")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write one synthetic dataset")
    _add_condition_args(p)
    p.add_argument("--rep", type=int, default=0)
    p.add_argument("--out", required=True, help="response CSV path")
    p.add_argument("--truth-out", default=None,
                   help="truth sidecar path (default: <out>.truth.json)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", help="run methods on a response CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--methods", default=",".join(METHODS))
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", default=None, help="optional row-store CSV")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("run", help="execute a Monte Carlo plan")
    p.add_argument("--profile", choices=("desk", "full"), default=None)
    p.add_argument("--config", default=None, help="TOML plan file")
    p.add_argument("--store", required=True, help="append-only result CSV")
    p.add_argument("--replications", type=int, default=None)
    p.add_argument("--methods", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=0)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="aggregate a store into artifacts")
    p.add_argument("--store", required=True)
    p.add_argument("--format", choices=("csv", "markdown", "svg-plots"),
                   default="markdown")
    p.add_argument("--out-dir", default="reports")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("verify", help="run the acceptance battery")
    p.add_argument("--store", default=None,
                   help="resumable store path (default: "
                        "$MGDIF_ACCEPTANCE_STORE or .acceptance/store.csv)")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr)
    np.seterr(over="ignore", under="ignore")
    return args.func(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
