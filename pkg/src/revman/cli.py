"""Command-line pipeline: simulate, estimate, bounds, counterfactual, infer, report.

Each stage reads the artifacts of the previous ones from the output
directory and writes its own.  Exit codes: 0 on success, 2 on a
configuration or usage error (including missing upstream artifacts), 3
when a stage finishes but flags a model violation (non-convergence,
inconsistent bounds).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from .alpha import AlphaTable
from .bounds import CellBounds, bounds_to_csv_rows, compute_bounds
from .counterfactual import intermediate_k_rows, scenario, scenario_rows, train_factors
from .demand import DemandPrimitives
from .estimation import IdentificationError, SalesPanel, estimate
from .inference import InversionTables, LowerGapStatistic, panel_statistic_inputs, subsample_test
from .synthetic import generate

log = logging.getLogger("revman")

COMMANDS = ("simulate", "estimate", "bounds", "counterfactual", "infer", "report")
FORMAT_VERSION = 1

EXIT_OK, EXIT_CONFIG, EXIT_VIOLATION = 0, 2, 3


class StageError(Exception):
    """A stage cannot run; the message says what to do about it."""


# --------------------------------------------------------------------------
# Artifact helpers
# --------------------------------------------------------------------------


def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, Path):
        return str(x)
    return x


def write_json(path: Path, artifact: str, payload: dict) -> None:
    doc = {"artifact": artifact, "format_version": FORMAT_VERSION, "revman_version": __version__, **payload}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(doc), sort_keys=True, indent=2) + "\n")


def write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None or (isinstance(v, float) and not math.isfinite(v)) else v) for k, v in r.items()})


def _need(path: Path, producer: str) -> Path:
    if not path.exists():
        raise StageError(f"missing {path}; run `revman {producer}` first (with the same --out)")
    return path


def _read_json(path: Path, producer: str) -> dict:
    return json.loads(_need(path, producer).read_text())


class Paths:
    def __init__(self, out: Path, data: Path | None = None):
        self.out = out
        self.data = data or out / "data"
        self.estimates = out / "estimates.json"
        self.bounds_json = out / "bounds.json"
        self.bounds_csv = out / "bounds.csv"
        self.scenarios_json = out / "scenarios.json"
        self.scenarios_csv = out / "scenarios.csv"
        self.ik_json = out / "ik_curve.json"
        self.ik_csv = out / "ik_curve.csv"
        self.inference = out / "inference.json"
        self.report = out / "report"


def _panel(paths: Paths) -> SalesPanel:
    _need(paths.data / "panel.csv", "simulate")
    return SalesPanel.read(paths.data)


def _theta(paths: Paths) -> DemandPrimitives:
    est = _read_json(paths.estimates, "estimate")
    p = est["params"]
    if "epsilon" not in p:
        raise StageError("counterfactual stages need a single elasticity; set [estimate] split_class = 0")
    return DemandPrimitives(p["epsilon"], tuple(est["beta"]), p["lambda_a"], p["lambda_b"])


def _bounds(paths: Paths) -> dict:
    doc = _read_json(paths.bounds_json, "bounds")
    out = {}
    for r in doc["cells"]:
        cell = tuple(r["cell"])
        out[cell] = CellBounds(
            cell,
            math.inf if r["g_lower"] is None else r["g_lower"],
            math.inf if r["g_upper"] is None else r["g_upper"],
            tuple(r["binding"]),
            r["k_star"],
            None if r["split"] is None else tuple(r["split"]),
            tuple(r["flags"]),
        )
    return out


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------


def run_simulate(rc: cfgmod.RunConfig, paths: Paths) -> int:
    world = generate(rc.simulate)
    world.write(paths.data)
    log.info("wrote %d trains to %s", world.panel["train_id"].nunique(), paths.data)
    return EXIT_OK


def run_estimate(rc: cfgmod.RunConfig, paths: Paths) -> int:
    panel = _panel(paths)
    o = rc.estimate
    try:
        est = estimate(panel, o.multi_city, o.split_class, o.intercept, o.n_boot, rc.seed)
    except IdentificationError as exc:
        raise StageError(f"estimation failed: {exc}") from None
    flags = []
    if not est.logit.converged:
        flags.append("logit_not_converged")
    if not est.destination.converged:
        flags.append("destination_not_converged")
    if not est.gamma.converged:
        flags.append("gamma_not_converged")
    write_json(
        paths.estimates,
        "estimates",
        {
            "params": est.params(),
            "se": est.se,
            "n_boot": est.n_boot,
            "beta": list(est.destination.beta),
            "covariates": list(est.destination.names),
            "n_trains": panel.n_trains,
            "n_trains_dropped": est.logit.n_dropped,
            "loglik_logit": est.logit.loglik,
            "r2_destination": est.destination.r2,
            "gamma_message": est.gamma.message,
            "options": {"multi_city": o.multi_city, "split_class": o.split_class, "intercept": o.intercept, "seed": rc.seed},
            "flags": flags,
        },
    )
    return EXIT_VIOLATION if flags else EXIT_OK


def run_bounds(rc: cfgmod.RunConfig, paths: Paths) -> int:
    panel = _panel(paths)
    theta = _theta(paths)
    cells = panel.cell_data(theta.beta)
    bd = compute_bounds(cells, theta.epsilon, (theta.lambda_a, theta.lambda_b))
    rows = []
    for c, b in zip(cells, bd):
        rows.append(
            {
                "cell": list(b.cell),
                "n_trains": c.n_trains,
                "g_lower": b.g_lower,
                "g_upper": b.g_upper,
                "binding": list(b.binding),
                "k_star": b.k_star,
                "split": None if b.split is None else list(b.split),
                "flags": list(b.flags),
            }
        )
    write_json(paths.bounds_json, "bounds", {"cells": rows})
    csv_rows = bounds_to_csv_rows(bd)
    for r in csv_rows:
        r["cell"] = "/".join(str(x) for x in r["cell"])
    write_csv(paths.bounds_csv, csv_rows, ["cell", "g_lower", "g_upper", "binding", "k_star", "flags"])
    bad = [b.cell for b in bd if not b.consistent]
    if bad:
        log.warning("%d cells have inconsistent bounds, e.g. %s", len(bad), bad[0])
        return EXIT_VIOLATION
    return EXIT_OK


SCENARIO_COLUMNS = ["id", "label", "regime", "strategy", "lower", "upper", "lower_over_observed", "upper_over_observed", "load"]


def run_counterfactual(rc: cfgmod.RunConfig, paths: Paths) -> int:
    panel = _panel(paths)
    theta = _theta(paths)
    bmap = _bounds(paths)
    trains = panel.train_instances()
    table = AlphaTable(rc.numerics)
    observed = float(panel.revenue().mean())
    rows, _ = scenario_rows(trains, theta, bmap, observed, panel.mean_a_sales(), rc.counterfactual.scenarios, table)
    ik = intermediate_k_rows(trains, theta, bmap, rc.counterfactual.ik_pcts, table) if rc.counterfactual.ik_pcts else []
    for r in ik:
        r["lower_over_observed"] = r["lower"] / observed
        r["upper_over_observed"] = r["upper"] / observed
    write_json(paths.scenarios_json, "scenarios", {"observed_mean_revenue": observed, "rows": rows})
    write_csv(paths.scenarios_csv, rows, SCENARIO_COLUMNS)
    write_json(paths.ik_json, "ik_curve", {"observed_mean_revenue": observed, "rows": ik})
    write_csv(paths.ik_csv, ik, ["regime", "pct", "lower", "upper", "lower_over_observed", "upper_over_observed"])
    return EXIT_OK


def run_infer(rc: cfgmod.RunConfig, paths: Paths) -> int:
    panel = _panel(paths)
    theta = _theta(paths)
    bmap = _bounds(paths)
    o = rc.infer
    lams = (theta.lambda_a, theta.lambda_b)
    cells = panel.cell_data(theta.beta)
    tables = InversionTables(cells, theta.epsilon, lams)
    cell_index, tails = panel_statistic_inputs(panel, cells)
    trains = panel.train_instances()
    table = AlphaTable(rc.numerics)
    avg_a = panel.mean_a_sales()
    results = []
    for sid in o.scenarios:
        sc = scenario(sid)
        f = train_factors(trains, theta, sc.strategy, sc.regime, bmap, sc.preallocation, avg_a, table)
        if not f.scale_free:
            raise StageError(f"scenario {sid} has no per-train factor form; choose another for [infer] scenarios")
        stat = LowerGapStatistic(tables, f.factor, panel.revenue(), cell_index, tails)
        try:
            res = subsample_test(panel.trains["route"].to_numpy(), stat, o.per_stratum, o.n_sub, o.alpha, rc.seed)
        except ValueError as exc:
            raise StageError(f"[infer] {exc}") from None
        results.append({"id": sid, **res.as_dict()})
    write_json(paths.inference, "inference", {"results": results})
    return EXIT_OK


def run_report(rc: cfgmod.RunConfig, paths: Paths) -> int:
    rows: list[dict] = []
    ik: list[dict] = []
    observed = None
    if rc.counterfactual.scenarios:
        doc = _read_json(paths.scenarios_json, "counterfactual")
        observed = doc["observed_mean_revenue"]
        wanted = set(rc.counterfactual.scenarios)
        rows = [r for r in doc["rows"] if r["id"] in wanted]
        if paths.ik_json.exists():
            ik = json.loads(paths.ik_json.read_text())["rows"]
    pvals = {}
    if paths.inference.exists():
        pvals = {r["id"]: r["p_value_upper"] for r in json.loads(paths.inference.read_text())["results"]}
    for r in rows:
        r["p_value_upper"] = pvals.get(r["id"])
    cols = SCENARIO_COLUMNS + ["p_value_upper"]
    write_csv(paths.report / "table.csv", rows, cols)
    write_json(paths.report / "table.json", "report_table", {"observed_mean_revenue": observed, "rows": rows})
    write_csv(paths.report / "ik_curve.csv", ik, ["regime", "pct", "lower", "upper", "lower_over_observed", "upper_over_observed"])
    write_json(paths.report / "ik_curve.json", "report_ik_curve", {"rows": ik})
    _print_table(rows)
    return EXIT_OK


def _print_table(rows):
    if not rows:
        print("(no scenarios)")
        return
    fmt = lambda v: "" if v is None else f"{v:.3f}"
    print(f"{'id':6} {'lower/obs':>10} {'upper/obs':>10} {'load':>7} {'p<=':>7}  label")
    for r in rows:
        print(
            f"{r['id']:6} {fmt(r['lower_over_observed']):>10} {fmt(r['upper_over_observed']):>10} "
            f"{fmt(r['load']):>7} {fmt(r.get('p_value_upper')):>7}  {r['label']}"
        )


STAGES = {
    "simulate": run_simulate,
    "estimate": run_estimate,
    "bounds": run_bounds,
    "counterfactual": run_counterfactual,
    "infer": run_infer,
    "report": run_report,
}


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="revman", description="Revenue management counterfactual pipeline.")
    p.add_argument("--version", action="version", version=f"revman {__version__}")
    p.add_argument("command", choices=COMMANDS + ("all",), help="stage to run ('all' runs every stage in order)")
    p.add_argument("--config", type=Path, help="TOML configuration file")
    p.add_argument("--seed", type=int, help="override [run] seed")
    p.add_argument("--out", type=Path, help="artifact directory (overrides [run] out)")
    p.add_argument("--data", type=Path, help="directory with panel.csv, covariates.csv and routes.csv (default OUT/data)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        rc = cfgmod.load(args.config) if args.config else cfgmod.RunConfig()
        if args.seed is not None:
            if args.seed < 0:
                raise cfgmod.ConfigError("--seed must be non-negative")
            rc = replace(rc, seed=args.seed, simulate=replace(rc.simulate, seed=args.seed))
        if args.out is not None:
            rc = replace(rc, out=args.out)
    except (cfgmod.ConfigError, ValueError) as exc:
        print(f"revman: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    rc.apply_tolerances()
    if args.data is not None and args.command == "simulate":
        print("revman: --data is an input option; simulate writes to OUT/data", file=sys.stderr)
        return EXIT_CONFIG
    paths = Paths(rc.out, args.data)
    commands = COMMANDS if args.command == "all" else (args.command,)
    status = EXIT_OK
    for cmd in commands:
        try:
            code = STAGES[cmd](rc, paths)
        except StageError as exc:
            print(f"revman {cmd}: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        if code == EXIT_VIOLATION:
            print(f"revman {cmd}: finished with model-violation flags (see artifacts)", file=sys.stderr)
        status = max(status, code)
    return status


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
