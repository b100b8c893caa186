"""Command line entry point: ``capeforest <command> [options]``.

Every command reads a panel CSV and/or the outputs of earlier commands and
writes only inside ``--out``. Exit codes: 0 ok, 1 estimation failure, 2 bad
input.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pandas as pd
import yaml

from . import baselines, dgp, diagnostics, heterogeneity, theory, welfare
from .dataset import OUTCOMES, exclude_neighbors, load_neighbor_map, load_panel, load_schema
from .dataset import validation_report
from .exceptions import CapeForestError, EstimationError, InputError, PanelValidationError
from .forest import ForestParams, tune_regression_forest
from .pipeline import EstimatorConfig, estimate

log = logging.getLogger("capeforest")

FLOAT_FMT = "%.17g"


# -- config -----------------------------------------------------------------

DEFAULTS = {
    "data": None,
    "schema": None,
    "out": "out",
    "seed": 0,
    "threads": 1,
    "outcomes": list(OUTCOMES),
    "policy_years": [1, 2, 3],
    "neighbors": None,
    "forest": {
        "nuisance": {"num_trees": 500},
        "causal": {"num_trees": 1000},
        "bag_size": 10,
        "min_treated_per_leaf": 1,
        "min_control_per_leaf": 1,
        "tune": False,
    },
    "cost": {"ec_uw": 0.020, "ec_rw": -0.120, "significance_alpha": 0.05,
             "significance_filter": True},
    "n_boot": 200,
}


def _merge(base, extra):
    out = dict(base)
    for k, v in (extra or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(args):
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise InputError(f"config file {path} does not exist")
        with open(path) as fh:
            cfg = _merge(cfg, yaml.safe_load(fh) or {})
    for key in ("data", "schema", "out", "seed", "threads", "neighbors"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if getattr(args, "outcomes", None):
        cfg["outcomes"] = args.outcomes
    if getattr(args, "years", None):
        cfg["policy_years"] = args.years
    if getattr(args, "num_trees", None):
        cfg["forest"] = _merge(cfg["forest"], {"causal": {"num_trees": args.num_trees}})
    if getattr(args, "nuisance_trees", None):
        cfg["forest"] = _merge(cfg["forest"], {"nuisance": {"num_trees": args.nuisance_trees}})
    if getattr(args, "bag_size", None):
        cfg["forest"] = _merge(cfg["forest"], {"bag_size": args.bag_size})
    if getattr(args, "tune", False):
        cfg["forest"] = _merge(cfg["forest"], {"tune": True})
    if getattr(args, "no_filter", False):
        cfg["cost"] = _merge(cfg["cost"], {"significance_filter": False})
    for key in ("data", "schema", "neighbors"):
        if cfg.get(key) and not Path(cfg[key]).exists():
            raise InputError(f"{key} file {cfg[key]} does not exist")
    return cfg


def estimator_config(cfg):
    f = cfg["forest"]
    try:
        nuisance = ForestParams(**f.get("nuisance", {}))
        causal = ForestParams(**f.get("causal", {}))
        prop = ForestParams(**f["propensity"]) if f.get("propensity") else None
    except TypeError as err:
        raise InputError(f"bad forest parameters: {err}") from None
    return EstimatorConfig(nuisance=nuisance, propensity=prop, causal=causal,
                           bag_size=int(f.get("bag_size", 10)),
                           min_treated_per_leaf=int(f.get("min_treated_per_leaf", 1)),
                           min_control_per_leaf=int(f.get("min_control_per_leaf", 1)),
                           n_boot=int(cfg.get("n_boot", 200)), seed=int(cfg["seed"]),
                           n_jobs=int(cfg["threads"]))


def _out(cfg):
    path = Path(cfg["out"])
    path.mkdir(parents=True, exist_ok=True)
    return path


def _panel(cfg):
    if not cfg.get("data"):
        raise InputError("no data file given (--data or config 'data')")
    schema = load_schema(cfg["schema"]) if cfg.get("schema") else None
    panel = load_panel(cfg["data"], schema)
    if cfg.get("neighbors"):
        panel = exclude_neighbors(panel, load_neighbor_map(cfg["neighbors"]))
    return panel


def _write_csv(df, path):
    df.to_csv(path, index=False, float_format=FLOAT_FMT)
    log.info("wrote %s", path)


# -- commands ---------------------------------------------------------------

def cmd_validate(args):
    cfg = load_config(args)
    schema = load_schema(cfg["schema"]) if cfg.get("schema") else None
    try:
        panel = load_panel(cfg["data"], schema, lag_check=args.lag_check, p_max=args.p_max)
    except PanelValidationError as err:
        print(validation_report(err))
        return 2
    df = panel.df
    print(f"rows {len(df)}")
    print(f"units {df['unit_id'].nunique()}")
    print(f"years {int(df['year'].min())}-{int(df['year'].max())}")
    print(f"adopters {df.loc[df['adoption_year'].notna(), 'unit_id'].nunique()}")
    print(f"covariates {len(panel.covariates)}")
    if panel.excluded_units:
        print(f"excluded {len(panel.excluded_units)}")
    print("ok")
    return 0


def cmd_dgp(args):
    cfg = load_config(args)
    spec_cfg = {"preset": args.preset}
    if args.config:
        with open(args.config) as fh:
            spec_cfg.update((yaml.safe_load(fh) or {}).get("dgp", {}))
    for item in args.set or []:
        key, _, val = item.partition("=")
        spec_cfg[key] = yaml.safe_load(val)
    spec_cfg["seed"] = int(cfg["seed"]) if args.seed is not None else spec_cfg.get("seed", 0)
    spec = dgp.spec_from_dict(spec_cfg)
    panel, manifest = dgp.generate(spec)
    out = _out(cfg)
    panel.df.to_csv(out / "panel.csv", index=False, float_format=FLOAT_FMT)
    _write_csv(manifest, out / "manifest.csv")
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest.attrs, fh, indent=2, sort_keys=True)
    print(f"{manifest.attrs['rows']} rows, {manifest.attrs['adopters']} adopters -> {out}")
    return 0


def _tuned(cfg, ecfg, panel):
    """Tune the nuisance forests once on the pooled year-1 frames of UW."""
    from .dataset import build_frames
    frames = build_frames(panel, 1, "uw")
    X = np.vstack([f.X for f in frames])
    y = np.concatenate([f.y for f in frames])
    params, rows = tune_regression_forest(X, y, base=ecfg.nuisance,
                                          random_state=ecfg.seed, n_jobs=ecfg.n_jobs)
    for combo, mse in rows:
        log.info("tune %s -> oob mse %.6g", combo, mse)
    return replace(ecfg, nuisance=params)


def cmd_estimate(args):
    cfg = load_config(args)
    panel = _panel(cfg)
    ecfg = estimator_config(cfg)
    out = _out(cfg)
    if cfg["forest"].get("tune"):
        ecfg = _tuned(cfg, ecfg, panel)
    apes, failures = [], []
    for outcome in cfg["outcomes"]:
        for k in cfg["policy_years"]:
            t0 = time.perf_counter()
            try:
                fe = estimate(panel, int(k), outcome, ecfg)
            except EstimationError as err:
                log.error("%s k=%s: %s: %s", outcome, k, type(err).__name__, err)
                failures.append({"outcome": outcome, "policy_year": k,
                                 "error": type(err).__name__, "message": str(err)})
                continue
            _write_csv(fe.cape_table(), out / f"cape_{outcome}_k{k}.csv")
            fe.resid.to_csv(out / f"residuals_{outcome}_k{k}.csv")
            if args.save_models:
                (out / "models").mkdir(exist_ok=True)
                fe.forest.save(out / "models" / f"cf_{outcome}_k{k}.npz")
            apes.append({"outcome": outcome, "policy_year": k, "ape": fe.ape.ape,
                         "std_err": fe.ape.std_err, "ci_low": fe.ape.ci[0],
                         "ci_high": fe.ape.ci[1], "n": len(fe.resid),
                         "n_treated": int(fe.resid.treated.sum())})
            log.info("%s k=%s done in %.1fs", outcome, k, time.perf_counter() - t0)
    if apes:
        _write_csv(pd.DataFrame(apes), out / "ape.csv")
    if failures:
        _write_csv(pd.DataFrame(failures), out / "failures.csv")
        return 1
    return 0


def _capes(out_dir, outcome, k):
    path = Path(out_dir) / f"cape_{outcome}_k{k}.csv"
    if not path.exists():
        raise InputError(f"{path} missing; run 'estimate' first")
    return pd.read_csv(path, dtype={"unit_id": str}, float_precision="round_trip")


def cmd_diagnose(args):
    cfg = load_config(args)
    out = _out(cfg)
    est = Path(args.estimates or cfg["out"])
    worst = 1.0
    rows = []
    for outcome in cfg["outcomes"]:
        for k in cfg["policy_years"]:
            tab = _capes(est, outcome, k)
            rep = diagnostics.overlap_report(
                tab["s_hat"], tab["treated"].astype(bool), caliper=args.caliper,
                caliper_mode="absolute" if args.absolute else "relative",
                years=tab["year"] if args.per_year else None)
            with open(out / f"overlap_{outcome}_k{k}.txt", "w") as fh:
                fh.write(rep.to_text())
            rows.append({"outcome": outcome, "policy_year": k,
                         "normalized_diff": rep.normalized_diff,
                         "coverage_treated": rep.coverage_treated,
                         "coverage_control": rep.coverage_control,
                         "caliper_share_treated": rep.caliper_share_treated,
                         "caliper_share_control": rep.caliper_share_control})
            worst = min(worst, rep.caliper_share_treated, rep.caliper_share_control)
    table = pd.DataFrame(rows)
    _write_csv(table, out / "overlap.csv")
    print(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    if args.floor is not None and worst < args.floor:
        log.error("caliper share %.3f below floor %.3f", worst, args.floor)
        return 1
    return 0


def _labels(groups_df, column, tab):
    if column not in groups_df.columns:
        raise InputError(f"unknown grouping column {column!r}")
    labels = groups_df[column].reindex(tab["unit_id"])
    keep = labels.notna().to_numpy()
    if not keep.all():
        log.info("%s: %d rows without a label dropped", column, (~keep).sum())
    return labels.to_numpy()[keep], keep


def cmd_heterogeneity(args):
    cfg = load_config(args)
    out = _out(cfg)
    est = Path(args.estimates or cfg["out"])
    groups_df = None
    if args.group_by or args.pairwise_by:
        groups_df = _panel(cfg).df.drop_duplicates("unit_id").set_index("unit_id")
    levene_rows, sub_rows, ela_rows = [], [], []
    for outcome in cfg["outcomes"]:
        tabs = {k: _capes(est, outcome, k) for k in cfg["policy_years"]}
        if args.group_by:
            for k, tab in tabs.items():
                labels, keep = _labels(groups_df, args.group_by, tab)
                res = heterogeneity.levene_heterogeneity(tab["delta_hat"][keep], labels)
                levene_rows.append({"outcome": outcome, "grouping": args.group_by,
                                    "policy_year": k, "statistic": res.statistic,
                                    "p_value": res.p_value, "groups": res.n_groups})
        elif len(tabs) >= 2:
            vals = np.concatenate([t["delta_hat"].to_numpy() for t in tabs.values()])
            labels = np.concatenate([np.full(len(t), k) for k, t in tabs.items()])
            res = heterogeneity.levene_heterogeneity(vals, labels)
            levene_rows.append({"outcome": outcome, "grouping": "policy_year",
                                "policy_year": "all", "statistic": res.statistic,
                                "p_value": res.p_value, "groups": res.n_groups})
        for k, tab in tabs.items():
            rpath = est / f"residuals_{outcome}_k{k}.csv"
            resid = pd.read_csv(rpath, dtype={"unit_id": str}, float_precision="round_trip")
            rf = SimpleNamespace(y_resid=resid["y_resid"].to_numpy(),
                                 p_resid=resid["p_resid"].to_numpy(), frames=None)
            rep = heterogeneity.subgroup_ape_diff(rf, tab["delta_hat"].to_numpy(),
                                                  clusters=tab["unit_id"].to_numpy(),
                                                  n_boot=int(cfg["n_boot"]),
                                                  seed=int(cfg["seed"]))
            sub_rows.append({"outcome": outcome, "policy_year": k,
                             "ape_high": rep.ape_high.ape, "ape_low": rep.ape_low.ape,
                             "abs_diff": rep.abs_diff, "ci_low": rep.ci_low,
                             "ci_high": rep.ci_high, "n_high": rep.n_high,
                             "n_low": rep.n_low})
            tr = tab[tab["treated"] == 1]
            if len(tr) > 4:
                data = _outcome_values(cfg, tr, outcome) if cfg.get("data") else None
                if data is not None:
                    et = heterogeneity.elasticity_table(tr["delta_hat"].to_numpy(),
                                                        tr["price"].to_numpy(), data)
                    et.insert(0, "policy_year", k)
                    et.insert(0, "outcome", outcome)
                    ela_rows.append(et)
                try:
                    blp = heterogeneity.best_linear_projection(
                        tr["delta_hat"].to_numpy(), tr["price"].to_numpy(),
                        std_err=tr["std_err"].to_numpy())
                except EstimationError as err:
                    log.warning("%s k=%s: projection skipped: %s", outcome, k, err)
                else:
                    _write_csv(blp.table(), out / f"blp_{outcome}_k{k}.csv")
                    grid = np.linspace(tr["price"].min(), tr["price"].max(), 50)
                    _write_csv(heterogeneity.blp_curve(blp, grid),
                               out / f"blp_curve_{outcome}_k{k}.csv")
            if args.pairwise_by:
                labels, keep = _labels(groups_df, args.pairwise_by, tab)
                pw = heterogeneity.pairwise_cape_comparison(tab["delta_hat"][keep], labels)
                _write_csv(pw, out / f"pairwise_{outcome}_k{k}.csv")
    if levene_rows:
        _write_csv(pd.DataFrame(levene_rows), out / "levene.csv")
        print(pd.DataFrame(levene_rows).to_string(index=False))
    _write_csv(pd.DataFrame(sub_rows), out / "subgroup_ape.csv")
    if ela_rows:
        _write_csv(pd.concat(ela_rows, ignore_index=True), out / "elasticity.csv")
    return 0


def _outcome_values(cfg, rows, outcome):
    df = _panel(cfg).df.set_index(["unit_id", "year"])
    key = pd.MultiIndex.from_arrays([rows["unit_id"], rows["year"]])
    return df[outcome].reindex(key).to_numpy(float)


def cmd_emc(args):
    cfg = load_config(args)
    out = _out(cfg)
    est = Path(args.estimates or cfg["out"])
    panel = _panel(cfg)
    cp = cfg["cost"]
    params = welfare.CostParams(float(cp["ec_uw"]), float(cp["ec_rw"]),
                                float(cp["significance_alpha"]),
                                bool(cp["significance_filter"]))
    tables = []
    for k in cfg["policy_years"]:
        u, r = _capes(est, "uw", k), _capes(est, "rw", k)
        costs = None
        if args.predict_costs:
            costs = welfare.predict_unit_costs_under_payt(
                panel, int(k), estimator_config(cfg), params, seed=int(cfg["seed"]))
            _write_csv(costs, out / f"unit_costs_k{k}.csv")
        tab = welfare.simulate_all(u, r, panel, params, costs, policy_year=int(k))
        if not args.all_units:
            tab = tab[tab["treated"] == 1].reset_index(drop=True)
        tables.append(tab)
    units = pd.concat(tables, ignore_index=True)
    _write_csv(units, out / ("emc_all_units.csv" if args.all_units else "emc_units.csv"))
    summary = welfare.emc_summary(units)
    _write_csv(summary, out / ("emc_all_summary.csv" if args.all_units else "emc_summary.csv"))
    print(summary.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    return 0


def cmd_theory(args):
    cfg = load_config(args)
    rows = []
    for label, (caa, crr, car) in theory.CANONICAL.items():
        signs = theory.statics_signs(caa, crr, car)
        rows.append({"case": label, "C_AA": caa, "C_RR": crr, "C_AR": car,
                     "dwA_dt": signs[0], "dwR_dt": signs[1],
                     "class": theory.classify_prediction(signs, caa, crr, car)})
    table = pd.DataFrame(rows)
    print(table.to_string(index=False))
    oracle = pd.DataFrame(theory.oracle_table(args.draws, seed=int(cfg["seed"])))
    print(f"\noracle: {int(oracle['sign_match'].sum())}/{len(oracle)} sign matches, "
          f"max relative gap {_max_rel(oracle):.2e}")
    if args.out:
        out = _out(cfg)
        _write_csv(table, out / "theory_signs.csv")
        _write_csv(oracle, out / "theory_oracle.csv")
    return 0


def _max_rel(o):
    ra = np.abs(o["dwA_dt"] - o["fd_dwA_dt"]) / np.abs(o["dwA_dt"])
    rr = np.abs(o["dwR_dt"] - o["fd_dwR_dt"]) / np.abs(o["dwR_dt"])
    return float(max(ra.max(), rr.max()))


def cmd_fe(args):
    cfg = load_config(args)
    out = _out(cfg)
    panel = _panel(cfg)
    tabs = []
    for outcome in cfg["outcomes"]:
        res = baselines.fit_event_study(panel, outcome)
        t = res.table()
        t.insert(0, "outcome", outcome)
        tabs.append(t)
        flag = "REJECT" if res.pretrend_joint_p < args.alpha else "no rejection"
        print(f"{outcome}: pretrend p = {res.pretrend_joint_p:.4g} ({flag})")
        ape_path = Path(args.estimates or cfg["out"]) / "ape.csv"
        if ape_path.exists():
            ape = pd.read_csv(ape_path, float_precision="round_trip")
            ape = ape[ape["outcome"] == outcome]
            apes = {int(r.policy_year): SimpleNamespace(ape=r.ape, std_err=r.std_err)
                    for r in ape.itertuples()}
            _write_csv(baselines.comparison_table(res, apes, outcome),
                       out / f"fe_vs_cf_{outcome}.csv")
    table = pd.concat(tabs, ignore_index=True)
    _write_csv(table, out / "event_study.csv")
    print(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    return 0


def cmd_bench(args):
    cfg = load_config(args)
    spec = replace(dgp.PRESETS[args.preset], n_units=args.n_units, seed=int(cfg["seed"]))
    scale = args.n_units / 1000
    spec = replace(spec, cohort_sizes={y: max(1, int(round(c * scale)))
                                       for y, c in dgp.REFERENCE_COHORTS.items()})
    panel, _ = dgp.generate(spec)
    ecfg = estimator_config(cfg)
    rows = []
    for threads in args.thread_counts or [int(cfg["threads"])]:
        t0 = time.perf_counter()
        fe = estimate(panel, 1, "uw", replace(ecfg, n_jobs=threads))
        rows.append({"threads": threads, "n": len(fe.resid), "seconds": time.perf_counter() - t0,
                     "checksum": float(np.sum(fe.delta))})
        print(f"threads={threads} n={len(fe.resid)} {rows[-1]['seconds']:.2f}s")
    if args.out:
        _write_csv(pd.DataFrame(rows), _out(cfg) / "bench.csv")
    return 0


# -- parser -----------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="capeforest", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int)
        if data:
            sp.add_argument("--data", help="panel CSV")
            sp.add_argument("--schema", help="YAML column map")
            sp.add_argument("--neighbors", help="CSV of unit_id,neighbor_id pairs to exclude")
        sp.add_argument("--outcomes", nargs="+", choices=OUTCOMES)
        sp.add_argument("--years", nargs="+", type=int, choices=(1, 2, 3))

    sp = sub.add_parser("validate", help="check a panel CSV")
    common(sp)
    sp.add_argument("--lag-check", action="store_true",
                    help="exclude treated units whose lag covariates are missing")
    sp.add_argument("--p-max", type=float, help="upper bound on prices")
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("dgp", help="simulate a panel with known effects")
    common(sp, data=False)
    sp.add_argument("--preset", default="default", choices=sorted(dgp.PRESETS))
    sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                    help="override a DgpSpec field (YAML value)")
    sp.set_defaults(func=cmd_dgp)

    sp = sub.add_parser("estimate", help="nuisance and causal forests per outcome and year")
    common(sp)
    sp.add_argument("--num-trees", type=int, help="causal forest trees")
    sp.add_argument("--nuisance-trees", type=int)
    sp.add_argument("--bag-size", type=int)
    sp.add_argument("--tune", action="store_true", help="grid-search nuisance parameters")
    sp.add_argument("--save-models", action="store_true", help="write fitted forests as .npz")
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("diagnose", help="GPS overlap report")
    common(sp)
    sp.add_argument("--estimates", help="directory with estimate outputs (default --out)")
    sp.add_argument("--caliper", type=float, default=0.10)
    sp.add_argument("--absolute", action="store_true", help="absolute instead of relative caliper")
    sp.add_argument("--per-year", action="store_true", help="coverage within calendar years")
    sp.add_argument("--floor", type=float, help="fail when a caliper share is below this")
    sp.set_defaults(func=cmd_diagnose)

    sp = sub.add_parser("heterogeneity", help="Levene, subgroups, projection, elasticities")
    common(sp)
    sp.add_argument("--estimates")
    sp.add_argument("--group-by", help="panel column defining Levene groups")
    sp.add_argument("--pairwise-by", help="panel column for Tukey-Kramer comparisons")
    sp.set_defaults(func=cmd_heterogeneity)

    sp = sub.add_parser("emc", help="effects on municipal costs")
    common(sp)
    sp.add_argument("--estimates")
    sp.add_argument("--all-units", action="store_true", help="simulate adoption everywhere")
    sp.add_argument("--no-filter", action="store_true", help="keep insignificant CATEs")
    sp.add_argument("--predict-costs", action="store_true",
                    help="replace untreated unit costs with predicted PAYT costs")
    sp.set_defaults(func=cmd_emc)

    sp = sub.add_parser("theory", help="comparative statics of the household model")
    common(sp, data=False)
    sp.add_argument("--draws", type=int, default=100)
    sp.set_defaults(func=cmd_theory)

    sp = sub.add_parser("fe", help="two-way fixed-effects event study")
    common(sp)
    sp.add_argument("--estimates")
    sp.add_argument("--alpha", type=float, default=0.05)
    sp.set_defaults(func=cmd_fe)

    sp = sub.add_parser("bench", help="time one estimation on a simulated panel")
    common(sp, data=False)
    sp.add_argument("--preset", default="default", choices=sorted(dgp.PRESETS))
    sp.add_argument("--n-units", type=int, default=1000)
    sp.add_argument("--thread-counts", type=int, nargs="+")
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(message)s")
    t0 = time.perf_counter()
    try:
        code = args.func(args)
    except InputError as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2
    except (EstimationError, CapeForestError) as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
