"""Policy effects on municipal costs (EMC) per unit.

``EMC = -[CATE_UW * (PC_UW + EC_UW) + CATE_RW * (PC_RW + EC_RW)]``; positive
values are savings. PC terms form the private (management) part, EC terms
the external (environmental) part.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd
from scipy import stats

from .causal_forest import CausalForest
from .dataset import build_frames
from .exceptions import InputError, MissingCostColumns, NonFiniteInput
from .residualizer import derive_seed, residualize

log = logging.getLogger(__name__)

_TAG_COST = 31


@dataclass(frozen=True)
class CostParams:
    ec_uw: float = 0.020
    ec_rw: float = -0.120
    significance_alpha: float = 0.05
    significance_filter: bool = True

    def __post_init__(self):
        if self.ec_uw < 0 or self.ec_rw > 0:
            raise InputError("ec_uw must be >= 0 and ec_rw <= 0")
        if not 0 < self.significance_alpha < 1:
            raise InputError("significance_alpha must lie in (0, 1)")


@dataclass(frozen=True)
class EmcResult:
    unit_id: object
    policy_year: int | None
    private_emc: float
    external_emc: float
    total_emc: float
    cate_uw: float
    cate_rw: float
    pc_uw: float
    pc_rw: float
    price_used: float


def emc_components(cate_uw, cate_rw, pc_uw, pc_rw, params: CostParams = CostParams()):
    """Vectorized ``(private, external, total)``; ``total = private + external``."""
    arrs = [np.asarray(a, dtype=float) for a in (cate_uw, cate_rw, pc_uw, pc_rw)]
    if not all(np.all(np.isfinite(a)) for a in arrs):
        raise NonFiniteInput("CATEs and unit costs must be finite")
    cu, cr, pu, pr = arrs
    if np.any(pu < 0) or np.any(pr < 0):
        raise NonFiniteInput("unit costs must be non-negative")
    private = -(cu * pu + cr * pr)
    external = -(cu * params.ec_uw + cr * params.ec_rw)
    return private, external, private + external


def compute_emc(cate_uw, cate_rw, pc_uw, pc_rw, params: CostParams = CostParams(),
                unit_id=None, policy_year=None, price_used=np.nan):
    private, external, total = emc_components(cate_uw, cate_rw, pc_uw, pc_rw, params)
    return EmcResult(unit_id, policy_year, float(private), float(external), float(total),
                     float(cate_uw), float(cate_rw), float(pc_uw), float(pc_rw),
                     float(price_used))


def assign_price_untreated(s_hat, treated_gps, treated_prices, chunk=2048):
    """Price of the treated unit with the closest GPS; ties go to the lower price.

    Accepts a scalar or an array of untreated GPS values.
    """
    gps = np.asarray(treated_gps, float)
    prices = np.asarray(treated_prices, float)
    if gps.size == 0:
        raise InputError("no treated units to borrow a price from")
    order = np.lexsort((prices, gps))
    gps, prices = gps[order], prices[order]
    s = np.atleast_1d(np.asarray(s_hat, float))
    out = np.empty(s.shape[0])
    for a in range(0, s.shape[0], chunk):
        dist = np.abs(s[a:a + chunk, None] - gps[None, :])
        best = dist.min(axis=1, keepdims=True)
        cand = np.where(dist == best, prices[None, :], np.inf)
        out[a:a + chunk] = cand.min(axis=1)
    return float(out[0]) if np.ndim(s_hat) == 0 else out


def _binary_frames(panel, k, column):
    return [replace(fr, outcome=column) for fr in build_frames(panel, k, "uw")]


def predict_unit_costs_under_payt(panel, k, forest_cfg, params: CostParams = CostParams(),
                                  seed=0):
    """Policy effect on unit costs from an R-learner with a binary treatment.

    For each cost column a causal forest is fitted on the policy indicator.
    Untreated rows whose predicted effect is significant at
    ``params.significance_alpha`` get ``observed PC + effect`` (floored at 0);
    all other rows keep the observed PC.

    ``forest_cfg`` is a :class:`capeforest.pipeline.EstimatorConfig`.
    """
    if not panel.has_costs():
        raise MissingCostColumns("pc_uw and pc_rw columns are required")
    z = stats.norm.ppf(1 - params.significance_alpha / 2)
    out = None
    for tag, col in enumerate(("pc_uw", "pc_rw")):
        frames = _binary_frames(panel, k, col)
        s = derive_seed(seed, _TAG_COST, tag, k)
        resid = residualize(frames, forest_cfg.nuisance, seed=s, n_jobs=forest_cfg.n_jobs,
                            treatment="binary")
        cf = CausalForest.from_params(
            forest_cfg.causal, bag_size=forest_cfg.bag_size,
            random_state=derive_seed(s, 1), n_jobs=forest_cfg.n_jobs)
        cf.fit(resid.X, resid.y_resid, resid.p_resid, resid.treated,
               resid.years if len(frames) > 1 else None)
        eff, se = cf.predict_oob(with_std=True)
        sig = np.abs(eff) > z * se
        replace_ = sig & ~resid.treated
        hat = np.where(replace_, resid.y + eff, resid.y)
        if np.any(hat < 0):
            log.warning("%s: %d predicted unit costs below zero floored at 0",
                        col, int(np.sum(hat < 0)))
            hat = np.maximum(hat, 0.0)
        if out is None:
            out = pd.DataFrame({"unit_id": resid.unit_ids, "year": resid.years,
                                "treated": resid.treated})
        out[f"{col}_obs"] = resid.y
        out[f"{col}_effect"] = eff
        out[f"{col}_se"] = se
        out[f"{col}_significant"] = sig
        out[f"{col}_hat"] = hat
    return out


def simulate_all(cape_uw, cape_rw, panel, params: CostParams = CostParams(), costs=None,
                 policy_year=None):
    """EMC for every row of the policy-year frames, as if all units adopted.

    Parameters
    ----------
    cape_uw, cape_rw : DataFrame or FrameEstimate
        CAPE tables (``FrameEstimate.cape_table()`` layout) for one policy
        year, covering the same rows.
    panel : Panel
        Source of the observed unit costs.
    costs : DataFrame, optional
        Output of :func:`predict_unit_costs_under_payt`; its ``*_hat`` columns
        replace the observed costs.
    """
    if hasattr(cape_uw, "cape_table"):
        policy_year = cape_uw.policy_year if policy_year is None else policy_year
        cape_uw, cape_rw = cape_uw.cape_table(), cape_rw.cape_table()
    u, r = cape_uw.reset_index(drop=True), cape_rw.reset_index(drop=True)
    if not (u["unit_id"].equals(r["unit_id"]) and u["year"].equals(r["year"])):
        raise InputError("UW and RW estimates must cover the same rows")
    treated = u["treated"].to_numpy().astype(bool)
    own = u["price"].to_numpy(float)
    gps = u["s_hat"].to_numpy(float)
    price = own.copy()
    if (~treated).any():
        price[~treated] = assign_price_untreated(gps[~treated], gps[treated], own[treated])
    z = stats.norm.ppf(1 - params.significance_alpha / 2)
    cates = []
    for tab in (u, r):
        delta = tab["delta_hat"].to_numpy(float)
        c = price * delta
        if params.significance_filter:
            c = np.where(np.abs(delta) > z * tab["std_err"].to_numpy(float), c, 0.0)
        cates.append(c)
    key = pd.MultiIndex.from_arrays([u["unit_id"], u["year"]])
    if costs is not None:
        src = costs.set_index(["unit_id", "year"])
        pc_uw = src["pc_uw_hat"].reindex(key).to_numpy(float)
        pc_rw = src["pc_rw_hat"].reindex(key).to_numpy(float)
    else:
        if not panel.has_costs():
            raise MissingCostColumns("pc_uw and pc_rw columns are required")
        src = panel.df.set_index(["unit_id", "year"])
        pc_uw = src["pc_uw"].reindex(key).to_numpy(float)
        pc_rw = src["pc_rw"].reindex(key).to_numpy(float)
    if np.any(~np.isfinite(pc_uw)) or np.any(~np.isfinite(pc_rw)):
        raise MissingCostColumns("unit costs missing for some frame rows")
    private, external, total = emc_components(cates[0], cates[1], pc_uw, pc_rw, params)
    return pd.DataFrame({
        "unit_id": u["unit_id"], "year": u["year"], "policy_year": policy_year,
        "treated": treated.astype(int), "price_used": price, "cate_uw": cates[0],
        "cate_rw": cates[1], "pc_uw": pc_uw, "pc_rw": pc_rw, "private_emc": private,
        "external_emc": external, "total_emc": total})


def emc_records(table):
    return [EmcResult(r.unit_id, r.policy_year, r.private_emc, r.external_emc,
                      r.total_emc, r.cate_uw, r.cate_rw, r.pc_uw, r.pc_rw, r.price_used)
            for r in table.itertuples(index=False)]


def emc_summary(table):
    """Mean, sd and share positive per component and policy year."""
    rows = []
    for k, g in table.groupby("policy_year", sort=True):
        for comp in ("private_emc", "external_emc", "total_emc"):
            v = g[comp].to_numpy()
            rows.append({"policy_year": k, "component": comp.replace("_emc", ""),
                         "mean": v.mean(), "sd": v.std(ddof=1) if len(v) > 1 else 0.0,
                         "share_positive": float(np.mean(v > 0)), "n": len(v)})
    return pd.DataFrame(rows)


def household_variable_cost(price_per_liter, waste_kg, liters_per_kg, fallback=None):
    """Household spending ``price * kg * liters_per_kg``.

    Missing conversion factors use ``fallback`` or, when that is None, the
    median of the available factors.
    """
    f = np.asarray(liters_per_kg, float).copy()
    miss = ~np.isfinite(f)
    if miss.any():
        if fallback is None:
            if miss.all():
                raise InputError("no liter-to-kg factors available for the median fallback")
            fallback = float(np.median(f[~miss]))
        f[miss] = fallback
    return np.asarray(price_per_liter, float) * np.asarray(waste_kg, float) * f
