"""Generalized random forest for the conditional average price effect (CAPE).

The forest is grown on residualized outcomes and prices. Splits maximize
``n_L * n_R * (d_L - d_R)**2`` where ``d`` is the no-intercept slope of the
outcome residual on the price residual inside each child. The forest's kernel
then weights a local residual-on-residual regression at every query point.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import _ensemble, _tree
from .exceptions import (BagConfigInvalid, InfeasibleLeafConstraints, InputError,
                         NoOobTrees, NoResidualVariation, ZeroLocalPriceVariation)
from .forest import ForestParams, check_X, param_grid

log = logging.getLogger(__name__)

Z95 = stats.norm.ppf(0.975)


@dataclass(frozen=True)
class CapeEstimate:
    unit_id: object
    delta_hat: float
    std_err: float
    ci_low: float
    ci_high: float
    significant_05: bool


@dataclass(frozen=True)
class ApeEstimate:
    ape: float
    std_err: float
    policy_year: int | None = None
    outcome: str | None = None

    @property
    def ci(self):
        return self.ape - Z95 * self.std_err, self.ape + Z95 * self.std_err


def _bayes_debias(var_between, group_noise, n_groups):
    """Posterior mean of a variance under a flat prior truncated at zero."""
    initial = var_between - group_noise
    se = np.maximum(var_between, group_noise) * np.sqrt(2.0 / n_groups)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = initial / se
        corr = se * stats.norm.pdf(ratio) / stats.norm.cdf(ratio)
    out = initial + corr
    return np.where(se > 0, out, np.maximum(initial, 0.0))


class CausalForest(BaseEstimator):
    """Causal forest on residualized data.

    Parameters
    ----------
    num_trees, min_leaf_size, mtry, subsample_fraction, imbalance_penalty,
    honesty_fraction : see :class:`ForestParams`. With ``bag_size > 1`` the
        subsample fraction is capped at one half.
    bag_size : int
        Trees per little bag; trees of one bag share a half-sample draw.
        ``1`` disables variance estimation.
    min_treated_per_leaf, min_control_per_leaf : int
        Minimum number of treated and control rows in every child.
    random_state, n_jobs : as for :class:`RegressionForest`.
    """

    def __init__(self, num_trees=1000, min_leaf_size=5, mtry=None,
                 subsample_fraction=0.5, imbalance_penalty=0.0,
                 honesty_fraction=0.5, bag_size=10, min_treated_per_leaf=1,
                 min_control_per_leaf=1, random_state=0, n_jobs=1):
        self.num_trees = num_trees
        self.min_leaf_size = min_leaf_size
        self.mtry = mtry
        self.subsample_fraction = subsample_fraction
        self.imbalance_penalty = imbalance_penalty
        self.honesty_fraction = honesty_fraction
        self.bag_size = bag_size
        self.min_treated_per_leaf = min_treated_per_leaf
        self.min_control_per_leaf = min_control_per_leaf
        self.random_state = random_state
        self.n_jobs = n_jobs

    @classmethod
    def from_params(cls, params: ForestParams, **kwargs):
        return cls(**params.as_dict(), **kwargs)

    @property
    def params(self):
        return ForestParams(self.num_trees, self.min_leaf_size, self.mtry,
                            self.subsample_fraction, self.imbalance_penalty,
                            self.honesty_fraction)

    def _check_bags(self):
        g = int(self.bag_size)
        if g < 1 or self.num_trees % g:
            raise BagConfigInvalid(
                f"num_trees={self.num_trees} is not a multiple of bag_size={g}")
        if g > 1 and self.num_trees // g < 2:
            raise BagConfigInvalid("little bags need at least two bags")
        return g

    def fit(self, X, y_resid, p_resid, treated=None, strata=None):
        """Grow the forest on outcome residuals ``y_resid`` and price residuals ``p_resid``.

        ``treated`` flags rows with positive price; when omitted the
        treated/control leaf minimums are not enforced.
        """
        params = self.params
        g = self._check_bags()
        X = check_X(X)
        n, d = X.shape
        y_resid = np.asarray(y_resid, dtype=np.float64)
        p_resid = np.asarray(p_resid, dtype=np.float64)
        if y_resid.shape != (n,) or p_resid.shape != (n,):
            raise InputError("residual vectors must have one entry per row of X")
        if not (np.all(np.isfinite(y_resid)) and np.all(np.isfinite(p_resid))):
            raise InputError("residuals contain non-finite values")
        scale = float(np.mean(p_resid ** 2))
        if np.max(np.abs(p_resid)) < 1e-12:
            raise NoResidualVariation("price residuals are all zero")
        if treated is None:
            t_flag = np.zeros(n, dtype=np.int64)
            min_t = min_c = 0
        else:
            t_flag = np.asarray(treated).astype(np.int64)
            min_t, min_c = int(self.min_treated_per_leaf), int(self.min_control_per_leaf)
            if t_flag.sum() < min_t or (n - t_flag.sum()) < min_c:
                raise InfeasibleLeafConstraints(
                    f"{t_flag.sum()} treated / {n - t_flag.sum()} control rows cannot "
                    f"meet minimums {min_t}/{min_c}")
        frac = params.subsample_fraction
        if g > 1 and frac > 0.5:
            log.info("subsample_fraction capped at 0.5 for little bags")
        plans, halves = _ensemble.plan_bagged_trees(
            n, params.num_trees, g, frac, params.honesty_fraction,
            int(self.random_state), strata)
        self.n_features_in_ = d
        self.mtry_ = _ensemble.resolve_mtry(params.mtry, d)
        self.forest_ = _ensemble.grow(
            X, y_resid, p_resid, t_flag, plans, kind=_tree.CAUSAL, mtry=self.mtry_,
            min_leaf=params.min_leaf_size, min_treated=min_t, min_control=min_c,
            penalty=params.imbalance_penalty,
            honest=params.honesty_fraction is not None, n_jobs=self.n_jobs)
        self.bag_of_tree_ = np.array([p.bag for p in plans], dtype=np.int64)
        self.n_bags_ = len(halves)
        self.in_half_ = np.zeros((self.n_bags_, n), dtype=np.bool_)
        for j, h in enumerate(halves):
            self.in_half_[j, h] = True
        self.subsamples_ = [p.sample for p in plans]
        self.leaf_num_ = self.forest_.leaf_means(y_resid * p_resid)
        self.leaf_den_ = self.forest_.leaf_means(p_resid * p_resid)
        self.ape_ = float(np.sum(y_resid * p_resid) / np.sum(p_resid ** 2))
        self._X, self._y_resid, self._p_resid, self._treated = X, y_resid, p_resid, t_flag
        self._den_tol = 1e-8 * scale
        return self

    # -- point estimates -------------------------------------------------

    def _stats(self, leaves, mask):
        num = np.where(mask, self.leaf_num_[leaves], 0.0)
        den = np.where(mask, self.leaf_den_[leaves], 0.0)
        used = mask.sum(axis=1)
        den_mean = den.sum(axis=1) / np.maximum(used, 1)
        with np.errstate(divide="ignore", invalid="ignore"):
            delta = num.sum(axis=1) / den.sum(axis=1)
        return num, den, used, den_mean, delta

    def _oob_mask(self, rows):
        if self.bag_size > 1:
            bag_ok = ~self.in_half_[:, rows].T
            mask = bag_ok[:, self.bag_of_tree_]
        else:
            mask = ~self.forest_.in_sample[:, rows].T
        empty = np.flatnonzero(mask.sum(axis=1) == 0)
        if empty.size:
            raise NoOobTrees(int(rows[empty[0]]))
        return mask

    def _estimate(self, leaves, mask, with_variance):
        num, den, used, den_mean, delta = self._stats(leaves, mask)
        bad = np.flatnonzero(~(den_mean > self._den_tol))
        if bad.size:
            raise ZeroLocalPriceVariation(f"query row {int(bad[0])}: weighted price "
                                          "residual variance is zero")
        if not with_variance:
            return delta, None
        return delta, self._little_bags(num, den, mask, delta, den_mean)

    def _little_bags(self, num, den, mask, delta, den_mean):
        g = int(self.bag_size)
        if g < 2:
            raise BagConfigInvalid("variance needs bag_size >= 2")
        m = num.shape[0]
        psi = (num - delta[:, None] * den) / den_mean[:, None]
        psi = np.where(mask, psi, 0.0).reshape(m, self.n_bags_, g)
        bag_used = mask.reshape(m, self.n_bags_, g)[:, :, 0]
        n_good = bag_used.sum(axis=1)
        if np.any(n_good < 2):
            raise BagConfigInvalid("fewer than two usable bags for a query point")
        bag_mean = psi.mean(axis=2)
        var_between = (bag_mean ** 2).sum(axis=1) / n_good
        var_total = (psi ** 2).sum(axis=(1, 2)) / (n_good * g)
        group_noise = (var_total - var_between) / (g - 1)
        var = _bayes_debias(var_between, group_noise, n_good)
        return np.sqrt(np.maximum(var, 0.0))

    def predict(self, X):
        """Point estimates of the CAPE at the rows of ``X`` (all trees)."""
        check_is_fitted(self, "forest_")
        leaves = self.forest_.apply(check_X(X))
        return self._estimate(leaves, np.ones_like(leaves, dtype=bool), False)[0]

    def predict_oob(self, with_std=False):
        """Out-of-bag CAPE for every training row.

        With little bags a row only uses bags whose half-sample excludes it.
        """
        check_is_fitted(self, "forest_")
        rows = np.arange(self.forest_.n_train)
        leaves = self.forest_.apply(self._X)
        delta, se = self._estimate(leaves, self._oob_mask(rows), with_std)
        return (delta, se) if with_std else delta

    def predict_with_std(self, X):
        check_is_fitted(self, "forest_")
        leaves = self.forest_.apply(check_X(X))
        return self._estimate(leaves, np.ones_like(leaves, dtype=bool), True)

    def kernel_weights(self, x, oob_row=None):
        check_is_fitted(self, "forest_")
        x = check_X(np.atleast_2d(x))
        leaves = self.forest_.apply(x)[0]
        mask = None if oob_row is None else self._oob_mask(np.array([oob_row]))[0]
        return self.forest_.weights(leaves, mask)

    def estimate_cape(self, X=None, unit_ids=None, oob=None):
        """CAPE with little-bags standard errors and 95% normal intervals.

        ``X=None`` scores the training rows out of bag.
        """
        if X is None:
            delta, se = self.predict_oob(with_std=True)
        else:
            delta, se = self.predict_with_std(X)
        if unit_ids is None:
            unit_ids = range(len(delta))
        return [cape_record(u, dl, s) for u, dl, s in zip(unit_ids, delta, se)]

    def estimate_cate(self, x, price, significance_filter=False, alpha=0.05):
        """CATE at price ``price``: ``price * delta_hat(x)``.

        Returns ``(cate, flagged)``; with the filter on, an insignificant CAPE
        yields ``(0.0, True)``.
        """
        delta, se = self.predict_with_std(np.atleast_2d(x))
        return cate_from_cape(price, delta[0], se[0], significance_filter, alpha)

    def tree(self, b):
        check_is_fitted(self, "forest_")
        return self.forest_.tree(b)

    def r_loss(self):
        """Out-of-bag R-learner loss used for tuning."""
        delta = self.predict_oob()
        return float(np.mean((self._y_resid - delta * self._p_resid) ** 2))

    def save(self, path):
        check_is_fitted(self, "forest_")
        _ensemble.save_npz(path, "causal", self.get_params(), self.forest_,
                           X=self._X, y_resid=self._y_resid, p_resid=self._p_resid,
                           treated=self._treated, bag_of_tree=self.bag_of_tree_,
                           in_half=self.in_half_)

    @classmethod
    def load(cls, path):
        params, grown, data = _ensemble.load_npz(path, "causal")
        est = cls(**params)
        est.forest_ = grown
        est._X, est._y_resid, est._p_resid = data["X"], data["y_resid"], data["p_resid"]
        est._treated = data["treated"]
        est.bag_of_tree_ = data["bag_of_tree"]
        est.in_half_ = data["in_half"]
        est.n_bags_ = est.in_half_.shape[0]
        est.n_features_in_ = est._X.shape[1]
        est.mtry_ = _ensemble.resolve_mtry(est.mtry, est.n_features_in_)
        est.subsamples_ = [np.flatnonzero(r) for r in grown.in_sample]
        est.leaf_num_ = grown.leaf_means(est._y_resid * est._p_resid)
        est.leaf_den_ = grown.leaf_means(est._p_resid ** 2)
        est.ape_ = float(np.sum(est._y_resid * est._p_resid) / np.sum(est._p_resid ** 2))
        est._den_tol = 1e-8 * np.mean(est._p_resid ** 2)
        return est


def cape_record(unit_id, delta, se, z=Z95):
    lo, hi = delta - z * se, delta + z * se
    return CapeEstimate(unit_id, float(delta), float(se), float(lo), float(hi),
                        bool(lo > 0 or hi < 0))


def cate_from_cape(price, delta, se, significance_filter=False, alpha=0.05):
    if price < 0:
        raise InputError("price must be non-negative")
    if significance_filter:
        z = stats.norm.ppf(1 - alpha / 2)
        if abs(delta) <= z * se:
            return 0.0, True
    return float(price * delta), False


def rr_slope(y_resid, p_resid):
    den = float(np.sum(p_resid ** 2))
    if den <= 0.0:
        raise NoResidualVariation("sum of squared price residuals is zero")
    return float(np.sum(y_resid * p_resid)) / den


def estimate_ape(y_resid, p_resid, clusters=None, n_boot=200, seed=0,
                 policy_year=None, outcome=None):
    """Unweighted residual-on-residual slope with a cluster bootstrap SE.

    ``clusters`` groups rows for resampling (e.g. calendar years). With fewer
    than two distinct clusters every row is its own cluster.
    """
    y_resid = np.asarray(y_resid, dtype=float)
    p_resid = np.asarray(p_resid, dtype=float)
    ape = rr_slope(y_resid, p_resid)
    se = cluster_bootstrap_se(lambda idx: rr_slope(y_resid[idx], p_resid[idx]),
                              len(y_resid), clusters, n_boot, seed)
    return ApeEstimate(ape, se, policy_year, outcome)


def resolve_clusters(years, unit_ids, min_clusters=5):
    """Year clusters when there are at least ``min_clusters`` years, else unit clusters."""
    years = np.asarray(years)
    if len(np.unique(years)) >= min_clusters:
        return years
    return np.asarray(unit_ids)


def cluster_bootstrap(stat, n, clusters=None, n_boot=200, seed=0):
    """Bootstrap replicates of ``stat(index_array)`` resampling whole clusters."""
    if clusters is None or len(np.unique(clusters)) < 2:
        groups = [np.array([i]) for i in range(n)]
    else:
        _, codes = np.unique(np.asarray(clusters), return_inverse=True)
        groups = [np.flatnonzero(codes == k) for k in range(codes.max() + 1)]
    rng = np.random.default_rng(seed)
    reps = []
    for _ in range(n_boot):
        pick = rng.integers(len(groups), size=len(groups))
        idx = np.concatenate([groups[k] for k in pick])
        try:
            reps.append(stat(idx))
        except NoResidualVariation:
            continue
    return np.asarray(reps)


def cluster_bootstrap_se(stat, n, clusters=None, n_boot=200, seed=0):
    reps = cluster_bootstrap(stat, n, clusters, n_boot, seed)
    return float(np.std(reps, ddof=1)) if reps.size > 1 else 0.0


def tune_causal_forest(X, y_resid, p_resid, treated=None, base=ForestParams(),
                       grid=None, num_trees=200, bag_size=2, random_state=0,
                       strata=None, n_jobs=1, **kwargs):
    """Grid search minimizing the out-of-bag R-learner loss."""
    best, best_loss, rows = None, math.inf, []
    for combo in param_grid(np.shape(X)[1], grid):
        cand = replace(base, num_trees=num_trees, **combo)
        cf = CausalForest.from_params(cand, bag_size=bag_size, random_state=random_state,
                                      n_jobs=n_jobs, **kwargs)
        loss = cf.fit(X, y_resid, p_resid, treated, strata).r_loss()
        rows.append((combo, loss))
        if loss < best_loss:
            best, best_loss = combo, loss
    return (base if best is None else replace(base, **best)), rows
