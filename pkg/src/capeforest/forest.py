"""Honest subsampled regression forest for the nuisance functions E[Y|X], E[P|X]."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import asdict, dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import _ensemble, _tree
from .exceptions import InputError, NoOobTrees, TooFewRows

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ForestParams:
    """Tuning parameters shared by nuisance and causal forests.

    ``honesty_fraction=None`` disables honesty. ``mtry`` accepts an int,
    ``"sqrt"``, ``"third"`` or None (``min(d, ceil(sqrt(d)) + 20)``).
    """

    num_trees: int = 1000
    min_leaf_size: int = 5
    mtry: int | str | None = None
    subsample_fraction: float = 0.5
    imbalance_penalty: float = 0.0
    honesty_fraction: float | None = 0.5

    def __post_init__(self):
        if self.num_trees < 1:
            raise InputError("num_trees must be positive")
        if self.min_leaf_size < 1:
            raise InputError("min_leaf_size must be positive")
        if not 0.0 < self.subsample_fraction <= 1.0:
            raise InputError("subsample_fraction must lie in (0, 1]")
        if self.imbalance_penalty < 0:
            raise InputError("imbalance_penalty must be non-negative")
        if self.honesty_fraction is not None and not 0.0 < self.honesty_fraction < 1.0:
            raise InputError("honesty_fraction must lie in (0, 1) or be None")

    def as_dict(self):
        return asdict(self)


DEFAULT_GRID = {
    "min_leaf_size": (5, 10, 25),
    "mtry": ("sqrt", "third"),
    "imbalance_penalty": (0.0, 0.5),
}


def check_X(X):
    return check_array(X, dtype=np.float64, ensure_all_finite=True, order="C")


class RegressionForest(RegressorMixin, BaseEstimator):
    """Subsampled regression forest with out-of-bag prediction.

    Each tree is grown on a subsample of ``ceil(subsample_fraction * n)`` rows
    drawn without replacement. With honesty, the subsample is split again:
    one part chooses splits (variance reduction), the other fills the leaves.

    Parameters
    ----------
    num_trees, min_leaf_size, mtry, subsample_fraction, imbalance_penalty,
    honesty_fraction : see :class:`ForestParams`.
    random_state : int
        Root seed; tree ``b`` uses a stream derived from ``(random_state, b)``.
    n_jobs : int
        Worker threads used while growing. Results do not depend on it.

    Attributes
    ----------
    forest_ : GrownForest
    leaf_value_ : ndarray
        Mean target of the estimation rows in every node.
    degenerate_target_ : bool
        True when the training target was constant.
    """

    def __init__(self, num_trees=1000, min_leaf_size=5, mtry=None,
                 subsample_fraction=0.5, imbalance_penalty=0.0,
                 honesty_fraction=0.5, random_state=0, n_jobs=1):
        self.num_trees = num_trees
        self.min_leaf_size = min_leaf_size
        self.mtry = mtry
        self.subsample_fraction = subsample_fraction
        self.imbalance_penalty = imbalance_penalty
        self.honesty_fraction = honesty_fraction
        self.random_state = random_state
        self.n_jobs = n_jobs

    @classmethod
    def from_params(cls, params: ForestParams, random_state=0, n_jobs=1):
        return cls(**params.as_dict(), random_state=random_state, n_jobs=n_jobs)

    @property
    def params(self):
        return ForestParams(self.num_trees, self.min_leaf_size, self.mtry,
                            self.subsample_fraction, self.imbalance_penalty,
                            self.honesty_fraction)

    def fit(self, X, y, strata=None):
        """Grow the forest.

        ``strata`` (optional, one label per row) restricts each tree's
        subsample to a single stratum; trees are allocated to strata in
        proportion to their size.
        """
        params = self.params
        X = check_X(X)
        y = np.asarray(y, dtype=np.float64)
        n, d = X.shape
        if y.shape != (n,):
            raise InputError("y must be a vector with one entry per row of X")
        if not np.all(np.isfinite(y)):
            raise InputError("target contains non-finite values")
        if n < 2 * params.min_leaf_size:
            raise TooFewRows(f"n={n} < 2 * min_leaf_size={params.min_leaf_size}")
        self.n_features_in_ = d
        self.mtry_ = _ensemble.resolve_mtry(params.mtry, d)
        self.degenerate_target_ = bool(np.ptp(y) == 0.0)
        if self.degenerate_target_:
            log.warning("constant target: every tree is a single leaf")
        plans = _ensemble.plan_trees(n, params.num_trees, params.subsample_fraction,
                                     params.honesty_fraction, int(self.random_state),
                                     strata)
        self.forest_ = _ensemble.grow(
            X, y, np.zeros(n), np.zeros(n, dtype=np.int64), plans,
            kind=_tree.REGRESSION, mtry=self.mtry_, min_leaf=params.min_leaf_size,
            penalty=params.imbalance_penalty,
            honest=params.honesty_fraction is not None, n_jobs=self.n_jobs)
        self.subsamples_ = [p.sample for p in plans]
        self.leaf_value_ = self.forest_.leaf_means(y)
        self._X = X
        self._y = y
        return self

    def predict(self, X):
        """Average of the per-tree leaf means reached by each row of ``X``."""
        check_is_fitted(self, "forest_")
        X = check_X(X)
        leaves = self.forest_.apply(X)
        return self.leaf_value_[leaves].mean(axis=1)

    def predict_oob(self, i=None):
        """Out-of-bag prediction for training row ``i`` (all rows when None)."""
        check_is_fitted(self, "forest_")
        rows = np.arange(self.forest_.n_train) if i is None else np.atleast_1d(i)
        leaves = self.forest_.apply(self._X[rows])
        mask = ~self.forest_.in_sample[:, rows].T
        counts = mask.sum(axis=1)
        if np.any(counts == 0):
            raise NoOobTrees(int(rows[np.argmax(counts == 0)]))
        vals = np.where(mask, self.leaf_value_[leaves], 0.0)
        out = vals.sum(axis=1) / counts
        return out if i is None or np.ndim(i) else float(out[0])

    def oob_counts(self):
        check_is_fitted(self, "forest_")
        return (~self.forest_.in_sample).sum(axis=0)

    def kernel_weights(self, x):
        """Weights ``w_i(x)`` with ``predict(x) == w @ y_train``."""
        check_is_fitted(self, "forest_")
        x = check_X(np.atleast_2d(x))
        leaves = self.forest_.apply(x)[0]
        return self.forest_.weights(leaves)

    def tree(self, b):
        """Tree ``b`` as nested :class:`TreeNode` objects."""
        check_is_fitted(self, "forest_")
        return self.forest_.tree(b)

    def oob_mse(self):
        return float(np.mean((self._y - self.predict_oob()) ** 2))

    def save(self, path):
        check_is_fitted(self, "forest_")
        _ensemble.save_npz(path, "regression", self.get_params(), self.forest_,
                           X=self._X, y=self._y,
                           subsample_sizes=np.array([len(s) for s in self.subsamples_]))

    @classmethod
    def load(cls, path):
        params, grown, data = _ensemble.load_npz(path, "regression")
        est = cls(**params)
        est.forest_ = grown
        est._X = data["X"]
        est._y = data["y"]
        est.n_features_in_ = est._X.shape[1]
        est.mtry_ = _ensemble.resolve_mtry(est.mtry, est.n_features_in_)
        est.degenerate_target_ = bool(np.ptp(est._y) == 0.0)
        est.subsamples_ = [np.flatnonzero(r) for r in grown.in_sample]
        est.leaf_value_ = grown.leaf_means(est._y)
        return est


def param_grid(d, grid=None):
    grid = dict(DEFAULT_GRID if grid is None else grid)
    keys = sorted(grid)
    for combo in itertools.product(*(grid[k] for k in keys)):
        yield dict(zip(keys, combo))


def tune_regression_forest(X, y, base=ForestParams(), grid=None, num_trees=200,
                           random_state=0, strata=None, n_jobs=1):
    """Grid search over ``grid`` minimizing out-of-bag mean squared error.

    Returns the winning :class:`ForestParams` (with ``base.num_trees``) and a
    list of ``(params_dict, oob_mse)`` rows.
    """
    X = check_X(X)
    rows = []
    best, best_mse = None, math.inf
    for combo in param_grid(X.shape[1], grid):
        if 2 * combo.get("min_leaf_size", base.min_leaf_size) > X.shape[0]:
            continue
        cand = replace(base, num_trees=num_trees, **combo)
        rf = RegressionForest.from_params(cand, random_state=random_state, n_jobs=n_jobs)
        mse = rf.fit(X, y, strata=strata).oob_mse()
        rows.append((combo, mse))
        if mse < best_mse:
            best, best_mse = combo, mse
    if best is None:
        return base, rows
    return replace(base, **best), rows
