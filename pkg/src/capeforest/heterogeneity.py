"""Tests and summaries of CAPE heterogeneity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import stats

from .causal_forest import ApeEstimate, Z95, cluster_bootstrap, rr_slope
from .exceptions import DegenerateGroups, EmptyBand, RankDeficientDesign


def _values(capes):
    """Accept CapeEstimate records or plain numbers."""
    capes = list(capes) if not isinstance(capes, np.ndarray) else capes
    if len(capes) and hasattr(capes[0], "delta_hat"):
        return np.array([c.delta_hat for c in capes], dtype=float)
    return np.asarray(capes, dtype=float)


def _groups(values, labels):
    values = _values(values)
    labels = np.asarray(labels)
    if labels.shape != values.shape:
        raise DegenerateGroups("one group label per estimate is required")
    keys = pd.unique(labels)
    return keys, [values[labels == k] for k in keys]


@dataclass(frozen=True)
class LeveneResult:
    statistic: float
    p_value: float
    n_groups: int
    df: tuple


def levene_heterogeneity(capes, groups):
    """Levene test (mean-centered) for equal CAPE dispersion across groups.

    Parameters
    ----------
    capes : sequence of CapeEstimate or array of delta_hat
    groups : array of labels, same length

    Notes
    -----
    ``W = (N-k)/(k-1) * sum_j n_j (Zbar_j - Zbar)^2 / sum_ij (Z_ij - Zbar_j)^2``
    with ``Z_ij = |x_ij - xbar_j|``; ``W ~ F(k-1, N-k)`` under the null.
    """
    _, parts = _groups(capes, groups)
    k = len(parts)
    if k < 2 or any(len(p) < 2 for p in parts):
        raise DegenerateGroups("need at least two groups with two estimates each")
    z = [np.abs(p - p.mean()) for p in parts]
    n = np.array([len(p) for p in parts])
    N = n.sum()
    zbar_j = np.array([zj.mean() for zj in z])
    zbar = np.concatenate(z).mean()
    num = (N - k) * np.sum(n * (zbar_j - zbar) ** 2)
    den = (k - 1) * sum(np.sum((zj - m) ** 2) for zj, m in zip(z, zbar_j))
    if den == 0.0:
        stat = 0.0 if num == 0.0 else np.inf
    else:
        stat = num / den
    p = 1.0 if stat == 0.0 else float(stats.f.sf(stat, k - 1, N - k))
    return LeveneResult(float(stat), p, k, (int(k - 1), int(N - k)))


@dataclass(frozen=True)
class SubgroupApeReport:
    ape_high: ApeEstimate
    ape_low: ApeEstimate
    abs_diff: float
    ci_low: float
    ci_high: float
    n_high: int
    n_low: int


def subgroup_ape_diff(resid, capes, clusters=None, n_boot=200, seed=0):
    """APE in the high and low halves of the CAPE distribution.

    Rows with ``delta_hat > median`` form the high group; the rest (ties
    included) the low group. The interval is ``abs_diff +/- 1.96 * se`` where
    ``se`` is the cluster-bootstrap standard deviation of the signed
    difference, holding group membership fixed.
    """
    delta = _values(capes)
    y, p = np.asarray(resid.y_resid), np.asarray(resid.p_resid)
    high = delta > np.median(delta)
    low = ~high
    if high.sum() < 2 or low.sum() < 2:
        raise DegenerateGroups("median split leaves a subgroup with fewer than two rows")

    def diff(idx):
        h, lo_ = idx[high[idx]], idx[low[idx]]
        return rr_slope(y[h], p[h]) - rr_slope(y[lo_], p[lo_])

    ape_h, ape_l = rr_slope(y[high], p[high]), rr_slope(y[low], p[low])
    reps = cluster_bootstrap(diff, len(y), clusters, n_boot, seed)
    se = float(np.std(reps, ddof=1)) if reps.size > 1 else 0.0
    k = getattr(resid, "frames", None)
    k = k[0].policy_year_k if k else None
    se_h = _group_se(y, p, high, clusters, n_boot, seed)
    se_l = _group_se(y, p, low, clusters, n_boot, seed)
    abs_diff = abs(ape_h - ape_l)
    return SubgroupApeReport(ApeEstimate(ape_h, se_h, k), ApeEstimate(ape_l, se_l, k),
                             abs_diff, abs_diff - Z95 * se, abs_diff + Z95 * se,
                             int(high.sum()), int(low.sum()))


def _group_se(y, p, mask, clusters, n_boot, seed):
    rows = np.flatnonzero(mask)
    cl = None if clusters is None else np.asarray(clusters)[rows]
    reps = cluster_bootstrap(lambda idx: rr_slope(y[rows[idx]], p[rows[idx]]),
                             len(rows), cl, n_boot, seed)
    return float(np.std(reps, ddof=1)) if reps.size > 1 else 0.0


@dataclass
class BlpModel:
    """Weighted projection of CAPE estimates on price, features and interactions."""

    names: list
    coef: np.ndarray
    cov: np.ndarray
    degree: int
    n_features: int
    residuals: np.ndarray
    weights: np.ndarray

    @property
    def coefficients(self):
        return dict(zip(self.names, self.coef))

    @property
    def std_err(self):
        return np.sqrt(np.diag(self.cov))

    def design(self, price, features):
        F = np.asarray(features, float)
        if F.ndim < 2:
            F = F.reshape(1, self.n_features)
        return _blp_design(price, F, self.degree)

    def fitted(self, price, features):
        return self.design(price, features) @ self.coef

    def band(self, price, features, z=Z95):
        D = self.design(price, features)
        fit = D @ self.coef
        se = np.sqrt(np.einsum("ij,jk,ik->i", D, self.cov, D))
        return fit, fit - z * se, fit + z * se

    def slope(self, price, features):
        """Derivative of the fitted CAPE with respect to price."""
        price = np.atleast_1d(np.asarray(price, float))
        F = np.atleast_2d(np.asarray(features, float))
        F = np.broadcast_to(F, (price.shape[0], self.n_features))
        c = self.coefficients
        out = np.full(price.shape[0], c["price"])
        if self.degree >= 2:
            out = out + 2 * c["price^2"] * price
        for j in range(self.n_features):
            out = out + c[f"price:f{j}"] * F[:, j]
        return out

    def table(self):
        se = self.std_err
        t = self.coef / se
        return pd.DataFrame({"term": self.names, "estimate": self.coef, "std_err": se,
                             "t": t, "p_value": 2 * stats.norm.sf(np.abs(t))})


def _blp_design(price, features, degree):
    price = np.asarray(price, float).ravel()
    F = np.asarray(features, float)
    F = np.broadcast_to(F, (price.shape[0], F.shape[1]))
    cols = [np.ones_like(price)] + [price ** k for k in range(1, degree + 1)]
    cols += [F[:, j] for j in range(F.shape[1])]
    cols += [price * F[:, j] for j in range(F.shape[1])]
    return np.column_stack(cols)


def best_linear_projection(capes, prices, features=None, std_err=None, degree=2):
    """Weighted least squares of CAPE on ``[1, p, p^2, F, p*F]``.

    Weights are inverse estimated variances when ``std_err`` is given (or
    taken from CapeEstimate records), otherwise uniform. Covariance is
    heteroskedasticity robust (HC1).
    """
    if degree not in (1, 2):
        raise ValueError("degree must be 1 or 2")
    if std_err is None and len(capes) and hasattr(capes[0], "std_err"):
        std_err = np.array([c.std_err for c in capes])
    delta = _values(capes)
    n = delta.shape[0]
    F = np.zeros((n, 0)) if features is None else np.asarray(features, float).reshape(n, -1)
    D = _blp_design(prices, F, degree)
    names = ["intercept", "price"] + (["price^2"] if degree >= 2 else [])
    names += [f"f{j}" for j in range(F.shape[1])] + [f"price:f{j}" for j in range(F.shape[1])]
    if n <= D.shape[1]:
        raise RankDeficientDesign(f"n={n} is not larger than {D.shape[1]} regressors")
    if std_err is None:
        w = np.ones(n)
    else:
        se = np.asarray(std_err, float)
        floor = max(np.median(se[se > 0]) * 1e-3, 1e-12) if np.any(se > 0) else 1.0
        w = 1.0 / np.maximum(se, floor) ** 2
        w = w / w.mean()
    sw = np.sqrt(w)
    A = D * sw[:, None]
    if np.linalg.matrix_rank(A) < D.shape[1]:
        raise RankDeficientDesign("design matrix is not of full column rank")
    coef, *_ = np.linalg.lstsq(A, delta * sw, rcond=None)
    resid = delta - D @ coef
    bread = np.linalg.inv(A.T @ A)
    meat = (A * (sw * resid)[:, None]).T @ (A * (sw * resid)[:, None])
    cov = bread @ meat @ bread * n / (n - D.shape[1])
    return BlpModel(names, coef, cov, degree, F.shape[1], resid, w)


def blp_curve(model, price_grid, features_at=None):
    """Plot data: fitted CAPE with 95% band along ``price_grid``."""
    grid = np.asarray(price_grid, float)
    F = np.zeros(model.n_features) if features_at is None else np.asarray(features_at, float)
    fit, lo, hi = model.band(grid, F)
    return pd.DataFrame({"price": grid, "fitted": fit, "band_low": lo, "band_high": hi})


BANDS = {"q1": (0.0, 0.25), "q2": (0.25, 0.5), "q3": (0.5, 0.75), "q4": (0.75, 1.0),
         "all": (0.0, 1.0)}


def price_band(prices, band):
    """Mask of rows whose price falls in a quantile band (closed at both ends)."""
    prices = np.asarray(prices, float)
    lo_q, hi_q = BANDS[band] if isinstance(band, str) else band
    lo, hi = np.quantile(prices, [lo_q, hi_q]) if prices.size else (0.0, 0.0)
    return (prices >= lo) & (prices <= hi)


def point_elasticity(capes, prices, outcomes, band="all"):
    """``mean(delta_hat) * mean(price) / mean(outcome)`` within a price band."""
    delta = _values(capes)
    prices = np.asarray(prices, float)
    outcomes = np.asarray(outcomes, float)
    if delta.size == 0:
        raise EmptyBand("no estimates supplied")
    mask = price_band(prices, band) if not isinstance(band, np.ndarray) else band
    if not np.any(mask):
        raise EmptyBand(f"price band {band!r} selects no rows")
    return float(delta[mask].mean() * prices[mask].mean() / outcomes[mask].mean())


def elasticity_table(capes, prices, outcomes, bands=("q1", "q2", "q3", "q4", "all")):
    delta = _values(capes)
    rows = []
    for b in bands:
        m = price_band(prices, b)
        rows.append({"band": b, "n": int(m.sum()), "mean_price": float(np.mean(prices[m])),
                     "mean_outcome": float(np.mean(outcomes[m])),
                     "mean_cape": float(delta[m].mean()),
                     "elasticity": point_elasticity(delta, prices, outcomes, m)})
    return pd.DataFrame(rows)


def pairwise_cape_comparison(capes, groups, alpha=0.05):
    """Tukey-Kramer comparisons of group mean CAPE.

    Returns one row per pair with the mean difference, its standard error,
    the studentized range statistic, the adjusted p-value and the
    simultaneous ``1 - alpha`` interval.
    """
    keys, parts = _groups(capes, groups)
    k = len(parts)
    n = np.array([len(p) for p in parts])
    N = n.sum()
    if k < 2 or np.any(n < 1) or N - k < 1:
        raise DegenerateGroups("need two or more groups and N > number of groups")
    means = np.array([p.mean() for p in parts])
    mse = sum(np.sum((p - m) ** 2) for p, m in zip(parts, means)) / (N - k)
    dist = stats.studentized_range
    qcrit = dist.ppf(1 - alpha, k, N - k)
    rows = []
    for a in range(k):
        for b in range(a + 1, k):
            diff = means[a] - means[b]
            se = np.sqrt(mse / 2.0 * (1.0 / n[a] + 1.0 / n[b]))
            if se == 0.0:
                q = 0.0 if diff == 0.0 else np.inf
            else:
                q = abs(diff) / se
            p = 1.0 if q == 0.0 else float(dist.sf(q, k, N - k))
            rows.append({"group_a": keys[a], "group_b": keys[b], "mean_diff": diff,
                         "std_err": se * np.sqrt(2.0), "q": q, "p_value": min(p, 1.0),
                         "ci_low": diff - qcrit * se, "ci_high": diff + qcrit * se})
    return pd.DataFrame(rows)


def moving_window_slope(x, y, grid, bandwidth):
    """OLS slope of ``y`` on ``x`` within ``|x - g| <= bandwidth`` for each grid point.

    Grid points with fewer than three rows in the window, or no spread in
    ``x``, get NaN.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    out = np.full(len(grid), np.nan)
    for i, g in enumerate(np.asarray(grid, float)):
        m = np.abs(x - g) <= bandwidth
        if m.sum() < 3:
            continue
        xc = x[m] - x[m].mean()
        sxx = np.sum(xc ** 2)
        if sxx > 0:
            out[i] = np.sum(xc * (y[m] - y[m].mean())) / sxx
    return out
