"""Two-way fixed-effects event study with a pretrend test.

Event time counts policy years from 1 (the adoption year) upward and leads
from -1 (the year before adoption) downward; -2 is the omitted baseline and
times beyond +/-3 are binned into the endpoints. The regressor for event time
``e`` is the unit's post-adoption price times ``1{event time = e}``, so lag
coefficients are price effects on the same scale as the CAPE.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import stats

from .exceptions import NoTreatedUnits, SingularDesign

EVENT_TIMES = (-3, -1, 1, 2, 3)
LEADS = (-3, -1)


@dataclass
class EventStudyResult:
    coefficients: dict
    pretrend_joint_p: float
    pretrend_wald: float
    n_obs: int
    n_units: int
    vcov: np.ndarray

    def table(self):
        return pd.DataFrame([{"event_time": e, "estimate": b, "std_err": s}
                             for e, (b, s) in sorted(self.coefficients.items())])


def event_time(year, adoption_year):
    """Policy-year style event time; NaN for never-treated rows."""
    year = np.asarray(year, float)
    adopt = np.asarray(adoption_year, float)
    rel = year - adopt
    return np.where(rel >= 0, rel + 1, rel)


def _demean(values, codes, n_groups):
    sums = np.zeros((n_groups,) + values.shape[1:])
    np.add.at(sums, codes, values)
    counts = np.bincount(codes, minlength=n_groups).astype(float)
    return values - (sums / counts.reshape((-1,) + (1,) * (values.ndim - 1)))[codes]


def event_study_design(df, outcome="uw"):
    """Outcome, event-time regressors, year codes and unit codes for a panel frame."""
    adopt = df["adoption_year"].to_numpy(float)
    if np.all(np.isnan(adopt)):
        raise NoTreatedUnits(0)
    unit_codes, units = pd.factorize(df["unit_id"], sort=True)
    # each adopter's price in its post years
    post = df.loc[df["price"] > 0].groupby("unit_id")["price"].first()
    unit_price = df["unit_id"].map(post).fillna(0.0).to_numpy(float)
    et = event_time(df["year"].to_numpy(float), adopt)
    et = np.clip(et, -3, 3)
    D = np.column_stack([np.where(et == e, unit_price, 0.0) for e in EVENT_TIMES])
    D[np.isnan(adopt)] = 0.0
    year_codes, years = pd.factorize(df["year"], sort=True)
    return (df[outcome].to_numpy(float), D, year_codes, len(years), unit_codes, len(units))


def fit_event_study(panel, outcome="uw"):
    """Within-unit regression with year dummies and unit-clustered (CR1) errors."""
    df = panel.df if hasattr(panel, "df") else panel
    if df["year"].nunique() < 2:
        raise SingularDesign("need at least two calendar years")
    y, D, ycode, n_years, ucode, n_units = event_study_design(df, outcome)
    Y = np.eye(n_years)[ycode][:, 1:]
    X = np.column_stack([D, Y])
    Xd = _demean(X, ucode, n_units)
    yd = _demean(y, ucode, n_units)
    keep = np.any(Xd != 0, axis=0)
    if not keep[:D.shape[1]].all():
        missing = [e for e, k in zip(EVENT_TIMES, keep) if not k]
        raise SingularDesign(f"no variation for event times {missing}")
    Xd = Xd[:, keep]
    n, k = Xd.shape
    if np.linalg.matrix_rank(Xd) < k:
        raise SingularDesign("event-study design is rank deficient")
    XtX_inv = np.linalg.inv(Xd.T @ Xd)
    beta = XtX_inv @ (Xd.T @ yd)
    u = yd - Xd @ beta
    scores = np.zeros((n_units, k))
    np.add.at(scores, ucode, Xd * u[:, None])
    G = len(np.unique(ucode))
    meat = scores.T @ scores
    V = XtX_inv @ meat @ XtX_inv * (G / (G - 1)) * ((n - 1) / (n - k))
    ne = len(EVENT_TIMES)
    coefs = {e: (float(beta[j]), float(np.sqrt(V[j, j]))) for j, e in enumerate(EVENT_TIMES)}
    li = [EVENT_TIMES.index(e) for e in LEADS]
    bl = beta[li]
    wald = float(bl @ np.linalg.solve(V[np.ix_(li, li)], bl))
    p = float(stats.f.sf(wald / len(li), len(li), G - 1))
    return EventStudyResult(coefs, p, wald, n, G, V[:ne, :ne])


def comparison_table(fe_result, apes, outcome="uw"):
    """Join FE lag coefficients with forest APEs by policy year."""
    rows = []
    for k in (1, 2, 3):
        b, s = fe_result.coefficients[k]
        a = apes.get(k)
        rows.append({"outcome": outcome, "policy_year": k, "fe_estimate": b, "fe_std_err": s,
                     "cf_ape": np.nan if a is None else a.ape,
                     "cf_std_err": np.nan if a is None else a.std_err})
    return pd.DataFrame(rows)
