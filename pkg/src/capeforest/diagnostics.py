"""Overlap diagnostics on the generalized propensity score (GPS)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .exceptions import EmptyGroup

COVERAGE_Q = (0.025, 0.975)


@dataclass(frozen=True)
class OverlapReport:
    normalized_diff: float
    coverage_treated: float
    coverage_control: float
    caliper_share_treated: float
    caliper_share_control: float
    quantile_summary: pd.DataFrame
    caliper: float = 0.10
    caliper_mode: str = "relative"

    def passes(self, floor):
        """True when both caliper shares reach ``floor``."""
        return min(self.caliper_share_treated, self.caliper_share_control) >= floor

    def to_text(self):
        lines = [
            f"normalized_diff      {self.normalized_diff:.4f}",
            f"coverage_treated     {self.coverage_treated:.4f}",
            f"coverage_control     {self.coverage_control:.4f}",
            f"caliper              {self.caliper:g} ({self.caliper_mode})",
            f"caliper_treated      {self.caliper_share_treated:.4f}",
            f"caliper_control      {self.caliper_share_control:.4f}",
            "",
            self.quantile_summary.to_string(float_format=lambda v: f"{v:.6g}"),
        ]
        return "\n".join(lines) + "\n"


def normalized_difference(s_treated, s_control):
    """``(mean_T - mean_C) / sqrt((var_T + var_C) / 2)`` with sample variances."""
    vt = np.var(s_treated, ddof=1) if len(s_treated) > 1 else 0.0
    vc = np.var(s_control, ddof=1) if len(s_control) > 1 else 0.0
    scale = np.sqrt((vt + vc) / 2.0)
    diff = np.mean(s_treated) - np.mean(s_control)
    if scale == 0.0:
        return 0.0 if diff == 0.0 else float(np.sign(diff) * np.inf)
    return float(diff / scale)


def coverage(values, reference, q=COVERAGE_Q):
    """Share of ``values`` inside the ``q`` quantile range of ``reference``."""
    lo, hi = np.quantile(reference, q)
    return float(np.mean((values >= lo) & (values <= hi)))


def caliper_share(values, opposite, caliper=0.10, mode="relative"):
    """Share of ``values`` with an opposite-group unit within the caliper.

    ``relative``: ``|s_i - s_j| / s_j < caliper`` for the nearest ``s_j``;
    ``absolute``: ``|s_i - s_j| < caliper``.
    """
    opp = np.sort(np.asarray(opposite, float))
    values = np.asarray(values, float)
    pos = np.searchsorted(opp, values)
    cand = np.stack([opp[np.clip(pos - 1, 0, len(opp) - 1)], opp[np.clip(pos, 0, len(opp) - 1)]])
    gap = np.abs(cand - values)
    if mode == "absolute":
        return float(np.mean(gap.min(axis=0) < caliper))
    if mode != "relative":
        raise ValueError(f"unknown caliper mode {mode!r}")
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(cand != 0, gap / np.abs(cand), np.where(gap == 0, 0.0, np.inf))
    return float(np.mean(rel.min(axis=0) < caliper))


def overlap_report(s_hat, treated, caliper=0.10, caliper_mode="relative", years=None):
    """GPS overlap between treated and control rows.

    With ``years`` given, coverage is computed within each calendar year and
    averaged with row weights; otherwise the pooled distributions are used.
    """
    s_hat = np.asarray(s_hat, float)
    treated = np.asarray(treated, bool)
    st, sc = s_hat[treated], s_hat[~treated]
    if st.size == 0 or sc.size == 0:
        raise EmptyGroup("overlap needs treated and control rows")
    if years is None:
        cov_t, cov_c = coverage(st, sc), coverage(sc, st)
    else:
        years = np.asarray(years)
        hits_t = hits_c = 0.0
        for y in np.unique(years):
            m = years == y
            t_y, c_y = s_hat[m & treated], s_hat[m & ~treated]
            if t_y.size == 0 or c_y.size == 0:
                raise EmptyGroup(f"year {y} lacks treated or control rows")
            hits_t += coverage(t_y, c_y) * t_y.size
            hits_c += coverage(c_y, t_y) * c_y.size
        cov_t, cov_c = hits_t / st.size, hits_c / sc.size
    qs = [0.0, 0.25, 0.5, 0.75, 1.0]
    summary = pd.DataFrame({"treated": np.quantile(st, qs), "control": np.quantile(sc, qs)},
                           index=["min", "q25", "median", "q75", "max"])
    return OverlapReport(normalized_difference(st, sc), cov_t, cov_c,
                         caliper_share(st, sc, caliper, caliper_mode),
                         caliper_share(sc, st, caliper, caliper_mode),
                         summary, caliper, caliper_mode)
