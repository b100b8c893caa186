"""Panel ingestion, validation and per-policy-year estimation frames."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from .exceptions import (EmptyControlGroup, InvariantViolation, MissingColumn,
                         NoTreatedUnits, PanelValidationError, ParseFailure,
                         UnknownUnitId)

log = logging.getLogger(__name__)

OUTCOMES = ("uw", "rw", "tw")
CORE = ("unit_id", "year", "price", "uw", "rw", "tw", "adoption_year", "pc_uw",
        "pc_rw", "liters_per_kg")
REQUIRED = ("unit_id", "year", "price", "uw", "rw")
TW_RTOL = 1e-6

DEFAULT_SCHEMA = {k: k for k in CORE}


@dataclass(frozen=True)
class PanelRecord:
    unit_id: str
    year: int
    price: float
    uw: float
    rw: float
    tw: float
    covariates: tuple
    adoption_year: int | None = None
    pc_uw: float | None = None
    pc_rw: float | None = None


class Panel:
    """Validated unit-year panel held as a canonical DataFrame.

    Columns are ``unit_id, year, price, uw, rw, tw, adoption_year, pc_uw,
    pc_rw, liters_per_kg`` followed by the covariates, in order.
    """

    def __init__(self, frame: pd.DataFrame, covariates, excluded_units=()):
        self.df = frame.reset_index(drop=True)
        self.covariates = list(covariates)
        self.excluded_units = list(excluded_units)

    def __len__(self):
        return len(self.df)

    @property
    def X(self):
        return self.df[self.covariates].to_numpy(dtype=np.float64)

    @property
    def d(self):
        return len(self.covariates)

    def record(self, i):
        r = self.df.iloc[i]
        opt = lambda v: None if pd.isna(v) else float(v)  # noqa: E731
        return PanelRecord(
            unit_id=str(r["unit_id"]), year=int(r["year"]), price=float(r["price"]),
            uw=float(r["uw"]), rw=float(r["rw"]), tw=float(r["tw"]),
            covariates=tuple(float(r[c]) for c in self.covariates),
            adoption_year=None if pd.isna(r["adoption_year"]) else int(r["adoption_year"]),
            pc_uw=opt(r["pc_uw"]), pc_rw=opt(r["pc_rw"]))

    def __iter__(self):
        for i in range(len(self)):
            yield self.record(i)

    @property
    def units(self):
        return self.df["unit_id"].unique()

    def adopters(self):
        """Mapping unit id -> adoption year for ever-treated units."""
        a = self.df.dropna(subset=["adoption_year"]).groupby("unit_id")["adoption_year"].first()
        return {u: int(y) for u, y in a.items()}

    def never_treated(self):
        return self.df.loc[self.df["adoption_year"].isna(), "unit_id"].unique()

    def has_costs(self):
        return bool(self.df["pc_uw"].notna().any() and self.df["pc_rw"].notna().any())

    def subset_units(self, keep):
        keep = set(keep)
        mask = self.df["unit_id"].isin(keep)
        return Panel(self.df.loc[mask], self.covariates, self.excluded_units)

    def to_csv(self, path):
        """Write the canonical columns; floats use shortest round-trip repr."""
        self.df.to_csv(path, index=False)


def load_schema(path):
    """Read a column-name map from YAML (keys are canonical names)."""
    with open(path) as fh:
        return yaml.safe_load(fh) or {}


def _resolve_covariates(schema, header):
    spec = schema.get("covariates")
    used = {schema.get(k, k) for k in CORE}
    if spec is None or spec == "*":
        return [c for c in header if c not in used]
    if isinstance(spec, dict) and "prefix" in spec:
        return [c for c in header if c.startswith(spec["prefix"]) and c not in used]
    return list(spec)


def load_panel(path, schema=None, lag_check=False, p_max=None):
    """Load and validate a panel CSV.

    Parameters
    ----------
    schema : dict, optional
        Maps canonical names (``unit_id``, ``year``, ``price``, ``uw``, ``rw``,
        ``tw``, ``adoption_year``, ``pc_uw``, ``pc_rw``, ``liters_per_kg``) to
        CSV headers. ``covariates`` is a list of headers, ``{"prefix": ...}``
        or ``"*"`` (every non-core column). ``lag_columns`` lists covariates
        holding lagged outcomes.
    lag_check : bool
        Drop treated units whose lag columns are missing instead of failing.

    Raises
    ------
    MissingColumn
        A required or declared column is absent.
    PanelValidationError
        One or more rows fail parsing or invariants; ``problems`` holds
        :class:`ParseFailure` / :class:`InvariantViolation` with CSV line numbers.
    """
    schema = dict(DEFAULT_SCHEMA if schema is None else {**DEFAULT_SCHEMA, **schema})
    raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    header = list(raw.columns)
    for key in REQUIRED:
        if schema[key] not in header:
            raise MissingColumn(schema[key])
    covariates = _resolve_covariates(schema, header)
    for c in covariates:
        if c not in header:
            raise MissingColumn(c)
    lag_columns = list(schema.get("lag_columns") or [])
    for c in lag_columns:
        if c not in covariates:
            raise MissingColumn(c)

    problems = []
    line = np.arange(len(raw)) + 2
    out = pd.DataFrame({"unit_id": raw[schema["unit_id"]].astype(str)})

    def numeric(name, col, optional):
        text = raw[col].str.strip()
        missing = text.isin(["", "NA", "NaN", "nan", "null"])
        vals = pd.to_numeric(text.where(~missing), errors="coerce")
        bad = vals.isna() & ~missing
        # to_numeric is not round-trip exact; reparse the valid cells
        ok = vals.notna()
        vals = vals.astype(float)
        vals[ok] = text[ok].astype(float)
        for i in np.flatnonzero(bad.to_numpy()):
            problems.append(ParseFailure(int(line[i]), col, raw[col].iloc[i]))
        if not optional:
            for i in np.flatnonzero(missing.to_numpy()):
                problems.append(InvariantViolation(int(line[i]), f"missing value in {col}"))
        return vals.astype(float)

    for key in ("year", "price", "uw", "rw"):
        out[key] = numeric(key, schema[key], optional=False)
    for key in ("tw", "adoption_year", "pc_uw", "pc_rw", "liters_per_kg"):
        col = schema.get(key)
        if col and col in header:
            out[key] = numeric(key, col, optional=True)
        else:
            out[key] = np.nan
    cov = {}
    for c in covariates:
        cov[c] = numeric(c, c, optional=True)
    cov = pd.DataFrame(cov, index=out.index)
    if problems:
        raise PanelValidationError(problems)

    excluded = []
    miss = cov.isna()
    if lag_check and lag_columns:
        lag_miss = miss[lag_columns].any(axis=1) & out["adoption_year"].notna()
        excluded = sorted(out.loc[lag_miss, "unit_id"].unique())
        if excluded:
            log.info("excluding %d treated units with missing lags", len(excluded))
    drop = out["unit_id"].isin(excluded).to_numpy()
    for i in np.flatnonzero(miss.any(axis=1).to_numpy() & ~drop):
        cols = [c for c in covariates if miss[c].iloc[i]]
        problems.append(InvariantViolation(int(line[i]), f"missing covariate(s) {cols}"))

    derived = out["uw"] + out["rw"]
    tw_given = out["tw"].notna()
    tw_bad = tw_given & ((out["tw"] - derived).abs() > TW_RTOL * derived.abs().clip(lower=1e-12))
    out["tw"] = out["tw"].where(tw_given, derived)
    checks = [
        (tw_bad, "tw != uw + rw beyond relative tolerance 1e-6"),
        ((out[["uw", "rw"]] < 0).any(axis=1), "negative outcome"),
        (out["price"] < 0, "negative price"),
        ((out[["pc_uw", "pc_rw"]] < 0).any(axis=1), "negative unit cost"),
        (out["adoption_year"].isna() & (out["price"] != 0),
         "price must be 0 for a never-treated unit"),
        (out["adoption_year"].notna() & (out["year"] < out["adoption_year"]) & (out["price"] != 0),
         "price must be 0 before the adoption year"),
        (out["adoption_year"].notna() & (out["year"] >= out["adoption_year"]) & ~(out["price"] > 0),
         "price must be positive from the adoption year on"),
        (out["year"] != out["year"].round(), "year must be an integer"),
    ]
    if p_max is not None:
        checks.append((out["price"] > p_max, f"price above p_max={p_max}"))
    for mask, rule in checks:
        for i in np.flatnonzero(mask.to_numpy() & ~drop):
            problems.append(InvariantViolation(int(line[i]), rule))
    dup = out.duplicated(["unit_id", "year"], keep="first").to_numpy()
    for i in np.flatnonzero(dup & ~drop):
        problems.append(InvariantViolation(int(line[i]), "duplicate (unit_id, year)"))
    nuniq = out.groupby("unit_id")["adoption_year"].transform(lambda s: s.nunique(dropna=False))
    for i in np.flatnonzero((nuniq > 1).to_numpy() & ~drop):
        problems.append(InvariantViolation(int(line[i]), "adoption_year varies within unit"))
    if problems:
        problems.sort(key=lambda p: p.row)
        raise PanelValidationError(problems)

    out["year"] = out["year"].astype(int)
    frame = pd.concat([out, cov], axis=1).loc[~drop]
    return Panel(frame, covariates, excluded)


def validation_report(error):
    """Line-oriented text report for a validation failure."""
    if isinstance(error, PanelValidationError):
        return "\n".join(str(p) for p in error.problems)
    return str(error)


@dataclass
class EstimationFrame:
    """Treated units in their k-th policy year plus never-treated units, one calendar year."""

    panel: Panel
    policy_year_k: int
    calendar_year: int
    treated: np.ndarray
    controls: np.ndarray
    outcome: str

    @property
    def rows(self):
        return np.concatenate([self.treated, self.controls])

    def _col(self, name):
        return self.panel.df[name].to_numpy()[self.rows]

    @property
    def X(self):
        return self.panel.X[self.rows]

    @property
    def y(self):
        return self._col(self.outcome).astype(float)

    @property
    def price(self):
        return self._col("price").astype(float)

    @property
    def treated_flag(self):
        return np.r_[np.ones(len(self.treated), bool), np.zeros(len(self.controls), bool)]

    @property
    def unit_ids(self):
        return self._col("unit_id")

    @property
    def years(self):
        return self._col("year").astype(int)

    def __len__(self):
        return len(self.treated) + len(self.controls)


def _check_k(k):
    if k not in (1, 2, 3):
        raise ValueError(f"policy year k must be 1, 2 or 3, got {k}")


def _outcome(outcome):
    key = str(outcome).lower()
    if key not in OUTCOMES:
        raise ValueError(f"outcome must be one of {OUTCOMES}, got {outcome!r}")
    return key


def build_frame(panel, k, outcome, calendar_year):
    """Frame for policy year ``k`` in one calendar year.

    Treated rows are units with ``adoption_year + k - 1 == calendar_year``;
    controls are never-treated units observed that year, so later adopters
    never serve as controls.
    """
    _check_k(k)
    outcome = _outcome(outcome)
    df = panel.df
    year = df["year"].to_numpy()
    adopt = df["adoption_year"].to_numpy()
    in_year = year == calendar_year
    treated = np.flatnonzero(in_year & (adopt + k - 1 == calendar_year))
    controls = np.flatnonzero(in_year & np.isnan(adopt))
    if treated.size == 0:
        raise NoTreatedUnits(k)
    if controls.size == 0:
        raise EmptyControlGroup(f"no never-treated unit observed in {calendar_year}")
    return EstimationFrame(panel, k, int(calendar_year), treated, controls, outcome)


def build_frames(panel, k, outcome):
    """All single-year frames for policy year ``k``, one per adoption cohort."""
    _check_k(k)
    df = panel.df
    adopt = df["adoption_year"].to_numpy()
    year = df["year"].to_numpy()
    hit = ~np.isnan(adopt) & (adopt + k - 1 == year)
    years = sorted(int(y) for y in np.unique(year[hit]))
    if not years:
        raise NoTreatedUnits(k)
    return [build_frame(panel, k, outcome, y) for y in years]


def exclude_neighbors(panel, neighbor_map):
    """Drop never-treated units adjacent to any treated unit.

    ``neighbor_map`` maps a unit id to the ids it borders; adjacency is
    treated as symmetric.
    """
    known = set(map(str, panel.units))
    treated = set(map(str, panel.adopters()))
    flagged = set()
    for u, nbrs in neighbor_map.items():
        u = str(u)
        if u not in known:
            raise UnknownUnitId(u)
        for v in nbrs:
            v = str(v)
            if v not in known:
                raise UnknownUnitId(v)
            if u in treated and v not in treated:
                flagged.add(v)
            if v in treated and u not in treated:
                flagged.add(u)
    return panel.subset_units(known - flagged)


def load_neighbor_map(path):
    """Two-column CSV ``unit_id,neighbor_id`` into an adjacency dict."""
    edges = pd.read_csv(path, dtype=str)
    out = {}
    for u, v in edges.iloc[:, :2].itertuples(index=False):
        out.setdefault(u, []).append(v)
    return out
