"""Synthetic staggered-adoption panels with known nuisances and price effects.

Effects are in outcome units (kg per capita) per currency unit of price;
prices are in currency per liter inside ``price_range``. The continuous
cross-section generator at the bottom works on a standardized price scale
for estimator-level checks.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd
from scipy import special, stats

from .dataset import Panel
from .exceptions import SpecInvalid

EFFECT_FORMS = ("constant", "linear", "kinked")
REFERENCE_COHORTS = {2012: 48, 2013: 77, 2014: 36, 2015: 33}


@dataclass(frozen=True)
class EffectSpec:
    """Price effect as a function of covariates.

    ``constant``: ``base``; ``linear``: ``base + slope * x1``;
    ``kinked``: ``base + kink_slope * max(0, mu_p(x) - kink_price)`` where
    ``mu_p`` is the unit's expected price.
    """

    form: str = "constant"
    base: float = -1150.0
    slope: float = 0.0
    kink_price: float = 0.08
    kink_slope: float = 0.0

    def __call__(self, x1, mu_p):
        if self.form == "constant":
            return np.full_like(np.asarray(x1, float), self.base)
        if self.form == "linear":
            return self.base + self.slope * np.asarray(x1, float)
        return self.base + self.kink_slope * np.maximum(0.0, np.asarray(mu_p) - self.kink_price)


@dataclass(frozen=True)
class DgpSpec:
    """Staggered panel design.

    Covariate 0 is income-like (right skewed, standardized), covariate 1 is the
    confounder driving both adoption/price and outcome levels ("lagged
    outcome"-like), covariate 2 drives a unit trend, the rest are noise-ish
    shifters of the outcome levels.
    """

    n_units: int = 1000
    first_year: int = 2010
    n_years: int = 6
    d: int = 10
    cohort_sizes: dict = field(default_factory=lambda: dict(REFERENCE_COHORTS))
    delta_uw: EffectSpec = EffectSpec("linear", -1150.0, -150.0)
    delta_rw: EffectSpec = EffectSpec("linear", 680.0, 80.0)
    confounding: float = 1.0
    adoption_conf: float = 1.2
    adoption_trend: float = 0.0
    pre_shock: float = 0.0
    trend_confounding: float = 0.0
    uw_level: float = 215.0
    rw_level: float = 235.0
    uw_conf: float = 60.0
    rw_conf: float = 30.0
    noise_sd: float = 12.0
    price_range: tuple = (0.01, 0.18)
    price_center: float = 0.085
    price_slope: float = 0.035
    price_noise: float = 0.01
    pc_uw_level: float = 0.29
    pc_rw_level: float = 0.16
    cost_noise: float = 0.03
    cost_effect_uw: float = 0.0
    cost_effect_x0_above: float | None = None
    liters_per_kg: float = 6.0
    unbalanced_share: float = 0.0
    seed: int = 0

    def validate(self):
        if self.n_units < 2 or self.n_years < 2 or self.d < 3:
            raise SpecInvalid("need n_units >= 2, n_years >= 2 and d >= 3")
        adopters = sum(self.cohort_sizes.values())
        if adopters >= self.n_units:
            raise SpecInvalid("cohort sizes must leave never-treated units")
        last = self.first_year + self.n_years - 1
        for y, c in self.cohort_sizes.items():
            if c < 0 or not self.first_year < int(y) <= last:
                raise SpecInvalid(f"cohort {y}: year must fall inside the panel after its first year")
        lo, hi = self.price_range
        if not 0 < lo < hi:
            raise SpecInvalid("price_range must satisfy 0 < low < high")
        for e in (self.delta_uw, self.delta_rw):
            if e.form not in EFFECT_FORMS:
                raise SpecInvalid(f"unknown effect form {e.form!r}")
        if not 0 <= self.unbalanced_share < 1:
            raise SpecInvalid("unbalanced_share must lie in [0, 1)")


PRESETS = {
    "default": DgpSpec(),
    # price effects kinked at high prices; low/high price quartiles give point
    # elasticities near -0.26 / -2.2 for unsorted waste
    "quartiles": DgpSpec(
        n_units=2000, cohort_sizes={2012: 192, 2013: 308, 2014: 144, 2015: 132},
        delta_uw=EffectSpec("kinked", -1080.0, 0.0, 0.08, -8000.0),
        delta_rw=EffectSpec("kinked", 680.0, 0.0, 0.08, 5000.0),
        adoption_conf=0.0, uw_level=248.0, uw_conf=80.0, price_slope=0.05,
        price_noise=0.004, noise_sd=10.0),
    "null": DgpSpec(delta_uw=EffectSpec("constant", -1150.0),
                    delta_rw=EffectSpec("constant", 680.0)),
    "parallel": DgpSpec(delta_uw=EffectSpec("constant", -1150.0),
                        delta_rw=EffectSpec("constant", 680.0), confounding=0.5),
    # adopters select on a transitory high-waste year just before adoption
    "confounded": DgpSpec(delta_uw=EffectSpec("constant", -1150.0),
                          delta_rw=EffectSpec("constant", 680.0), confounding=0.0,
                          pre_shock=25.0),
    # adoption tied to a covariate that also drives unit trends
    "trend": DgpSpec(delta_uw=EffectSpec("constant", -1150.0),
                     delta_rw=EffectSpec("constant", 680.0),
                     trend_confounding=1.0, adoption_trend=1.0),
}


def spec_from_dict(cfg):
    """Build a :class:`DgpSpec` from plain config values (``preset`` optional)."""
    cfg = dict(cfg or {})
    base = PRESETS[cfg.pop("preset", "default")]
    for key in ("delta_uw", "delta_rw"):
        if key in cfg and isinstance(cfg[key], dict):
            cfg[key] = replace(getattr(base, key), **cfg[key])
    if "cohort_sizes" in cfg:
        cfg["cohort_sizes"] = {int(k): int(v) for k, v in cfg["cohort_sizes"].items()}
    if "price_range" in cfg:
        cfg["price_range"] = tuple(cfg["price_range"])
    try:
        return replace(base, **cfg)
    except TypeError as err:
        raise SpecInvalid(str(err)) from None


def _covariates(rng, n, d):
    X = rng.normal(size=(n, d))
    g = rng.gamma(2.0, 1.0, size=n)
    X[:, 0] = (g - 2.0) / np.sqrt(2.0)
    return X


def clipped_normal_mean(mu, sd, lo, hi):
    """E[clip(mu + sd * Z, lo, hi)] for standard normal Z."""
    mu = np.asarray(mu, float)
    if sd == 0:
        return np.clip(mu, lo, hi)
    a = (lo - mu) / sd
    b = (hi - mu) / sd
    pa, pb = stats.norm.cdf(a), stats.norm.cdf(b)
    inner = mu * (pb - pa) + sd * (stats.norm.pdf(a) - stats.norm.pdf(b))
    return lo * pa + inner + hi * (1 - pb)


def generate(spec: DgpSpec):
    """Simulate a panel.

    Returns ``(panel, manifest)`` where ``manifest`` is a DataFrame with one
    row per unit-year holding the true effects, untreated outcome means,
    noise draws and expected price; ``manifest.attrs`` holds counts.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n, d = spec.n_units, spec.d
    years = np.arange(spec.first_year, spec.first_year + spec.n_years)
    X = _covariates(rng, n, d)
    conf = X[:, 1]
    lo, hi = spec.price_range

    # adoption: weighted sampling without replacement (Gumbel top-k)
    n_adopt = sum(spec.cohort_sizes.values())
    logit = spec.adoption_conf * spec.confounding * conf + spec.adoption_trend * X[:, 2]
    keys = logit + rng.gumbel(size=n)
    adopters = np.argsort(-keys, kind="stable")[:n_adopt]
    cohorts = np.concatenate([np.full(c, int(y)) for y, c in sorted(spec.cohort_sizes.items())])
    adopt_year = np.full(n, np.nan)
    adopt_year[adopters] = cohorts[rng.permutation(n_adopt)]

    # calibrated adoption probability for the manifest's propensity
    shift = _calibrate_shift(logit, n_adopt)
    p_adopt = special.expit(logit + shift)

    mu_p = np.clip(spec.price_center + spec.price_slope * spec.confounding * conf, lo, hi)
    price_unit = np.clip(mu_p + spec.price_noise * rng.normal(size=n), lo, hi)
    exp_price = clipped_normal_mean(mu_p, spec.price_noise, lo, hi)

    d_uw = spec.delta_uw(X[:, 0], mu_p)
    d_rw = spec.delta_rw(X[:, 0], mu_p)

    base_uw = (spec.uw_level + spec.uw_conf * conf + 15.0 * X[:, 3] - 10.0 * X[:, 4]
               + 8.0 * X[:, 0])
    base_rw = spec.rw_level + spec.rw_conf * conf + 12.0 * X[:, 4] + 6.0 * X[:, 0]
    year_uw = rng.normal(0, 5.0, size=len(years))
    year_rw = rng.normal(0, 5.0, size=len(years))
    trend = 8.0 * spec.trend_confounding * X[:, 2]
    pc_uw_base = np.maximum(spec.pc_uw_level + 0.04 * X[:, 5], 0.05)
    pc_rw_base = np.maximum(spec.pc_rw_level + 0.03 * X[:, 6], 0.03)
    if spec.cost_effect_x0_above is None:
        cost_group = np.ones(n, bool)
    else:
        cost_group = X[:, 0] > spec.cost_effect_x0_above

    rows = []
    for t_i, year in enumerate(years):
        post = ~np.isnan(adopt_year) & (year >= adopt_year)
        P = np.where(post, price_unit, 0.0)
        tt = year - spec.first_year
        dip = np.where(adopt_year - 1 == year, spec.pre_shock, 0.0)
        y0_uw = base_uw + year_uw[t_i] + trend * tt + dip
        y0_rw = base_rw + year_rw[t_i] - 0.5 * trend * tt + 0.5 * dip
        e_uw = rng.normal(0, spec.noise_sd, size=n)
        e_rw = rng.normal(0, spec.noise_sd, size=n)
        uw = y0_uw + P * d_uw + e_uw
        rw = y0_rw + P * d_rw + e_rw
        pc_uw = np.maximum(pc_uw_base + spec.cost_noise * rng.normal(size=n)
                           + np.where(post & cost_group, spec.cost_effect_uw, 0.0), 0.01)
        pc_rw = np.maximum(pc_rw_base + spec.cost_noise * rng.normal(size=n), 0.01)
        rows.append(pd.DataFrame({
            "unit_id": [f"u{i:05d}" for i in range(n)], "year": year, "price": P,
            "uw": uw, "rw": rw, "adoption_year": adopt_year, "pc_uw": pc_uw,
            "pc_rw": pc_rw, "liters_per_kg": spec.liters_per_kg,
            **{f"x{j + 1}": X[:, j] for j in range(d)},
            "_delta_uw": d_uw, "_delta_rw": d_rw, "_y0_uw": y0_uw, "_y0_rw": y0_rw,
            "_noise_uw": e_uw, "_noise_rw": e_rw, "_expected_price": exp_price,
            "_mu_price": mu_p, "_p_adopt": p_adopt, "_cost_group": cost_group,
        }))
    full = pd.concat(rows, ignore_index=True)

    if spec.unbalanced_share > 0:
        never = full["adoption_year"].isna().to_numpy()
        drop = never & (rng.random(len(full)) < spec.unbalanced_share)
        full = full.loc[~drop]
    full = full.sort_values(["unit_id", "year"], kind="stable").reset_index(drop=True)

    clipped = int(((full["uw"] < 0) | (full["rw"] < 0)).sum())
    full["uw"] = full["uw"].clip(lower=0.0)
    full["rw"] = full["rw"].clip(lower=0.0)
    full["tw"] = full["uw"] + full["rw"]

    covs = [f"x{j + 1}" for j in range(d)]
    public = ["unit_id", "year", "price", "uw", "rw", "tw", "adoption_year", "pc_uw",
              "pc_rw", "liters_per_kg"] + covs
    panel = Panel(full[public].copy(), covs)

    manifest = full[["unit_id", "year", "price", "adoption_year"]].copy()
    manifest["delta_uw"] = full["_delta_uw"]
    manifest["delta_rw"] = full["_delta_rw"]
    manifest["delta_tw"] = full["_delta_uw"] + full["_delta_rw"]
    manifest["y0_uw"] = full["_y0_uw"]
    manifest["y0_rw"] = full["_y0_rw"]
    manifest["noise_uw"] = full["_noise_uw"]
    manifest["noise_rw"] = full["_noise_rw"]
    manifest["expected_price_if_treated"] = full["_expected_price"]
    manifest["mu_price"] = full["_mu_price"]
    manifest["p_adopt"] = full["_p_adopt"]
    manifest["s_true"] = full["_p_adopt"] * full["_expected_price"]
    manifest["cost_group"] = full["_cost_group"]
    manifest.attrs.update({
        "rows": len(full), "units": n, "adopters": n_adopt,
        "cohorts": {int(k): int(v) for k, v in spec.cohort_sizes.items()},
        "never_treated_rows": int(full["adoption_year"].isna().sum()),
        "clipped_outcomes": clipped, "spec": _spec_dict(spec),
    })
    return panel, manifest


def _spec_dict(spec):
    out = asdict(spec)
    out["cohort_sizes"] = {str(k): v for k, v in spec.cohort_sizes.items()}
    out["price_range"] = list(spec.price_range)
    return out


def _calibrate_shift(logit, target):
    lo, hi = -50.0, 50.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if special.expit(logit + mid).sum() < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def write_outputs(panel, manifest, data_path, manifest_path):
    panel.to_csv(data_path)
    manifest.to_csv(manifest_path, index=False)


# -- continuous-treatment cross section -------------------------------------

def make_continuous_treatment(n=2000, d=10, effect="linear", effect_base=2.0,
                              effect_slope=1.0, confounding=1.0, noise_sd=1.0,
                              treated_share=1.0, seed=0):
    """Cross section ``Y = m0(X) + P * delta(X) + noise`` on a standardized price scale.

    ``effect`` is ``"constant"`` (delta = base) or ``"linear"`` (base + slope * x1,
    with x1 right skewed and standardized). Prices of treated rows are
    ``confounding * 0.5 * x2 + N(0, 1)`` shifted by +3; untreated rows have
    price 0. Returns a dict with the data and the true nuisances.
    """
    rng = np.random.default_rng(seed)
    X = _covariates(rng, n, d)
    if effect == "constant":
        delta = np.full(n, float(effect_base))
    elif effect == "linear":
        delta = effect_base + effect_slope * X[:, 0]
    else:
        raise SpecInvalid(f"unknown effect {effect!r}")
    if treated_share >= 1.0:
        treated = np.ones(n, bool)
        p_treat = np.ones(n)
    else:
        logit = np.log(treated_share / (1 - treated_share)) + 0.5 * confounding * X[:, 1]
        p_treat = special.expit(logit)
        treated = rng.random(n) < p_treat
    mu = 3.0 + 0.5 * confounding * X[:, 1]
    price = np.where(treated, mu + rng.normal(size=n), 0.0)
    m0 = X[:, 1] + 0.5 * np.maximum(X[:, 2], 0.0) + 0.5 * X[:, 3]
    noise = rng.normal(0.0, noise_sd, size=n)
    y = m0 + price * delta + noise
    s_true = p_treat * mu
    return {"X": X, "y": y, "price": price, "treated": treated, "delta": delta,
            "m0": m0, "s_true": s_true, "y_true": m0 + s_true * delta, "noise": noise}
