import dataclasses
import json

import numpy as np
import pytest
from scipy import stats

from capeforest import dgp
from capeforest.dataset import load_panel
from capeforest.exceptions import SpecInvalid


def test_reference_cohorts_give_194_adopters():
    spec = dgp.DgpSpec(cohort_sizes={2012: 48, 2013: 77, 2014: 36, 2015: 33})
    panel, manifest = dgp.generate(spec)
    assert len(panel.adopters()) == 194 == manifest.attrs["adopters"]
    years = panel.df.drop_duplicates("unit_id")["adoption_year"].value_counts()
    assert years.to_dict() == {2013.0: 77, 2012.0: 48, 2014.0: 36, 2015.0: 33}


def test_large_file_round_trip(tmp_path):
    spec = dgp.DgpSpec(n_units=2431, n_years=8)
    panel, manifest = dgp.generate(spec)
    dgp.write_outputs(panel, manifest, tmp_path / "p.csv", tmp_path / "m.csv")
    back = load_panel(tmp_path / "p.csv")
    assert len(back) == 19_448 == manifest.attrs["rows"]
    assert back.df["unit_id"].nunique() == manifest.attrs["units"]
    assert int(back.df["adoption_year"].isna().sum()) == manifest.attrs["never_treated_rows"]


def test_outcome_identity_and_manifest_consistency(small_panel):
    panel, m = small_panel
    df = panel.df
    y = m["y0_uw"] + df["price"] * m["delta_uw"] + m["noise_uw"]
    np.testing.assert_allclose(df["uw"], y.clip(lower=0), atol=1e-9)
    np.testing.assert_array_equal(df["tw"], df["uw"] + df["rw"])
    assert ((df["price"] > 0) == (df["year"] >= df["adoption_year"])).all()
    treated = df["price"] > 0
    lo, hi = dgp.PRESETS["default"].price_range
    assert df.loc[treated, "price"].between(lo, hi).all()
    raw = (m["y0_uw"] + df["price"] * m["delta_uw"] + m["noise_uw"] < 0) | (
        m["y0_rw"] + df["price"] * m["delta_rw"] + m["noise_rw"] < 0)
    assert m.attrs["clipped_outcomes"] == int(raw.sum())


def test_same_seed_same_panel():
    spec = dataclasses.replace(dgp.PRESETS["default"], n_units=120, cohort_sizes={2012: 10})
    a, ma = dgp.generate(spec)
    b, mb = dgp.generate(spec)
    assert a.df.equals(b.df) and ma.equals(mb)
    json.dumps(ma.attrs)


def test_clipped_normal_mean_matches_monte_carlo():
    rng = np.random.default_rng(0)
    z = rng.normal(size=2_000_000)
    for mu in (0.0, 0.02, 0.09, 0.2):
        mc = np.clip(mu + 0.05 * z, 0.01, 0.18).mean()
        assert dgp.clipped_normal_mean(mu, 0.05, 0.01, 0.18) == pytest.approx(mc, abs=2e-4)


def test_kinked_effect():
    e = dgp.EffectSpec("kinked", -1000.0, 0.0, 0.08, -8000.0)
    np.testing.assert_allclose(e(np.zeros(3), np.array([0.05, 0.08, 0.10])),
                               [-1000.0, -1000.0, -1160.0])


def test_spec_from_dict_and_errors():
    spec = dgp.spec_from_dict({"preset": "null", "n_units": 50, "cohort_sizes": {"2012": 5},
                               "delta_uw": {"base": -10.0}})
    assert spec.n_units == 50 and spec.cohort_sizes == {2012: 5}
    assert spec.delta_uw.base == -10.0
    with pytest.raises(SpecInvalid):
        dgp.spec_from_dict({"bogus": 1})
    with pytest.raises(SpecInvalid):
        dgp.generate(dgp.DgpSpec(n_units=10, cohort_sizes={2012: 10}))
    with pytest.raises(SpecInvalid):
        dgp.generate(dgp.DgpSpec(cohort_sizes={2010: 5}))
    with pytest.raises(SpecInvalid):
        dgp.generate(dgp.DgpSpec(delta_uw=dgp.EffectSpec("cubic")))


def test_unbalanced_panel_drops_only_never_treated_rows():
    spec = dataclasses.replace(dgp.PRESETS["default"], n_units=200,
                               cohort_sizes={2012: 20}, unbalanced_share=0.2)
    panel, m = dgp.generate(spec)
    per_unit = panel.df.groupby("unit_id").size()
    adopters = list(panel.adopters())
    assert (per_unit[adopters] == spec.n_years).all()
    assert len(panel) < 200 * spec.n_years


def test_continuous_generator():
    d = dgp.make_continuous_treatment(n=5000, effect="linear", seed=1)
    assert stats.skew(d["X"][:, 0]) > 0.8
    np.testing.assert_allclose(d["delta"], 2.0 + d["X"][:, 0])
    np.testing.assert_allclose(d["y"], d["m0"] + d["price"] * d["delta"] + d["noise"])
    half = dgp.make_continuous_treatment(n=4000, treated_share=0.5, seed=2)
    assert 0.45 < half["treated"].mean() < 0.55
    assert (half["price"][~half["treated"]] == 0).all()
