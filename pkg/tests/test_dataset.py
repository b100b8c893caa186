import dataclasses

import numpy as np
import pandas as pd
import pytest

from capeforest import dgp
from capeforest.dataset import (build_frame, build_frames, exclude_neighbors, load_neighbor_map,
                                load_panel, validation_report)
from capeforest.exceptions import (EmptyControlGroup, MissingColumn, NoTreatedUnits,
                                   PanelValidationError, UnknownUnitId)


def _write(tmp_path, df, name="panel.csv"):
    path = tmp_path / name
    df.to_csv(path, index=False, float_format="%.17g")
    return path


def _tiny():
    rows = []
    for u, adopt in (("a", 2012), ("b", 2014), ("c", None), ("d", None)):
        for year in (2011, 2012, 2013, 2014):
            on = adopt is not None and year >= adopt
            rows.append({"unit_id": u, "year": year, "price": 0.1 if on else 0.0,
                         "uw": 200.0 - 50 * on, "rw": 200.0, "tw": 400.0 - 50 * on,
                         "adoption_year": adopt, "x1": float(ord(u)), "x2": year - 2011.0})
    return pd.DataFrame(rows)


def test_round_trip_matches_manifest(small_panel, tmp_path):
    panel, manifest = small_panel
    path = tmp_path / "p.csv"
    panel.to_csv(path)
    back = load_panel(path)
    assert len(back) == manifest.attrs["rows"]
    assert back.df["unit_id"].nunique() == manifest.attrs["units"]
    assert len(back.adopters()) == manifest.attrs["adopters"]
    pd.testing.assert_frame_equal(back.df, panel.df, check_dtype=False, check_exact=True)


def test_default_cohorts_give_reference_frame_sizes():
    panel, _ = dgp.generate(dgp.PRESETS["default"])
    counts = [sum(len(f.treated) for f in build_frames(panel, k, "uw")) for k in (1, 2, 3)]
    assert counts == [194, 161, 125]


def test_late_adopters_never_controls(tmp_path):
    panel = load_panel(_write(tmp_path, _tiny()))
    fr = build_frame(panel, 1, "uw", 2012)
    ids = set(panel.df["unit_id"].to_numpy()[fr.controls])
    assert ids == {"c", "d"}
    assert list(panel.df["unit_id"].to_numpy()[fr.treated]) == ["a"]
    frames = build_frames(panel, 1, "uw")
    assert [f.calendar_year for f in frames] == [2012, 2014]
    assert fr.y.tolist() == [150.0, 200.0, 200.0]
    assert fr.treated_flag.tolist() == [True, False, False]


def test_policy_year_beyond_panel(tmp_path):
    df = _tiny()
    panel = load_panel(_write(tmp_path, df[df["unit_id"] != "a"]))
    with pytest.raises(NoTreatedUnits):
        build_frames(panel, 3, "uw")
    with pytest.raises(ValueError):
        build_frames(panel, 4, "uw")


def test_no_controls(tmp_path):
    df = _tiny()
    df = df[~df["unit_id"].isin(["c", "d"])]
    panel = load_panel(_write(tmp_path, df))
    with pytest.raises(EmptyControlGroup):
        build_frame(panel, 1, "uw", 2012)


def test_tw_derived_when_missing(tmp_path):
    df = _tiny().drop(columns="tw")
    panel = load_panel(_write(tmp_path, df))
    np.testing.assert_array_equal(panel.df["tw"], panel.df["uw"] + panel.df["rw"])


def test_validation_collects_row_errors(tmp_path):
    df = _tiny()
    df.loc[1, "tw"] = 999.0
    df.loc[2, "price"] = -1.0
    df.loc[5, "price"] = 0.3  # before adoption
    df.loc[9, "price"] = 0.05  # never-treated unit
    with pytest.raises(PanelValidationError) as err:
        load_panel(_write(tmp_path, df))
    rows = [p.row for p in err.value.problems]
    assert rows == sorted(rows)
    assert {3, 4, 7, 11} <= set(rows)
    assert "row 3: tw != uw + rw" in validation_report(err.value)

    bad = _tiny()
    bad["uw"] = bad["uw"].astype(object)
    bad.loc[3, "uw"] = "abc"
    with pytest.raises(PanelValidationError) as err:
        load_panel(_write(tmp_path, bad, "bad.csv"))
    assert [(p.row, p.column) for p in err.value.problems] == [(5, "uw")]


def test_missing_column(tmp_path):
    with pytest.raises(MissingColumn):
        load_panel(_write(tmp_path, _tiny().drop(columns="rw")))


def test_schema_maps_headers(tmp_path):
    df = _tiny().rename(columns={"uw": "unsorted", "unit_id": "muni"})
    schema = {"uw": "unsorted", "unit_id": "muni", "covariates": ["x1"]}
    panel = load_panel(_write(tmp_path, df), schema)
    assert panel.covariates == ["x1"]
    assert panel.df["uw"].iloc[0] == 200.0


def test_lag_check_excludes_units(tmp_path):
    df = _tiny()
    df.loc[df["unit_id"] == "a", "x2"] = np.nan
    path = _write(tmp_path, df)
    schema = {"lag_columns": ["x2"]}
    with pytest.raises(PanelValidationError):
        load_panel(path, schema)
    panel = load_panel(path, schema, lag_check=True)
    assert panel.excluded_units == ["a"]
    assert "a" not in set(panel.df["unit_id"])


def test_neighbor_exclusion_shrinks_controls_by_flag_count(small_panel, tmp_path):
    panel, _ = small_panel
    treated = sorted(panel.adopters())
    never = sorted(panel.never_treated())
    flagged = never[: len(never) // 10]
    edges = pd.DataFrame({"unit_id": [treated[i % len(treated)] for i in range(len(flagged))],
                          "neighbor_id": flagged})
    edges.to_csv(tmp_path / "nb.csv", index=False)
    nmap = load_neighbor_map(tmp_path / "nb.csv")
    after = exclude_neighbors(panel, nmap)
    k1 = build_frame(panel, 1, "uw", 2013)
    k1b = build_frame(after, 1, "uw", 2013)
    assert len(k1.controls) - len(k1b.controls) == len(flagged)
    with pytest.raises(UnknownUnitId):
        exclude_neighbors(panel, {"nope": [treated[0]]})


def test_panel_records(tmp_path):
    panel = load_panel(_write(tmp_path, _tiny()))
    rec = next(iter(panel))
    assert rec.unit_id == "a" and rec.year == 2011 and rec.adoption_year == 2012
    assert rec.covariates == (97.0, 0.0)
    assert rec.pc_uw is None


def test_seed_changes_panel():
    a, _ = dgp.generate(dataclasses.replace(dgp.PRESETS["default"], n_units=200,
                                            cohort_sizes={2012: 10}, seed=1))
    b, _ = dgp.generate(dataclasses.replace(dgp.PRESETS["default"], n_units=200,
                                            cohort_sizes={2012: 10}, seed=2))
    assert not a.df["uw"].equals(b.df["uw"])
