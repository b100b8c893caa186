import dataclasses

import numpy as np
import pytest

from capeforest import dgp

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not rep.failed:
        return
    n = mark.args[0]
    detail = dict(item.user_properties).get("detail", "")
    prev = _CRITERIA.get(n)
    ok = rep.passed and (prev is None or prev[0])
    _CRITERIA[n] = (ok, detail if not prev or not detail else f"{prev[1]}; {detail}".strip("; "))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def small_panel():
    """A 300-unit panel with the standard cohort shape scaled down."""
    spec = dataclasses.replace(dgp.PRESETS["default"], n_units=300,
                               cohort_sizes={2012: 15, 2013: 23, 2014: 11, 2015: 10}, seed=7)
    return dgp.generate(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
