"""First R-learner stage: out-of-bag residuals of outcome and price."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .dataset import EstimationFrame
from .exceptions import EmptyControlGroup
from .forest import ForestParams, RegressionForest

log = logging.getLogger(__name__)

_TAG_Y, _TAG_S = 11, 12


def derive_seed(seed, *tags):
    """Deterministic 31-bit child seed of ``seed`` for the given integer tags."""
    return int(np.random.SeedSequence([int(seed), *map(int, tags)]).generate_state(1)[0] >> 1)


@dataclass(frozen=True)
class ResidualFrame:
    """Residuals for one or more stacked calendar-year frames.

    Nuisance forests are fitted separately for every calendar year; rows keep
    the frame order (treated then controls, frame after frame).
    """

    frames: tuple
    unit_ids: np.ndarray
    years: np.ndarray
    X: np.ndarray
    y: np.ndarray
    price: np.ndarray
    treated: np.ndarray
    y_hat_oob: np.ndarray
    s_hat_oob: np.ndarray
    y_resid: np.ndarray
    p_resid: np.ndarray
    forests: dict

    @property
    def frame_ref(self):
        return self.frames[0] if len(self.frames) == 1 else self.frames

    @property
    def strata(self):
        return self.years

    def __len__(self):
        return self.y.shape[0]

    def nuisance(self, X, calendar_year):
        """Full-forest predictions ``(y_hat, s_hat)`` for rows outside training."""
        fy, fs = self.forests[int(calendar_year)]
        return fy.predict(X), fs.predict(X)

    def to_frame(self):
        return pd.DataFrame({"unit_id": self.unit_ids, "year": self.years,
                             "y_resid": self.y_resid, "p_resid": self.p_resid,
                             "y_hat": self.y_hat_oob, "s_hat": self.s_hat_oob})

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format="%.17g")


def residualize(frame, params_y: ForestParams = ForestParams(),
                params_s: ForestParams | None = None, seed=0, n_jobs=1,
                treatment="price"):
    """Fit nuisance forests per calendar year and return OOB residuals.

    Parameters
    ----------
    frame : EstimationFrame or sequence of them
        Frames for different calendar years are stacked; each gets its own
        pair of forests.
    params_y, params_s : ForestParams
        Outcome and price forests (``params_s`` defaults to ``params_y``).
    seed : int
        Run seed; forest seeds are derived from it, the calendar year and a
        per-forest tag.
    n_jobs : int
        Threads; the two forests of a frame are fitted concurrently.
    treatment : {"price", "binary"}
        Continuous price, or the 0/1 policy indicator.
    """
    if treatment not in ("price", "binary"):
        raise ValueError(f"unknown treatment {treatment!r}")
    frames = (frame,) if isinstance(frame, EstimationFrame) else tuple(frame)
    params_s = params_y if params_s is None else params_s
    parts = []
    forests = {}
    for fr in frames:
        if len(fr.controls) == 0:
            raise EmptyControlGroup(f"calendar year {fr.calendar_year} has no controls")
        X, y = fr.X, fr.y
        p = fr.price if treatment == "price" else fr.treated_flag.astype(float)
        fy = RegressionForest.from_params(
            params_y, random_state=derive_seed(seed, _TAG_Y, fr.calendar_year), n_jobs=n_jobs)
        fs = RegressionForest.from_params(
            params_s, random_state=derive_seed(seed, _TAG_S, fr.calendar_year), n_jobs=n_jobs)
        if n_jobs > 1:
            with ThreadPoolExecutor(max_workers=2) as pool:
                jobs = [pool.submit(fy.fit, X, y), pool.submit(fs.fit, X, p)]
                for j in jobs:
                    j.result()
        else:
            fy.fit(X, y)
            fs.fit(X, p)
        y_hat, s_hat = fy.predict_oob(), fs.predict_oob()
        log.info("calendar year %d: n=%d, nuisance fits done", fr.calendar_year, len(fr))
        forests[int(fr.calendar_year)] = (fy, fs)
        parts.append((fr.unit_ids, fr.years, X, y, p, fr.treated_flag, y_hat, s_hat))

    cols = [np.concatenate(c) for c in zip(*parts)]
    unit_ids, years, X, y, p, treated, y_hat, s_hat = cols
    return ResidualFrame(frames=frames, unit_ids=unit_ids, years=years, X=X, y=y,
                         price=p, treated=treated, y_hat_oob=y_hat, s_hat_oob=s_hat,
                         y_resid=y - y_hat, p_resid=p - s_hat, forests=forests)
