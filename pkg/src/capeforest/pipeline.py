"""Two-stage estimation for one outcome and policy year."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .causal_forest import CausalForest, estimate_ape, resolve_clusters
from .dataset import build_frames
from .forest import ForestParams
from .residualizer import derive_seed, residualize

log = logging.getLogger(__name__)

_TAG_CF, _TAG_BOOT = 21, 22
_OUTCOME_CODE = {"uw": 1, "rw": 2, "tw": 3}


@dataclass
class EstimatorConfig:
    nuisance: ForestParams = ForestParams(num_trees=500)
    propensity: ForestParams | None = None
    causal: ForestParams = ForestParams(num_trees=1000)
    bag_size: int = 10
    min_treated_per_leaf: int = 1
    min_control_per_leaf: int = 1
    n_boot: int = 200
    seed: int = 0
    n_jobs: int = 1


@dataclass
class FrameEstimate:
    outcome: str
    policy_year: int
    resid: object
    forest: CausalForest
    delta: np.ndarray
    std_err: np.ndarray
    ape: object
    extra: dict = field(default_factory=dict)

    def cape_table(self):
        from .causal_forest import Z95
        lo = self.delta - Z95 * self.std_err
        hi = self.delta + Z95 * self.std_err
        r = self.resid
        return pd.DataFrame({
            "unit_id": r.unit_ids, "year": r.years, "treated": r.treated.astype(int),
            "price": r.price, "s_hat": r.s_hat_oob, "delta_hat": self.delta,
            "std_err": self.std_err, "ci_low": lo, "ci_high": hi,
            "significant_05": ((lo > 0) | (hi < 0)).astype(int),
            "cate": r.price * self.delta,
        })


def estimate(panel, k, outcome, cfg: EstimatorConfig = EstimatorConfig(), frames=None):
    """Residualize, fit the causal forest and score every frame row out of bag."""
    frames = build_frames(panel, k, outcome) if frames is None else frames
    oc = _OUTCOME_CODE[outcome]
    seed = derive_seed(cfg.seed, oc, k)
    resid = residualize(frames, cfg.nuisance, cfg.propensity, seed=seed, n_jobs=cfg.n_jobs)
    strata = resid.years if len(frames) > 1 else None
    cf = CausalForest.from_params(
        cfg.causal, bag_size=cfg.bag_size, min_treated_per_leaf=cfg.min_treated_per_leaf,
        min_control_per_leaf=cfg.min_control_per_leaf,
        random_state=derive_seed(seed, _TAG_CF), n_jobs=cfg.n_jobs)
    cf.fit(resid.X, resid.y_resid, resid.p_resid, resid.treated, strata)
    delta, se = cf.predict_oob(with_std=True)
    clusters = resolve_clusters(resid.years, resid.unit_ids)
    ape = estimate_ape(resid.y_resid, resid.p_resid, clusters=clusters, n_boot=cfg.n_boot,
                       seed=derive_seed(seed, _TAG_BOOT), policy_year=k, outcome=outcome)
    log.info("%s k=%d: n=%d APE=%.4g (se %.3g)", outcome, k, len(resid), ape.ape, ape.std_err)
    return FrameEstimate(outcome, k, resid, cf, delta, se, ape)
