"""Causal forests for heterogeneous price effects of unit-based waste pricing."""

from .causal_forest import ApeEstimate, CapeEstimate, CausalForest, estimate_ape
from .dataset import EstimationFrame, Panel, build_frame, build_frames, load_panel
from .forest import ForestParams, RegressionForest
from .residualizer import ResidualFrame, residualize

__version__ = "0.1.0"

__all__ = [
    "ApeEstimate", "CapeEstimate", "CausalForest", "EstimationFrame", "ForestParams",
    "Panel", "RegressionForest", "ResidualFrame", "build_frame", "build_frames",
    "estimate_ape", "load_panel", "residualize",
]
