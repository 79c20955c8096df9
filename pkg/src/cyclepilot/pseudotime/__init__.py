"""Circular pseudo-time: angle arithmetic, circle fitting, and the latent model."""

from cyclepilot.pseudotime.angles import (
    UndefinedCorrelationError,
    circular_corr,
    circular_distance,
    circular_mean,
    forward_distance,
)
from cyclepilot.pseudotime.circlefit import DegenerateGeometryError, fit_circle
from cyclepilot.pseudotime.model import (
    Anchor,
    CycleModel,
    FitHyper,
    PseudoTimeEstimate,
    SequencePair,
    calibrate,
    fit_cycle_model,
    load_cycle_model,
    predict,
    save_cycle_model,
)

__all__ = [
    "forward_distance",
    "circular_distance",
    "circular_mean",
    "circular_corr",
    "UndefinedCorrelationError",
    "fit_circle",
    "DegenerateGeometryError",
    "CycleModel",
    "PseudoTimeEstimate",
    "SequencePair",
    "Anchor",
    "FitHyper",
    "fit_cycle_model",
    "predict",
    "calibrate",
    "save_cycle_model",
    "load_cycle_model",
]
