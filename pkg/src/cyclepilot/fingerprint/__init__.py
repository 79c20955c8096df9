"""Nuisance-invariant fingerprints of object crops (analytic and learned)."""

from cyclepilot.fingerprint.analytic import ANALYTIC_DIM, Fingerprint, encode_analytic
from cyclepilot.fingerprint.autoencoder import (
    AEModel,
    TrainConfig,
    TrainingDivergedError,
    TrainReport,
    encode_learned,
    grad_check,
    init_model,
    load_ae_model,
    save_ae_model,
    train_autoencoder,
)

__all__ = [
    "Fingerprint",
    "ANALYTIC_DIM",
    "encode_analytic",
    "AEModel",
    "TrainConfig",
    "TrainReport",
    "TrainingDivergedError",
    "init_model",
    "train_autoencoder",
    "encode_learned",
    "grad_check",
    "save_ae_model",
    "load_ae_model",
]
