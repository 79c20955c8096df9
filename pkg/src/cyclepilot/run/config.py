"""Run configuration: schema, file loading, canonical echo, stable hash.

The on-disk format is YAML with the exact key paths of the dataclasses
below.  Unknown keys are rejected by full path so typos fail loudly
instead of silently falling back to defaults.  ``canonical_echo`` renders
the complete effective configuration (defaults filled in) as sorted YAML;
``config_hash`` is the SHA-256 of that text, so equal configurations hash
equally regardless of how sparse the source file was.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields

import yaml

from cyclepilot.extract import ExtractionParams
from cyclepilot.sim.types import NuisanceRanges, SimConfig

__all__ = [
    "ConfigError",
    "AEHyper",
    "FingerprintSettings",
    "EdpSettings",
    "PlannerSettings",
    "RetrainPolicy",
    "RunConfig",
    "build_run_config",
    "load_run_config",
    "canonical_echo",
    "config_hash",
]


class ConfigError(ValueError):
    """Configuration file is malformed or violates an invariant."""


@dataclass(frozen=True)
class AEHyper:
    """Autoencoder hyperparameters for the learned fingerprint backend."""

    latent: int = 8
    hidden: int = 64
    mask_fraction: float = 0.5
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 30
    batch: int = 32
    seed: int = 0

    def validate(self):
        if self.latent < 1 or self.hidden < 1:
            raise ConfigError("fingerprint.ae latent and hidden must be >= 1")
        if not 0.0 <= self.mask_fraction < 1.0:
            raise ConfigError("fingerprint.ae.mask_fraction must be in [0, 1)")
        if self.lr <= 0 or self.epochs < 0 or self.batch < 1:
            raise ConfigError("fingerprint.ae training settings out of range")


@dataclass(frozen=True)
class FingerprintSettings:
    backend: str = "analytic"
    ae: AEHyper = field(default_factory=AEHyper)

    def validate(self):
        if self.backend not in ("analytic", "learned"):
            raise ConfigError(
                f"fingerprint.backend must be 'analytic' or 'learned', got {self.backend!r}"
            )
        self.ae.validate()


@dataclass(frozen=True)
class EdpSettings:
    """Pseudo-time fit settings: pair and label-pair penalty weights."""

    lam: float = 1.0
    anchor_weight: float = 1.0

    def validate(self):
        if self.lam < 0:
            raise ConfigError("edp.lam must be >= 0")
        if self.anchor_weight <= 0:
            raise ConfigError("edp.anchor_weight must be positive")


@dataclass(frozen=True)
class PlannerSettings:
    """Scheduling knobs; window/stale values are cycle fractions."""

    k: float = 1.0
    window_w: float = 0.05
    replan_interval_s: float = 5.0
    al_budget_per_h: float = 12.0
    tau_stale: float = 0.25
    horizon_s: float = 120.0
    p_star: float = 0.0
    exposure: float = 1.0
    approval_mode: bool = False

    def validate(self):
        if self.replan_interval_s <= 0:
            raise ConfigError("planner.replan_interval_s must be positive")
        if not 0.0 < self.window_w <= 0.25:
            raise ConfigError("planner.window_w must be in (0, 0.25]")
        if not 0.0 <= self.p_star < 1.0:
            raise ConfigError("planner.p_star must be in [0, 1)")
        if self.k < 0 or self.tau_stale <= 0 or self.horizon_s <= 0:
            raise ConfigError("planner guard/stale/horizon settings out of range")
        if self.al_budget_per_h < 0:
            raise ConfigError("planner.al_budget_per_h must be >= 0")
        if self.exposure <= 0:
            raise ConfigError("planner.exposure must be positive")


@dataclass(frozen=True)
class RetrainPolicy:
    """When to refit the pseudo-time model from accumulated data."""

    residual_threshold: float = 0.1
    trigger_fraction: float = 0.2
    window_n: int = 50
    min_interval_s: float = 300.0

    def validate(self):
        if not 0.0 < self.trigger_fraction <= 1.0:
            raise ConfigError("retrain.trigger_fraction must be in (0, 1]")
        if self.window_n < 10:
            raise ConfigError("retrain.window_n must be >= 10")
        if not 0.0 <= self.residual_threshold <= 0.5:
            raise ConfigError("retrain.residual_threshold must be in [0, 0.5]")
        if self.min_interval_s < 0:
            raise ConfigError("retrain.min_interval_s must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    extraction: ExtractionParams = field(default_factory=ExtractionParams)
    fingerprint: FingerprintSettings = field(default_factory=FingerprintSettings)
    edp: EdpSettings = field(default_factory=EdpSettings)
    planner: PlannerSettings = field(default_factory=PlannerSettings)
    retrain: RetrainPolicy = field(default_factory=RetrainPolicy)
    duration_s: float = 1200.0
    report_dir: str = "runs/latest"
    store_dir: str = ""

    def validate(self):
        if self.duration_s <= 0:
            raise ConfigError("duration_s must be positive")
        if not self.report_dir:
            raise ConfigError("report_dir must be non-empty")
        self.sim.validate()
        self.extraction.validate()
        self.fingerprint.validate()
        self.edp.validate()
        self.planner.validate()
        self.retrain.validate()


_TUPLE_FIELDS = {"field_um", "shift_px"}


def _build(cls, data, path):
    """Instantiate a dataclass from a mapping, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping, got {type(data).__name__}")
    spec = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(spec))
    if unknown:
        names = ", ".join(f"{path}.{k}" if path else k for k in unknown)
        raise ConfigError(f"unknown config keys: {names}")
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        if name == "sim":
            kwargs[name] = _build(SimConfig, value, sub)
        elif name == "nuisance":
            kwargs[name] = _build(NuisanceRanges, value, sub)
        elif name == "extraction":
            kwargs[name] = _build(ExtractionParams, value, sub)
        elif name == "fingerprint":
            kwargs[name] = _build(FingerprintSettings, value, sub)
        elif name == "ae":
            kwargs[name] = _build(AEHyper, value, sub)
        elif name == "edp":
            kwargs[name] = _build(EdpSettings, value, sub)
        elif name == "planner":
            kwargs[name] = _build(PlannerSettings, value, sub)
        elif name == "retrain":
            kwargs[name] = _build(RetrainPolicy, value, sub)
        elif name in _TUPLE_FIELDS:
            if not isinstance(value, (list, tuple)) or len(value) != 2:
                raise ConfigError(f"{sub} must be a pair of numbers")
            kwargs[name] = (float(value[0]), float(value[1]))
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def build_run_config(data) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    cfg.validate()
    return cfg


def load_run_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if data is None:
        data = {}
    return build_run_config(data)


def _plain(value):
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: _plain(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def canonical_echo(cfg: RunConfig) -> str:
    """Full effective configuration as sorted-key YAML text."""
    return yaml.safe_dump(_plain(cfg), sort_keys=True, default_flow_style=False)


def config_hash(cfg: RunConfig) -> str:
    """SHA-256 hex digest of the canonical echo."""
    return hashlib.sha256(canonical_echo(cfg).encode("utf-8")).hexdigest()
