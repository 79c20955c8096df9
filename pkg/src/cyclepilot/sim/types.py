"""Data types for the simulated stage and instrument.

Everything downstream of the simulator sees only rendered frames and the
acquisition log; hidden phases and rates are reachable exclusively through
the oracle snapshot, which is reserved for evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NuisanceRanges",
    "NuisanceParams",
    "SimConfig",
    "SimObject",
    "WorldState",
    "Frame",
    "MicroscopeState",
    "MicroscopeBusyError",
]


@dataclass(frozen=True)
class NuisanceParams:
    """One concrete nuisance draw applied to a rendered crop.

    rotation_rad : orientation of the lobe axis.
    reflect : mirror the chirality of the pattern.
    brightness : multiplicative intensity factor.
    shift_px : (dx, dy) subpixel shift of the pattern center.
    noise_std : additive Gaussian noise level.
    """

    rotation_rad: float = 0.0
    reflect: bool = False
    brightness: float = 1.0
    shift_px: tuple[float, float] = (0.0, 0.0)
    noise_std: float = 0.0


@dataclass(frozen=True)
class NuisanceRanges:
    """Sampling ranges for per-acquisition nuisance draws."""

    rotation: bool = True
    reflect_prob: float = 0.5
    brightness_lo: float = 0.9
    brightness_hi: float = 1.1
    shift_max_px: float = 0.5
    noise_std: float = 0.005

    def validate(self):
        errors = []
        if not 0.0 <= self.reflect_prob <= 1.0:
            errors.append("reflect_prob must be in [0, 1]")
        if self.brightness_lo <= 0 or self.brightness_hi < self.brightness_lo:
            errors.append("brightness range must be positive and ordered")
        if self.shift_max_px < 0:
            errors.append("shift_max_px must be >= 0")
        if self.noise_std < 0:
            errors.append("noise_std must be >= 0")
        if errors:
            raise ValueError("; ".join(errors))


@dataclass(frozen=True)
class SimConfig:
    """Parameters of the simulated stage.

    Periods are drawn lognormal with mean ``period_mean_s`` and coefficient
    of variation ``period_cv``.  ``phase_noise`` is the phase diffusion
    scale: over ``dt`` seconds each phase picks up N(0, phase_noise^2*dt).
    ``dose_budget`` is the bleaching threshold D_max in exposure units;
    ``bleach_contrast_decay`` is the decay rate gamma beyond it.
    """

    n_objects: int = 50
    field_um: tuple[float, float] = (800.0, 800.0)
    period_mean_s: float = 600.0
    period_cv: float = 0.2
    phase_noise: float = 0.001
    crop_px: int = 32
    dose_budget: float = 40.0
    bleach_contrast_decay: float = 0.5
    seed: int = 0
    pixel_size_um: float = 1.0
    divide_on_wrap: bool = False
    nuisance: NuisanceRanges = field(default_factory=NuisanceRanges)

    def validate(self):
        errors = []
        if self.n_objects < 0:
            errors.append("n_objects must be >= 0")
        if self.field_um[0] <= 0 or self.field_um[1] <= 0:
            errors.append("field_um must be positive")
        if self.period_mean_s <= 0:
            errors.append("period_mean_s must be positive")
        if self.period_cv < 0:
            errors.append("period_cv must be >= 0")
        if self.phase_noise < 0:
            errors.append("phase_noise must be >= 0")
        if self.crop_px < 8:
            errors.append("crop_px must be >= 8")
        if self.dose_budget <= 0:
            errors.append("dose_budget must be positive")
        if self.bleach_contrast_decay < 0:
            errors.append("bleach_contrast_decay must be >= 0")
        if self.pixel_size_um <= 0:
            errors.append("pixel_size_um must be positive")
        self.nuisance.validate()
        if errors:
            raise ValueError("; ".join(errors))


@dataclass
class SimObject:
    """One object on the stage.  ``theta`` in [0, 1) and ``omega`` (cycles/s)
    are hidden state; ``dose`` and ``bleached`` are instrument-observable."""

    id: int
    pos_um: tuple[float, float]
    theta: float
    omega: float
    appearance_seed: int
    dose: float = 0.0
    bleached: bool = False


@dataclass
class WorldState:
    """Mutable simulation state.  Mutated only by the orchestrating loop."""

    config: SimConfig
    now_s: float
    objects: list[SimObject]
    rng: np.random.Generator
    acquisition_log: list = field(default_factory=list)


@dataclass
class Frame:
    """One rendered field of view.

    pixels : (H, W) array, >= 0.
    pixel_size_um : microns per pixel.
    stage_pos_um : viewport center at render time.
    t_s : acquisition timestamp.
    exposure : exposure units delivered (0 for a pure render).
    """

    pixels: np.ndarray
    pixel_size_um: float
    stage_pos_um: tuple[float, float]
    t_s: float
    exposure: float = 0.0


class MicroscopeBusyError(RuntimeError):
    """Command issued while the stage is still settling."""

    def __init__(self, busy_until_s):
        super().__init__(f"microscope busy until t={busy_until_s:.3f}s")
        self.busy_until_s = busy_until_s


@dataclass
class MicroscopeState:
    """Stage position and motion model of the single instrument.

    A move completes at ``now + move_latency_base_s + distance/speed``;
    commands issued before ``busy_until_s`` raise MicroscopeBusyError.
    """

    stage_pos_um: tuple[float, float] = (0.0, 0.0)
    busy_until_s: float = 0.0
    move_latency_base_s: float = 0.5
    speed_um_per_s: float = 200.0
