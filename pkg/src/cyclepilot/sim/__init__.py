"""Virtual stage: cyclic objects, a renderer, and a motion-limited microscope."""

from cyclepilot.sim.types import (
    Frame,
    MicroscopeBusyError,
    MicroscopeState,
    NuisanceParams,
    NuisanceRanges,
    SimConfig,
    SimObject,
    WorldState,
)
from cyclepilot.sim.world import advance, make_world, oracle_snapshot
from cyclepilot.sim.render import render_crop, render_field, separation_px, lobe_width_px
from cyclepilot.sim.microscope import acquire, move_to, travel_time_s

__all__ = [
    "SimConfig",
    "SimObject",
    "WorldState",
    "NuisanceParams",
    "NuisanceRanges",
    "Frame",
    "MicroscopeState",
    "MicroscopeBusyError",
    "make_world",
    "advance",
    "oracle_snapshot",
    "render_crop",
    "render_field",
    "separation_px",
    "lobe_width_px",
    "move_to",
    "acquire",
    "travel_time_s",
]
