"""Virtual microscope: stage motion with latency, acquisition with dose."""

from __future__ import annotations

import math

from cyclepilot.sim.types import Frame, MicroscopeBusyError, MicroscopeState, WorldState
from cyclepilot.sim.render import render_field

__all__ = ["move_to", "acquire", "travel_time_s"]


def travel_time_s(mic: MicroscopeState, from_um, to_um) -> float:
    """Time to reposition between two stage points; 0 when already there."""
    dist = math.hypot(to_um[0] - from_um[0], to_um[1] - from_um[1])
    if dist == 0.0:
        return 0.0
    return mic.move_latency_base_s + dist / mic.speed_um_per_s


def move_to(mic: MicroscopeState, target_um, now_s: float) -> MicroscopeState:
    """Start a stage move; the stage settles at now + base + distance/speed.

    Raises MicroscopeBusyError when a previous command is still settling.
    A move to the current position still pays the base latency.
    """
    if now_s < mic.busy_until_s:
        raise MicroscopeBusyError(mic.busy_until_s)
    dist = math.hypot(target_um[0] - mic.stage_pos_um[0], target_um[1] - mic.stage_pos_um[1])
    mic.busy_until_s = now_s + mic.move_latency_base_s + dist / mic.speed_um_per_s
    mic.stage_pos_um = (float(target_um[0]), float(target_um[1]))
    return mic


def acquire(world: WorldState, mic: MicroscopeState, viewport, exposure: float, now_s: float,
            object_id: int | None = None) -> Frame:
    """Render the viewport and deliver ``exposure`` dose to in-view objects.

    The acquisition is instantaneous; only stage moves occupy the
    instrument.  Objects whose accumulated dose exceeds the budget get
    their ``bleached`` flag set.  Appends (t_s, object_id, viewport) to
    the world's acquisition log; timestamps must be non-decreasing.
    """
    if now_s < mic.busy_until_s:
        raise MicroscopeBusyError(mic.busy_until_s)
    if exposure <= 0:
        raise ValueError(f"exposure must be positive, got {exposure}")
    if world.acquisition_log and now_s < world.acquisition_log[-1][0]:
        raise ValueError("acquisition timestamps must be non-decreasing")
    x0, y0, x1, y1 = viewport
    frame = render_field(world, viewport)
    frame.t_s = now_s
    frame.exposure = exposure
    for obj in world.objects:
        ox, oy = obj.pos_um
        if x0 <= ox < x1 and y0 <= oy < y1:
            obj.dose += exposure
            if obj.dose > world.config.dose_budget:
                obj.bleached = True
    world.acquisition_log.append((now_s, object_id, tuple(float(v) for v in viewport)))
    return frame
