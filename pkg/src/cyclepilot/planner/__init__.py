"""Acquisition planning: per-object rate tracks, event-time prediction,
serial-instrument scheduling, baselines, and run scoring."""

from cyclepilot.planner.tracks import (
    EventSpec,
    ObjectTrack,
    new_track,
    update_track,
    predict_event_time,
)
from cyclepilot.planner.scheduling import (
    PlannedAcquisition,
    PlannerConfig,
    plan,
    round_robin_plan,
    schedule_to_csv_rows,
)
from cyclepilot.planner.evaluation import Metrics, evaluate_run

__all__ = [
    "EventSpec",
    "ObjectTrack",
    "new_track",
    "update_track",
    "predict_event_time",
    "PlannedAcquisition",
    "PlannerConfig",
    "plan",
    "round_robin_plan",
    "schedule_to_csv_rows",
    "Metrics",
    "evaluate_run",
]
