"""Run orchestration: configuration, event loop, expert channel, reports."""

from cyclepilot.run.config import (
    AEHyper,
    ConfigError,
    EdpSettings,
    FingerprintSettings,
    PlannerSettings,
    RetrainPolicy,
    RunConfig,
    build_run_config,
    canonical_echo,
    config_hash,
    load_run_config,
)
from cyclepilot.run.loop import RunReport, RunState, run_experiment
from cyclepilot.run.report import export_report, report_hash

__all__ = [
    "AEHyper",
    "ConfigError",
    "EdpSettings",
    "FingerprintSettings",
    "PlannerSettings",
    "RetrainPolicy",
    "RunConfig",
    "build_run_config",
    "canonical_echo",
    "config_hash",
    "load_run_config",
    "RunReport",
    "RunState",
    "run_experiment",
    "export_report",
    "report_hash",
]
