"""Closed-loop acquisition planning around cyclic processes.

A simulated stage full of objects evolves through a hidden cyclic phase.
Crops of those objects are reduced to nuisance-invariant fingerprints, a
circular latent model turns fingerprints into a pseudo-time estimate, and a
deadline-driven planner spends a limited dose budget to catch rare events.
"""

__version__ = "0.1.0"

from cyclepilot.pseudotime.angles import (
    circular_corr,
    circular_distance,
    forward_distance,
)

__all__ = [
    "__version__",
    "forward_distance",
    "circular_distance",
    "circular_corr",
]
