"""Score a completed run against the simulator's hidden truth.

An event occurrence is the hidden phase crossing p_star (once per object
per cycle, located by scanning consecutive oracle samples).  A crossing
counts as captured when some acquisition of that object landed with its
true phase inside the capture window; each in-window acquisition is
assigned to its nearest crossing in time so one lucky frame cannot pay
for two cycles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from cyclepilot.pseudotime.angles import circular_distance, forward_distance

__all__ = ["Metrics", "evaluate_run", "capture_flags"]


@dataclass(frozen=True)
class Metrics:
    events_occurred: int
    events_captured: int
    capture_rate: float
    acquisitions_total: int
    acquisitions_per_capture: float
    total_dose: float
    bleached_count: int

    def __post_init__(self):
        if not 0.0 <= self.capture_rate <= 1.0:
            raise ValueError("capture_rate out of range")
        if self.events_captured > self.events_occurred:
            raise ValueError("captured exceeds occurred")

    def to_dict(self):
        apc = self.acquisitions_per_capture
        return {
            "events_occurred": self.events_occurred,
            "events_captured": self.events_captured,
            "capture_rate": self.capture_rate,
            "acquisitions_total": self.acquisitions_total,
            "acquisitions_per_capture": None if math.isinf(apc) else apc,
            "total_dose": self.total_dose,
            "bleached_count": self.bleached_count,
        }


def _crossings(samples, p_star):
    """Crossing times of p_star from consecutive (t, theta) samples.

    A crossing lies between two samples when the forward distance from
    the earlier phase to p_star is strictly less than the forward advance
    across the interval; its time is placed by linear interpolation.
    """
    out = []
    for (t0, th0), (t1, th1) in zip(samples, samples[1:]):
        gap = forward_distance(th0, th1)
        if gap <= 0:
            continue
        to_star = forward_distance(th0, p_star)
        if to_star < gap:
            out.append(t0 + (to_star / gap) * (t1 - t0))
    return out


def _validate_rows(acquisition_log, oracle_log, run_id):
    acq_rows = [tuple(r) for r in acquisition_log]
    orc_rows = [tuple(r) for r in oracle_log]
    if run_id is not None:
        for r in acq_rows + orc_rows:
            if r[0] != run_id:
                raise ValueError(f"log row from run {r[0]!r}, expected {run_id!r}")
    return acq_rows, orc_rows


def _oracle_by_object(orc_rows):
    by_obj = {}
    for _, t_s, obj, theta, _omega, dose in orc_rows:
        by_obj.setdefault(obj, []).append((float(t_s), float(theta), float(dose)))
    for rows in by_obj.values():
        rows.sort(key=lambda r: r[0])
    return by_obj


def _assign(acq_rows, by_obj_oracle, specs):
    """Match acquisitions to event crossings.

    Returns (events_occurred, captured_keys, flags) where flags[k] says
    whether acquisition row k landed inside some spec's window, and
    captured_keys is the set of distinct (spec_index, object, crossing)
    claimed by such rows.
    """
    events_occurred = 0
    crossings_by = {}
    for si, spec in enumerate(specs):
        for obj, rows in sorted(by_obj_oracle.items()):
            samples = [(t, th) for t, th, _ in rows]
            cr = _crossings(samples, spec.p_star)
            crossings_by[(si, obj)] = cr
            events_occurred += len(cr)

    captured = set()
    flags = [False] * len(acq_rows)
    for k, (_, t_acq, obj, phase) in enumerate(acq_rows):
        t_acq = float(t_acq)
        phase = float(phase)
        for si, spec in enumerate(specs):
            if circular_distance(phase, spec.p_star) > spec.window_w / 2.0:
                continue
            cr = crossings_by.get((si, obj), ())
            if not cr:
                continue
            nearest = min(range(len(cr)), key=lambda i: abs(cr[i] - t_acq))
            captured.add((si, obj, nearest))
            flags[k] = True
    return events_occurred, captured, flags


def capture_flags(acquisition_log, oracle_log, specs, run_id=None):
    """Per-acquisition captured booleans, aligned with the input rows."""
    acq_rows, orc_rows = _validate_rows(acquisition_log, oracle_log, run_id)
    _, _, flags = _assign(acq_rows, _oracle_by_object(orc_rows), specs)
    return flags


def evaluate_run(acquisition_log, oracle_log, specs, dose_budget=None, run_id=None):
    """Compute capture metrics from the acquisition and oracle logs.

    ``acquisition_log`` rows: (run_id, t_s, object_id, true_phase).
    ``oracle_log`` rows: (run_id, t_s, object_id, theta, omega, dose).
    When ``run_id`` is given, every row must carry it.
    """
    acq_rows, orc_rows = _validate_rows(acquisition_log, oracle_log, run_id)
    by_obj_oracle = _oracle_by_object(orc_rows)
    events_occurred, captured, _ = _assign(acq_rows, by_obj_oracle, specs)
    events_captured = len(captured)

    total_dose = 0.0
    bleached = 0
    for obj, rows in by_obj_oracle.items():
        final_dose = rows[-1][2]
        total_dose += final_dose
        if dose_budget is not None and final_dose > dose_budget:
            bleached += 1

    rate = events_captured / events_occurred if events_occurred else 0.0
    total = len(acq_rows)
    apc = total / events_captured if events_captured else float("inf")
    return Metrics(
        events_occurred=events_occurred,
        events_captured=events_captured,
        capture_rate=rate,
        acquisitions_total=total,
        acquisitions_per_capture=apc,
        total_dose=total_dose,
        bleached_count=bleached,
    )
