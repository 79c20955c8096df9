"""Serial-instrument schedules: event captures, staleness refresh, queries.

The planner is a pure function of its inputs.  Capture candidates get
greedy earliest-deadline-first treatment on their window ends; remaining
instrument time is filled with verify acquisitions for stale tracks and
with active-learning queries, never displacing a scheduled capture.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from cyclepilot.planner.tracks import predict_event_time
from cyclepilot.sim.microscope import travel_time_s

__all__ = [
    "PlannedAcquisition",
    "PlannerConfig",
    "plan",
    "round_robin_plan",
    "schedule_to_csv_rows",
]

# Verify and query acquisitions keep a reserve below the hard dose budget
# so event captures never find the budget exhausted by housekeeping.
SOFT_DOSE_FRACTION = 0.8

# A capture for the same object is not re-planned within this fraction of
# a cycle after the last executed capture.  Half the default window, so a
# track whose prediction wobbles gets a second attempt inside the same
# window but never a burst of them.
CAPTURE_COOLDOWN_CYCLES = 0.04


@dataclass(frozen=True)
class PlannedAcquisition:
    """One planned instrument action: go to the object, acquire at t_s."""

    t_s: float
    object_id: int
    purpose: str  # capture | verify | al_query
    event_id: str | None = None
    approved: str = "auto"  # auto | pending | rejected
    acq_id: int = -1

    def __post_init__(self):
        if self.purpose not in ("capture", "verify", "al_query"):
            raise ValueError(f"unknown purpose {self.purpose!r}")
        if self.purpose == "capture" and self.event_id is None:
            raise ValueError("capture acquisitions must reference an event")
        if self.approved not in ("auto", "pending", "rejected"):
            raise ValueError(f"unknown approval state {self.approved!r}")


@dataclass(frozen=True)
class PlannerConfig:
    """Scheduling knobs; al_quota is filled per call by the orchestrator's
    hourly token bucket so that plan itself stays pure."""

    k: float = 1.0
    window_w: float = 0.05
    replan_interval_s: float = 5.0
    al_budget_per_h: float = 12.0
    tau_stale: float = 0.25
    horizon_s: float = 120.0
    p_star: float = 0.0
    exposure: float = 1.0
    approval_mode: bool = False
    al_quota: int = 0
    # Tracks whose next predicted event lands within this many seconds jump
    # the verify queue; 0 disables the fast lane (useful while predictions
    # are too poor to aim refreshes with).
    refresh_lookahead_s: float = 240.0


def _clamp(x, lo, hi):
    return max(lo, min(hi, x))


@dataclass
class _Cursor:
    """Instrument timeline under construction."""

    free_s: float
    pos_um: tuple[float, float]
    mic: object
    items: list = field(default_factory=list)

    def try_add(self, track, t_target, deadline, entry):
        """Serve ``entry`` at the earliest time >= t_target, unless that
        misses ``deadline``; returns the scheduled copy or None."""
        travel = travel_time_s(self.mic, self.pos_um, track.pos_um)
        earliest = self.free_s + travel
        if earliest > deadline:
            return None
        start = max(t_target, earliest)
        scheduled = replace(entry, t_s=start)
        self.items.append(scheduled)
        self.free_s = start
        self.pos_um = track.pos_um
        return scheduled


def plan(tracks, specs, mic, now_s, horizon_s, cfg, dose_budget):
    """Schedule captures, verify refreshes, and AL queries in one horizon.

    Deterministic in its inputs: candidate order is (deadline, object_id)
    for captures and (v descending, object_id) for fills; consecutive
    calls with unchanged inputs produce identical schedules.
    """
    if horizon_s <= 0:
        raise ValueError("horizon_s must be positive")
    tracks = sorted(tracks, key=lambda t: t.object_id)
    cursor = _Cursor(free_s=max(now_s, mic.busy_until_s), pos_um=mic.stage_pos_um, mic=mic)

    # Capture candidates: predicted event inside the horizon, dose left.
    candidates = []
    for track in tracks:
        if not track.obs or track.omega_hat <= 0:
            continue
        for spec in specs:
            if track.dose + spec.exposure > dose_budget:
                continue
            if (
                track.last_capture_s is not None
                and now_s - track.last_capture_s < CAPTURE_COOLDOWN_CYCLES / track.omega_hat
            ):
                continue
            t_hat, sigma_t = predict_event_time(track, spec, now_s)
            if t_hat > now_s + horizon_s:
                continue
            w_t = spec.window_w / track.omega_hat
            win_lo, win_hi = t_hat - w_t / 2.0, t_hat + w_t / 2.0
            arrival = _clamp(t_hat - cfg.k * sigma_t, win_lo, win_hi)
            arrival = max(arrival, now_s)
            candidates.append((win_hi, track.object_id, track, spec, arrival))

    candidates.sort(key=lambda c: (c[0], c[1]))
    scheduled_ids = set()
    for win_hi, object_id, track, spec, arrival in candidates:
        if object_id in scheduled_ids:
            continue
        entry = PlannedAcquisition(
            t_s=arrival,
            object_id=object_id,
            purpose="capture",
            event_id=spec.id,
            approved="pending" if cfg.approval_mode else "auto",
        )
        if cursor.try_add(track, arrival, win_hi, entry) is not None:
            scheduled_ids.add(object_id)

    # The capture timeline is frozen; fills may only use the slack before
    # each capture's departure.
    captures = cursor.items
    pos_map = {t.object_id: t.pos_um for t in tracks}
    fills = _gap_fill(tracks, captures, pos_map, mic, now_s, horizon_s, cfg, dose_budget, scheduled_ids, specs)
    out = sorted(captures + fills, key=lambda a: (a.t_s, a.object_id))
    return out


def _nearest_chain(cands, start_pos):
    """Greedy travel order: repeatedly hop to the closest remaining track."""
    ordered = []
    pos = start_pos
    remaining = {t.object_id: t for t in cands}
    while remaining:
        nxt = min(
            remaining.values(),
            key=lambda t: (
                (t.pos_um[0] - pos[0]) ** 2 + (t.pos_um[1] - pos[1]) ** 2,
                t.object_id,
            ),
        )
        ordered.append(nxt)
        pos = nxt.pos_um
        del remaining[nxt.object_id]
    return ordered


def _alternating_chain(first, second, start_pos):
    """Interleave two track pools 1:1, each pick nearest to the cursor.

    Serving one pool to exhaustion before the other would let it consume
    the whole fill budget; alternating guarantees both pools drain at the
    same rate while hops stay short.
    """
    pools = [
        {t.object_id: t for t in first},
        {t.object_id: t for t in second},
    ]
    ordered = []
    pos = start_pos
    turn = 0
    while pools[0] or pools[1]:
        pool = pools[turn] if pools[turn] else pools[1 - turn]
        nxt = min(
            pool.values(),
            key=lambda t: (
                (t.pos_um[0] - pos[0]) ** 2 + (t.pos_um[1] - pos[1]) ** 2,
                t.object_id,
            ),
        )
        ordered.append(nxt)
        pos = nxt.pos_um
        del pool[nxt.object_id]
        turn = 1 - turn
    return ordered


def _gap_fill(tracks, captures, pos_map, mic, now_s, horizon_s, cfg, dose_budget, taken, specs=()):
    """Verify stale tracks, then AL-query uncertain ones, in capture slack.

    Each fill is placed at the earliest instant that still lets the stage
    reach every remaining capture on time.  Eligibility is by staleness;
    priority spends the scarce verify budget where it buys captures:
    never-observed tracks go first (they cannot be captured at all until
    seen), then tracks whose next predicted event is close (a fresh phase
    right before the window is what the capture attempt aims with)
    alternate with the stale remainder.  Picks are nearest-first from the
    stage so the sweep acquires instead of travelling.  AL queries rank
    by uncertainty (v descending), up to ``cfg.al_quota``.
    """
    verify_cands = []
    al_cands = []
    for track in tracks:
        if track.dose + cfg.exposure > SOFT_DOSE_FRACTION * dose_budget:
            continue
        if track.object_id in taken:
            continue
        v = track.last_v if track.last_v is not None else 0.25
        # Never-observed tracks are infinitely stale and rank as maximally
        # uncertain, so discovery happens through the same verify channel.
        if track.stale_s(now_s) > cfg.tau_stale / track.omega_hat:
            verify_cands.append(track)
        if track.obs:
            al_cands.append((-v, track.object_id, track, "al_query"))
    al_cands.sort(key=lambda c: (c[0], c[1]))
    al_cands = al_cands[: max(0, int(cfg.al_quota))]

    # Unseen tracks go first: nothing downstream works until the object
    # has been imaged once.  The rest rotate nearest-first; rotation keeps
    # every phase of every cycle flowing into the sample bank, which the
    # next refit depends on far more than any targeted revisit.
    unseen = [t for t in verify_cands if not t.obs]
    rest = [t for t in verify_cands if t.obs]
    chain = _nearest_chain(unseen, mic.stage_pos_um)
    chain += _nearest_chain(rest, chain[-1].pos_um if chain else mic.stage_pos_um)
    ordered = [(t.object_id, t, "verify") for t in chain]
    ordered.extend((oid, track, purpose) for _, oid, track, purpose in al_cands)

    fills = []
    fill_ids = set()
    for object_id, track, purpose in ordered:
        if object_id in fill_ids:
            continue
        slot = _earliest_slot(captures + fills, pos_map, mic, now_s, horizon_s, track.pos_um)
        if slot is None:
            continue
        fills.append(
            PlannedAcquisition(t_s=slot, object_id=object_id, purpose=purpose)
        )
        fill_ids.add(object_id)
    return fills


def _earliest_slot(timeline, pos_map, mic, now_s, horizon_s, target_pos):
    """Earliest service time for target_pos that keeps every timeline entry
    reachable on time; None if no such slot exists within the horizon.

    Candidate slots are probed from the instrument's free state and after
    each timeline entry; a slot is valid when the stage can still travel
    from the fill target to the next pinned entry by its start time.
    """
    entries = sorted(timeline, key=lambda a: (a.t_s, a.object_id))
    probe_points = [(max(now_s, mic.busy_until_s), mic.stage_pos_um)]
    for a in entries:
        probe_points.append((a.t_s, pos_map[a.object_id]))

    for idx, (probe_t, probe_pos) in enumerate(probe_points):
        arrive = probe_t + travel_time_s(mic, probe_pos, target_pos)
        if arrive > now_s + horizon_s:
            continue
        nxt = entries[idx] if idx < len(entries) else None
        if nxt is None:
            return arrive
        if arrive + travel_time_s(mic, target_pos, pos_map[nxt.object_id]) <= nxt.t_s:
            return arrive
    return None


def round_robin_plan(tracks, mic, now_s, horizon_s, resume_after=None):
    """Baseline: cycle object ids as fast as motion latency allows.

    Ignores pseudo-time entirely.  ``resume_after`` is the id served last
    by the previous plan so consecutive plans continue the cycle instead
    of restarting at the lowest id.  Deterministic in its inputs.
    """
    tracks = sorted(tracks, key=lambda t: t.object_id)
    if not tracks:
        return []
    ids = [t.object_id for t in tracks]
    start = 0
    if resume_after is not None and resume_after in ids:
        start = (ids.index(resume_after) + 1) % len(ids)
    t = max(now_s, mic.busy_until_s)
    pos = mic.stage_pos_um
    out = []
    k = start
    while True:
        track = tracks[k % len(tracks)]
        arrive = t + travel_time_s(mic, pos, track.pos_um)
        if out and arrive <= t:
            # Revisiting the current position: pace at the base latency so
            # repeated acquisitions of one object cannot pile up at one
            # instant.
            arrive = t + mic.move_latency_base_s
        if arrive > now_s + horizon_s:
            if out:
                break
            # A single hop can outlast the whole horizon on a large field;
            # emit it anyway or the rotation never advances past it.
            out.append(PlannedAcquisition(t_s=arrive, object_id=track.object_id, purpose="verify"))
            break
        out.append(PlannedAcquisition(t_s=arrive, object_id=track.object_id, purpose="verify"))
        t = arrive
        pos = track.pos_um
        k += 1
        if len(out) >= 10000:
            break
    return out


def schedule_to_csv_rows(schedule):
    """Stable textual rows (t_s, object_id, purpose, event_id, approved)."""
    rows = [("t_s", "object_id", "purpose", "event_id", "approved")]
    for a in sorted(schedule, key=lambda a: (a.t_s, a.object_id)):
        rows.append(
            (
                f"{a.t_s:.6f}",
                str(a.object_id),
                a.purpose,
                "" if a.event_id is None else str(a.event_id),
                a.approved,
            )
        )
    return rows
