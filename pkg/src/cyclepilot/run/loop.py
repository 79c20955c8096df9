"""The experiment event loop.

One deterministic loop drives everything: advance the simulated stage,
execute the planned acquisitions, turn frames into fingerprints and
pseudo-time estimates, keep per-object tracks current, query the expert
within budget, refit the cycle model when residuals drift, and log what
happened.  Commands from the control API land in a queue and are applied
between ticks, so any number of read-only observers can watch a run
without perturbing it.
"""

from __future__ import annotations

import base64
import math
import os
import queue
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace

import numpy as np

from cyclepilot.extract import InvalidRegionError, extract_crop, segment
from cyclepilot.fingerprint.analytic import encode_analytic
from cyclepilot.fingerprint.autoencoder import TrainConfig, encode_learned, train_autoencoder
from cyclepilot.planner.evaluation import evaluate_run
from cyclepilot.planner.scheduling import (
    SOFT_DOSE_FRACTION,
    PlannedAcquisition,
    PlannerConfig,
    plan,
    round_robin_plan,
)
from cyclepilot.planner.tracks import EventSpec, new_track, update_track
from cyclepilot.pseudotime.angles import UndefinedCorrelationError, circular_corr, circular_distance
from cyclepilot.pseudotime.circlefit import DegenerateGeometryError
from cyclepilot.pseudotime.model import (
    Anchor,
    FitHyper,
    SequencePair,
    encode_cycle_model,
    fit_cycle_model,
    load_cycle_model,
    predict,
)
from cyclepilot.run.config import RunConfig, config_hash
from cyclepilot.run.expert import ExpertQuery, ScriptedOracle
from cyclepilot.sim.microscope import acquire, move_to, travel_time_s
from cyclepilot.sim.types import MicroscopeState
from cyclepilot.sim.world import advance, make_world, oracle_snapshot
from cyclepilot.store import ExperimentContext, KnowledgeStore, ModelCard

__all__ = [
    "CommandRejected",
    "RunReport",
    "RunState",
    "retrain_trigger",
    "run_experiment",
]

# Training pairs separated by more than this fraction of the prior period
# are dropped: their angular gap is ambiguous mod 1.
MAX_PAIR_FRACTION = 0.45

# Expert labels are dead-reckoned along their object's timeline up to this
# fraction of a period away; rate dispersion makes them drift a few percent
# of a cycle over that span, hence the reduced weight.
PSEUDO_ANCHOR_SPAN_CYCLES = 0.35
PSEUDO_ANCHOR_WEIGHT = 0.3

# Minimum data before the first fit is attempted.
MIN_FIT_SAMPLES = 50
MIN_FIT_PAIRS = 10

# Accumulated-crop cap for refits; newest samples win.
FIT_SAMPLE_CAP = 5000

# Bootstrap rotation: with many objects a full round-robin pass revisits
# each one too far apart to yield unambiguous sequence pairs, so the
# rotation cycles batches of this size until each member has been
# acquired a few times, then advances.
BOOT_BATCH = 40
BOOT_VISITS = 3

# Bootstrap round-robin ends at this fraction of the run, or at this many
# seconds, whichever is sooner; long runs should not burn a fixed fifth of
# their horizon on unplanned coverage.
BOOTSTRAP_FRACTION = 0.2
BOOTSTRAP_MAX_S = 600.0

# Observations closer together than this fraction of the nominal period do
# not enter the track: over such short steps the estimate noise exceeds the
# true angular advance, and the wrapped forward gap would corrupt the rate
# EMA (a tiny backward error reads as a near-full forward cycle).
MIN_TRACK_GAP_CYCLES = 0.12

# Objects whose nearest neighbour sits closer than this fraction of the
# viewport edge risk merged or contaminated segmentations; their crops are
# still estimated but never banked for training or anchoring.
ISOLATION_VIEW_FRACTION = 0.75

# Observation fusion floors.  A single projected phase is too noisy to aim
# a capture window with, so each accepted observation is blended against
# the track's own extrapolation, inverse-variance weighted.  The floors
# keep the blend sane while the model's v and the track's rate scatter are
# still warming up; the posterior floor accounts for model bias that no
# amount of same-model averaging removes.
FUSE_MEAS_SD_FLOOR = 0.04
FUSE_RATE_REL_FLOOR = 0.05
FUSE_POST_SD_FLOOR = 0.02

# Stored models with at least this circular correlation against expert
# labels are loaded instead of refit, once per card per run.
REUSE_MIN_CORR = 0.85

# Event-aimed refreshes switch on once the model validates at least this
# well against expert labels; the lookahead is how far ahead of a predicted
# event a track jumps the verify queue.
REFRESH_MIN_CORR = 0.75
REFRESH_LOOKAHEAD_S = 120.0


class CommandRejected(ValueError):
    """A posted command failed validation.

    ``reason`` is "not_found" for unknown ids and "invalid" for malformed
    payloads; servers can map these onto their own status codes.
    """

    def __init__(self, reason, message):
        super().__init__(message)
        self.reason = reason


def retrain_trigger(residuals, policy, now_s=None, last_event_s=None):
    """Decide whether drift warrants a refit.

    True iff at least ``trigger_fraction`` of the last ``window_n``
    residuals exceed ``residual_threshold``; fewer than ``window_n``
    residuals is insufficient evidence.  When ``now_s`` and
    ``last_event_s`` are both given, the minimum interval since the last
    fit must also have elapsed.
    """
    recent = list(residuals)[-policy.window_n :]
    if len(recent) < policy.window_n:
        return False
    if now_s is not None and last_event_s is not None:
        if now_s - last_event_s < policy.min_interval_s:
            return False
    exceed = sum(1 for r in recent if r > policy.residual_threshold)
    return exceed >= policy.trigger_fraction * policy.window_n


@dataclass
class Sample:
    """One banked observation: normalized crop plus its fingerprint.

    ``extras`` are the extraction-geometry features appended to the
    backend encoding; kept separately so fingerprints can be rebuilt
    when the learned backend trains.
    """

    index: int
    object_id: int
    t_s: float
    pixels: np.ndarray
    fingerprint: np.ndarray
    extras: np.ndarray


@dataclass
class RunReport:
    """End-of-run summary; ``metrics`` is None only for aborted runs."""

    run_id: str
    config_hash: str
    seeds: dict
    duration_s: float
    metrics: object = None
    edp_versions: list = field(default_factory=list)
    al_queries_issued: int = 0
    retrain_events: list = field(default_factory=list)
    anchors_collected: int = 0
    commands_applied: int = 0
    aborted: bool = False
    abort_reason: str = ""

    def to_dict(self):
        return {
            "run_id": self.run_id,
            "config_hash": self.config_hash,
            "seeds": dict(self.seeds),
            "duration_s": self.duration_s,
            "metrics": self.metrics.to_dict() if self.metrics is not None else None,
            "edp_versions": list(self.edp_versions),
            "al_queries_issued": self.al_queries_issued,
            "retrain_events": [[t, reason] for t, reason in self.retrain_events],
            "anchors_collected": self.anchors_collected,
            "commands_applied": self.commands_applied,
            "aborted": self.aborted,
            "abort_reason": self.abort_reason,
        }


@dataclass
class _ApprovalEntry:
    acq_id: int
    object_id: int
    event_id: str
    t_s: float
    expires_s: float
    status: str = "pending"  # pending | approve | reject


def _pgm_b64(pixels) -> str:
    """8-bit binary PGM of a crop, base64 encoded."""
    px = np.asarray(pixels, dtype=float)
    lo, hi = float(px.min()), float(px.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    img = np.clip((px - lo) * scale, 0, 255).astype(np.uint8)
    h, w = img.shape
    raw = f"P5 {w} {h} 255\n".encode("ascii") + img.tobytes()
    return base64.b64encode(raw).decode("ascii")


def _geometry_extras(region, crop) -> np.ndarray:
    """Scale and outline features the resampled crop no longer carries.

    The crop is resampled from the region's padded bbox to a fixed size,
    which normalizes away absolute scale; yet scale is where much of the
    cycle expresses itself.  Region area, window area, and contour length
    per sqrt(area) are rotation- and brightness-insensitive proxies.
    """
    wx0, wy0, wx1, wy1 = crop.bbox
    area = max(region.area_px, 1)
    return np.array([
        math.log(area),
        math.log(max((wx1 - wx0) * (wy1 - wy0), 1)),
        len(region.contour) / math.sqrt(area),
    ])


class RunState:
    """Everything one run owns: world, instrument, model, logs, queues.

    The loop thread is the single writer.  ``snapshot()`` hands out the
    immutable dict built at the end of the latest tick; ``post_command``
    validates against current state and enqueues for the next tick.
    """

    def __init__(self, cfg: RunConfig, expert=None, run_id=None, baseline=None):
        cfg.validate()
        if baseline not in (None, "planner", "round-robin"):
            raise ValueError(f"unknown baseline {baseline!r}")
        self.baseline = baseline or "planner"
        self.cfg = cfg
        self.config_hash = config_hash(cfg)
        self.run_id = run_id or self.config_hash[:12]
        self.world = make_world(cfg.sim)
        self.mic = MicroscopeState()
        self.expert = expert if expert is not None else ScriptedOracle(seed=cfg.sim.seed + 1)
        self.store = KnowledgeStore(cfg.store_dir) if cfg.store_dir else None

        self.tracks = {}
        self._sync_tracks()
        self.specs = [
            EventSpec(
                id="primary",
                p_star=cfg.planner.p_star,
                window_w=cfg.planner.window_w,
                exposure=cfg.planner.exposure,
            )
        ]

        self.model = None
        self.edp_version = 0
        self.edp_versions = []
        self.samples: list[Sample] = []
        self.pairs: list[SequencePair] = []
        self.anchors: list[Anchor] = []
        self.anchor_rows = []  # (t_s, query_id, object_id, p, weight)
        self._samples_by_obj = defaultdict(list)
        self._ae_model = None

        self.residuals = deque(maxlen=cfg.retrain.window_n)
        self.retrain_events = []
        self._last_fit_s = None
        self._val_corr = 0.0

        self.acq_rows = []  # (run_id, t_s, object_id, true_phase) for evaluation
        self.acq_detail = []  # dicts for the acquisitions table
        self.oracle_rows = []  # (run_id, t_s, object_id, theta, omega, dose)

        self.pending_al = {}
        self.al_queries_issued = 0
        self._next_query_id = 1
        self._al_tokens = 1.0 if cfg.planner.al_budget_per_h > 0 else 0.0
        self._last_al_s = {}

        self._approvals = {}
        self._next_acq_id = 1
        self.rejected_log = []  # (t_s, acq_id, object_id, reason)

        self.paused = False
        self.finished = False
        self.abort_reason = ""
        self.commands_applied = 0
        self._commands = queue.Queue()
        self._ack_lock = threading.Lock()
        self._next_ack = 1

        self._rr_cursor = None
        self._boot_target = BOOT_VISITS
        self._visit_count = {}
        self._reused_cards = set()
        self._tick_index = 0
        self._current_plan = []

        self._snap_lock = threading.Lock()
        self._snapshot = None
        self._listeners = []
        self._publish_snapshot()

    # -- public surface ----------------------------------------------------

    def snapshot(self):
        with self._snap_lock:
            return self._snapshot

    def add_listener(self):
        """Register a per-connection queue fed one snapshot per tick."""
        q = queue.Queue(maxsize=4096)
        with self._snap_lock:
            self._listeners.append(q)
            q.put(self._snapshot)
        return q

    def remove_listener(self, q):
        with self._snap_lock:
            if q in self._listeners:
                self._listeners.remove(q)

    def post_command(self, cmd: dict) -> dict:
        """Validate and enqueue a command; returns {"ack_id", "kind"}."""
        if not isinstance(cmd, dict) or "kind" not in cmd:
            raise CommandRejected("invalid", "command must be an object with a 'kind'")
        kind = cmd["kind"]
        if kind == "label":
            qid = cmd.get("query_id")
            p = cmd.get("p")
            if not isinstance(qid, int):
                raise CommandRejected("invalid", "label needs an integer query_id")
            if not isinstance(p, (int, float)) or not 0.0 <= float(p) < 1.0:
                raise CommandRejected("invalid", "label p must be in [0, 1)")
            if qid not in self.pending_al:
                raise CommandRejected("not_found", f"no pending query {qid}")
        elif kind == "event_spec":
            try:
                EventSpec(
                    id=str(cmd.get("id", "")),
                    p_star=float(cmd.get("p_star", -1)),
                    window_w=float(cmd.get("window_w", 0.05)),
                    exposure=float(cmd.get("exposure", 1.0)),
                )
            except (TypeError, ValueError) as exc:
                raise CommandRejected("invalid", f"bad event spec: {exc}") from exc
            if not cmd.get("id"):
                raise CommandRejected("invalid", "event spec needs a non-empty id")
        elif kind == "decision":
            acq_id = cmd.get("acquisition_id")
            action = cmd.get("action")
            if action not in ("approve", "reject"):
                raise CommandRejected("invalid", "decision action must be approve|reject")
            if not isinstance(acq_id, int) or acq_id not in self._approvals:
                raise CommandRejected("not_found", f"no pending acquisition {acq_id}")
        elif kind in ("pause", "resume"):
            pass
        else:
            raise CommandRejected("invalid", f"unknown command kind {kind!r}")
        with self._ack_lock:
            ack = self._next_ack
            self._next_ack += 1
        self._commands.put((ack, dict(cmd)))
        return {"ack_id": ack, "kind": kind}

    def run(self, pace=None):
        """Execute the whole run; ``pace`` is sim-seconds per wall-second
        (None = as fast as possible)."""
        cfg = self.cfg
        r = cfg.planner.replan_interval_s
        self._emit_oracle_rows(0.0)
        t = 0.0
        try:
            while t < cfg.duration_s:
                tick_end = min(t + r, cfg.duration_s)
                wall_start = time.monotonic()
                self._drain_commands()
                while self.paused:
                    self._drain_commands(block_s=0.05)
                self._answer_scripted()
                self._sync_tracks()
                self._expire_approvals(t)
                self._maybe_fit(t)
                self._al_tokens = min(
                    1.0, self._al_tokens + r * cfg.planner.al_budget_per_h / 3600.0
                )
                entries = self._plan_tick(t, tick_end)
                for entry in entries:
                    self._execute(entry, tick_end)
                if self.world.now_s < tick_end:
                    advance(self.world, tick_end - self.world.now_s)
                self._emit_oracle_rows(tick_end)
                self._tick_index += 1
                self._publish_snapshot()
                t = tick_end
                if pace is not None and pace > 0:
                    budget = r / pace
                    elapsed = time.monotonic() - wall_start
                    if budget > elapsed:
                        time.sleep(budget - elapsed)
        except Exception as exc:  # pragma: no cover - surfaced to callers
            self.abort_reason = f"{type(exc).__name__}: {exc}"
            self.finished = True
            self._publish_snapshot()
            raise
        self.finished = True
        self._publish_snapshot()
        return self.build_report()

    def build_report(self) -> RunReport:
        metrics = None
        if not self.abort_reason:
            metrics = evaluate_run(
                self.acq_rows,
                self.oracle_rows,
                self.specs,
                dose_budget=self.cfg.sim.dose_budget,
                run_id=self.run_id,
            )
        return RunReport(
            run_id=self.run_id,
            config_hash=self.config_hash,
            seeds={"sim": self.cfg.sim.seed, "fingerprint": self.cfg.fingerprint.ae.seed},
            duration_s=self.cfg.duration_s,
            metrics=metrics,
            edp_versions=list(self.edp_versions),
            al_queries_issued=self.al_queries_issued,
            retrain_events=list(self.retrain_events),
            anchors_collected=len(self.anchors),
            commands_applied=self.commands_applied,
            aborted=bool(self.abort_reason),
            abort_reason=self.abort_reason,
        )

    # -- tick pieces ---------------------------------------------------------

    def _sync_tracks(self):
        self._world_by_id = {o.id: o for o in self.world.objects}
        prior = 1.0 / self.cfg.sim.period_mean_s
        added = False
        for obj in self.world.objects:
            if obj.id not in self.tracks:
                self.tracks[obj.id] = new_track(obj.id, prior, obj.pos_um)
                added = True
        if added or not hasattr(self, "_isolated"):
            self._refresh_isolation()

    def _refresh_isolation(self):
        limit = ISOLATION_VIEW_FRACTION * self.cfg.sim.crop_px * self.cfg.sim.pixel_size_um
        objs = self.world.objects
        pos = np.array([o.pos_um for o in objs], dtype=float)
        self._isolated = {}
        for i, obj in enumerate(objs):
            d = np.hypot(pos[:, 0] - pos[i, 0], pos[:, 1] - pos[i, 1])
            d[i] = np.inf
            self._isolated[obj.id] = bool(d.min() >= limit)

    def _sorted_tracks(self):
        return [self.tracks[k] for k in sorted(self.tracks)]

    def _drain_commands(self, block_s=None):
        while True:
            try:
                if block_s is None:
                    ack, cmd = self._commands.get_nowait()
                else:
                    ack, cmd = self._commands.get(timeout=block_s)
            except queue.Empty:
                return
            self._apply_command(cmd)
            self.commands_applied += 1
            block_s = None

    def _apply_command(self, cmd):
        kind = cmd["kind"]
        if kind == "pause":
            self.paused = True
            self._publish_snapshot()
        elif kind == "resume":
            self.paused = False
            self._publish_snapshot()
        elif kind == "label":
            query = self.pending_al.pop(cmd["query_id"], None)
            if query is not None:
                self._accept_label(query, float(cmd["p"]))
        elif kind == "event_spec":
            spec = EventSpec(
                id=str(cmd["id"]),
                p_star=float(cmd["p_star"]),
                window_w=float(cmd.get("window_w", 0.05)),
                exposure=float(cmd.get("exposure", 1.0)),
            )
            self.specs = [s for s in self.specs if s.id != spec.id] + [spec]
        elif kind == "decision":
            entry = self._approvals.get(cmd["acquisition_id"])
            if entry is not None and entry.status == "pending":
                entry.status = cmd["action"]

    def _accept_label(self, query: ExpertQuery, p: float):
        self.anchors.append(Anchor(index=query.sample_index, p_true=p, weight=1.0))
        self.anchor_rows.append(
            (self.world.now_s, query.query_id, query.object_id, p, 1.0)
        )

    def _answer_scripted(self):
        if not hasattr(self.expert, "drain"):
            return
        for qid, p in self.expert.drain(self.pending_al):
            query = self.pending_al.pop(qid)
            self._accept_label(query, p)

    def _plan_tick(self, t, tick_end):
        cfg = self.cfg
        tracks = self._sorted_tracks()
        bootstrap = self.model is None or t < self._boot_horizon_s()
        if self.baseline == "round-robin":
            sched = round_robin_plan(tracks, self.mic, t, cfg.planner.replan_interval_s,
                                     resume_after=self._rr_cursor)
        elif bootstrap:
            sched = round_robin_plan(self._bootstrap_tracks(tracks), self.mic, t,
                                     cfg.planner.replan_interval_s,
                                     resume_after=self._rr_cursor)
            if self._al_tokens >= 1.0:
                for k, entry in enumerate(sched):
                    if self._isolated.get(entry.object_id, False):
                        sched[k] = replace(entry, purpose="al_query")
                        break
        else:
            pcfg = PlannerConfig(
                k=cfg.planner.k,
                window_w=cfg.planner.window_w,
                replan_interval_s=cfg.planner.replan_interval_s,
                al_budget_per_h=cfg.planner.al_budget_per_h,
                tau_stale=cfg.planner.tau_stale,
                horizon_s=cfg.planner.horizon_s,
                p_star=cfg.planner.p_star,
                exposure=cfg.planner.exposure,
                approval_mode=cfg.planner.approval_mode,
                al_quota=int(self._al_tokens),
                # Aimed refreshes only pay off once predictions can aim them;
                # before that the verify budget buys more as phase-diverse
                # rotation (training coverage for the next refit).
                refresh_lookahead_s=(
                    REFRESH_LOOKAHEAD_S if self._val_corr >= REFRESH_MIN_CORR else 0.0
                ),
            )
            sched = plan(tracks, self.specs, self.mic, t, cfg.planner.horizon_s,
                         pcfg, cfg.sim.dose_budget)
            sched = self._redirect_al(sched)
            sched = self._force_due_al(sched, t, tick_end)
            if cfg.planner.approval_mode:
                sched = [self._register_approval(a, t) for a in sched]
        self._current_plan = sched
        runnable = [a for a in sched if a.t_s < tick_end and a.t_s < cfg.duration_s]
        if not runnable and sched and sched[0].t_s < cfg.duration_s:
            # A hop longer than the replan interval arrives after the tick
            # though the move must begin now.  Deferring it would replan
            # the same unreachable target forever, so commit to the first
            # such move and let it span ticks.  Targets whose arrival lies
            # beyond the travel need (timed captures) still wait for a
            # fresher plan.
            first = sched[0]
            target = self.tracks[first.object_id].pos_um
            depart = max(t, self.mic.busy_until_s)
            if first.t_s <= depart + travel_time_s(self.mic, self.mic.stage_pos_um, target) + 1e-9:
                runnable = [first]
        if bootstrap and runnable:
            self._rr_cursor = runnable[-1].object_id
        return runnable

    def _redirect_al(self, sched):
        """Re-point label queries at isolated objects.

        Labels only bank when the crop is clean, so a query aimed at a
        crowded object would burn the slot without producing an anchor
        and the next replan would pick the same object again.
        """
        bad = [k for k, e in enumerate(sched)
               if e.purpose == "al_query" and not self._isolated.get(e.object_id, False)]
        if not bad:
            return sched
        sched = list(sched)
        spare = [k for k, e in enumerate(sched)
                 if e.purpose == "verify" and self._isolated.get(e.object_id, False)]
        for k in bad:
            sched[k] = replace(sched[k], purpose="verify")
            if spare:
                j = spare.pop(0)
                sched[j] = replace(sched[j], purpose="al_query")
        return sched

    def _force_due_al(self, sched, t, tick_end):
        """Spend a due label token even when the planner had no slack.

        Query fills rank last in the schedule, so while the model is poor
        every track reads stale and verify pressure squeezes queries out
        of the horizon indefinitely; that starves the fit of the labels
        that would relieve the pressure.  When a full token is waiting
        and no query made this tick, one is prepended at the object that
        has gone longest without a label (most uncertain on ties).
        """
        if self._al_tokens < 1.0:
            return sched
        if any(e.purpose == "al_query" and e.t_s < tick_end for e in sched):
            return sched
        budget = SOFT_DOSE_FRACTION * self.cfg.sim.dose_budget
        best = None
        for track in self._sorted_tracks():
            if not track.obs or not self._isolated.get(track.object_id, False):
                continue
            if track.dose + self.cfg.planner.exposure > budget:
                continue
            v = track.last_v if track.last_v is not None else 0.25
            key = (self._last_al_s.get(track.object_id, -1.0), -v, track.object_id)
            if best is None or key < best[0]:
                best = (key, track)
        if best is None:
            return sched
        entry = PlannedAcquisition(t_s=t, object_id=best[1].object_id, purpose="al_query")
        return [entry] + list(sched)

    def _track_gap_ok(self, track, t_s):
        if track.last_t_s is None:
            return True
        return t_s - track.last_t_s >= MIN_TRACK_GAP_CYCLES * self.cfg.sim.period_mean_s

    def _fuse_obs(self, track, t_s, est):
        """Blend a projected phase against the track's extrapolation.

        Inverse-variance weighting on the circle: the prior is the last
        observation advanced at omega_hat, widening with the rate scatter
        over the gap.  Returns the (p, v) actually fed to the track.
        """
        if not track.obs:
            return est.p, est.v
        t_prev, p_prev, v_prev = track.obs[-1]
        dt = t_s - t_prev
        p_prior = (p_prev + track.omega_hat * dt) % 1.0
        sig_rate = max(track.sigma_omega, FUSE_RATE_REL_FLOOR * track.omega_hat)
        var_prior = v_prev**2 + (sig_rate * dt) ** 2
        var_meas = max(est.v, FUSE_MEAS_SD_FLOOR) ** 2
        g = var_prior / (var_prior + var_meas)
        delta = ((est.p - p_prior) + 0.5) % 1.0 - 0.5
        p_obs = (p_prior + g * delta) % 1.0
        v_obs = (var_prior * var_meas / (var_prior + var_meas)) ** 0.5
        return p_obs, max(v_obs, FUSE_POST_SD_FLOOR)

    def _bootstrap_tracks(self, tracks):
        """Current bootstrap batch, advancing once every member is sampled.

        Revisit spacing within a batch of BOOT_BATCH stays well under half
        a period, so consecutive acquisitions of one object form usable
        training pairs.  When every batch has met the visit target the
        target is raised and the rotation wraps around.
        """
        n = len(tracks)
        if n <= BOOT_BATCH:
            return tracks
        for _ in range(2):
            for lo in range(0, n, BOOT_BATCH):
                batch = tracks[lo:lo + BOOT_BATCH]
                fewest = min(self._visit_count.get(t.object_id, 0) for t in batch)
                if fewest < self._boot_target:
                    return batch
            self._boot_target += BOOT_VISITS
        return tracks

    def _register_approval(self, entry, now_s):
        if entry.purpose != "capture":
            return entry
        track = self.tracks[entry.object_id]
        window_s = self.cfg.planner.window_w / track.omega_hat
        status_map = {"pending": "pending", "approve": "auto", "reject": "rejected"}
        for appr in self._approvals.values():
            if (
                appr.object_id == entry.object_id
                and appr.event_id == entry.event_id
                and abs(appr.t_s - entry.t_s) < 0.75 / track.omega_hat
            ):
                appr.t_s = entry.t_s
                appr.expires_s = entry.t_s + window_s
                return replace(entry, acq_id=appr.acq_id, approved=status_map[appr.status])
        acq_id = self._next_acq_id
        self._next_acq_id += 1
        self._approvals[acq_id] = _ApprovalEntry(
            acq_id=acq_id,
            object_id=entry.object_id,
            event_id=entry.event_id,
            t_s=entry.t_s,
            expires_s=entry.t_s + window_s,
        )
        return replace(entry, acq_id=acq_id, approved="pending")

    def _expire_approvals(self, now_s):
        for acq_id in sorted(self._approvals):
            appr = self._approvals[acq_id]
            if now_s > appr.expires_s:
                if appr.status == "pending":
                    self.rejected_log.append(
                        (now_s, acq_id, appr.object_id, "rejected_by_timeout")
                    )
                elif appr.status == "reject":
                    self.rejected_log.append((now_s, acq_id, appr.object_id, "rejected"))
                del self._approvals[acq_id]

    def _execute(self, entry, tick_end):
        track = self.tracks.get(entry.object_id)
        if track is None:
            return
        if entry.purpose == "capture" and self.cfg.planner.approval_mode:
            appr = self._approvals.get(entry.acq_id)
            if appr is None or appr.status != "approve":
                return
            del self._approvals[entry.acq_id]
        exposure = self._exposure_for(entry)
        if track.dose + exposure > self.cfg.sim.dose_budget:
            return
        target = tuple(track.pos_um)
        now = self.world.now_s
        if tuple(self.mic.stage_pos_um) != target:
            travel = travel_time_s(self.mic, self.mic.stage_pos_um, target)
            depart = max(entry.t_s - travel, now, self.mic.busy_until_s)
            if depart > now:
                advance(self.world, depart - now)
            move_to(self.mic, target, depart)
            start = max(self.mic.busy_until_s, entry.t_s)
        else:
            start = max(entry.t_s, now, self.mic.busy_until_s)
        if start > self.world.now_s:
            advance(self.world, start - self.world.now_s)
        half = 0.5 * self.cfg.sim.crop_px * self.cfg.sim.pixel_size_um
        viewport = (target[0] - half, target[1] - half, target[0] + half, target[1] + half)
        frame = acquire(self.world, self.mic, viewport, exposure, start,
                        object_id=entry.object_id)
        track.dose += exposure
        self._visit_count[entry.object_id] = self._visit_count.get(entry.object_id, 0) + 1
        if entry.purpose == "capture":
            track.last_capture_s = start
        self._process_frame(entry, track, frame, start)

    def _exposure_for(self, entry):
        if entry.purpose == "capture":
            for spec in self.specs:
                if spec.id == entry.event_id:
                    return spec.exposure
        return self.cfg.planner.exposure

    def _process_frame(self, entry, track, frame, t_s):
        oid = entry.object_id
        theta_true = self._world_by_id[oid].theta
        sample = None
        est = None
        regions = segment(frame, self.cfg.extraction)
        if regions:
            s = self.cfg.sim.crop_px
            cx = cy = s / 2.0
            region = min(
                regions,
                key=lambda r: (r.centroid[0] - cx) ** 2 + (r.centroid[1] - cy) ** 2,
            )
            try:
                crop = extract_crop(frame, region, s)
            except InvalidRegionError:
                crop = None
            if crop is not None and not crop.flat:
                extras = _geometry_extras(region, crop)
                fp = self._encode(crop, extras)
                if fp is not None and self.model is not None:
                    est = predict(self.model, fp)
                prev_banked = self._samples_by_obj[oid][-1] if self._samples_by_obj[oid] else None
                bank_gap_ok = (
                    prev_banked is None
                    or t_s - prev_banked.t_s >= MIN_TRACK_GAP_CYCLES * self.cfg.sim.period_mean_s
                )
                # Capture bursts around one window would otherwise flood the
                # bank with near-identical phases and skew the next fit.
                if fp is not None and self._isolated.get(oid, False) and bank_gap_ok:
                    sample = Sample(
                        index=len(self.samples),
                        object_id=oid,
                        t_s=t_s,
                        pixels=crop.pixels.astype(np.float32),
                        fingerprint=fp,
                        extras=extras,
                    )
                    period = self.cfg.sim.period_mean_s
                    # Pair against the newest banked sample far enough back
                    # that the angular gap dominates estimate noise; closer
                    # revisits add nothing to the rotation signal.
                    for prev in reversed(self._samples_by_obj[oid]):
                        dt = t_s - prev.t_s
                        if dt >= MIN_TRACK_GAP_CYCLES * period:
                            if dt <= MAX_PAIR_FRACTION * period:
                                self.pairs.append(
                                    SequencePair(i=prev.index, j=sample.index, dt_s=dt)
                                )
                            break
                    self.samples.append(sample)
                    self._samples_by_obj[oid].append(sample)

        if est is not None and track.obs:
            t_prev, p_prev, _ = track.obs[-1]
            p_extrap = (p_prev + track.omega_hat * (t_s - t_prev)) % 1.0
            self.residuals.append(circular_distance(p_extrap, est.p))
        if est is not None and self._track_gap_ok(track, t_s):
            p_obs, v_obs = self._fuse_obs(track, t_s, est)
            update_track(track, t_s, p_obs, v_obs)

        if entry.purpose == "al_query" and sample is not None:
            qid = self._next_query_id
            self._next_query_id += 1
            self.pending_al[qid] = ExpertQuery(
                query_id=qid,
                object_id=oid,
                t_s=t_s,
                crop_pixels=sample.pixels.copy(),
                est_p=None if est is None else est.p,
                true_p=theta_true,
                sample_index=sample.index,
            )
            self.al_queries_issued += 1
            self._al_tokens -= 1.0
            self._last_al_s[oid] = t_s
            self._answer_scripted()

        self.acq_rows.append((self.run_id, t_s, oid, theta_true))
        self.acq_detail.append(
            {
                "time_s": t_s,
                "object_id": oid,
                "purpose": entry.purpose,
                "true_phase": theta_true,
                "est_p": None if est is None else est.p,
                "est_v": None if est is None else est.v,
                "dose": track.dose,
            }
        )

    # -- fitting -------------------------------------------------------------

    def _boot_horizon_s(self):
        return min(BOOTSTRAP_FRACTION * self.cfg.duration_s, BOOTSTRAP_MAX_S)

    def _maybe_fit(self, now_s):
        cfg = self.cfg
        if self.baseline == "round-robin":
            return
        if self.model is None:
            if now_s < self._boot_horizon_s():
                return
            if len(self.samples) < MIN_FIT_SAMPLES or len(self.pairs) < MIN_FIT_PAIRS:
                return
            if self._last_fit_s is not None and now_s - self._last_fit_s < cfg.retrain.min_interval_s:
                return
            self._fit(now_s, reason="bootstrap")
            return
        if retrain_trigger(self.residuals, cfg.retrain, now_s=now_s,
                           last_event_s=self._last_fit_s):
            self._fit(now_s, reason="residual_drift")

    def _context(self) -> ExperimentContext:
        return ExperimentContext(
            object_class="two-lobe",
            channel="grayscale",
            generator_id=f"sim-seed-{self.cfg.sim.seed}",
            magnification=self.cfg.sim.pixel_size_um,
        )

    def _try_reuse(self):
        if self.store is None:
            return None
        want = self._context().tags()
        for card in self.store.query(self._context(), kind="model"):
            if card.context.tags() != want:
                break
            if card.id in self._reused_cards:
                continue
            if card.circular_corr >= REUSE_MIN_CORR:
                return card
        return None

    def _propagated_anchors(self):
        """Extend expert labels along each labeled object's own timeline.

        Within a fraction of a period of a labeled frame, elapsed time
        over the configured mean period dead-reckons the phase to within
        a few percent of a cycle, so nearby samples of the same object
        get the propagated label at reduced weight.  This multiplies
        scarce expert labels into enough soft ones to shape the fit.
        """
        period = self.cfg.sim.period_mean_s
        span = PSEUDO_ANCHOR_SPAN_CYCLES * period
        taken = {a.index for a in self.anchors}
        out = {}
        for a, (t_a, _qid, oid, _p, _w) in zip(self.anchors, self.anchor_rows):
            for s in self._samples_by_obj[oid]:
                if s.index in taken:
                    continue
                dt = s.t_s - t_a
                if abs(dt) > span:
                    continue
                p = (a.p_true + dt / period) % 1.0
                w = PSEUDO_ANCHOR_WEIGHT * a.weight * (1.0 - 0.5 * abs(dt) / span)
                prev = out.get(s.index)
                if prev is None or prev.weight < w:
                    out[s.index] = Anchor(index=s.index, p_true=p, weight=w)
        return [out[k] for k in sorted(out)]

    def _fit(self, now_s, reason):
        self._last_fit_s = now_s
        take = self.samples[-FIT_SAMPLE_CAP:]
        base = take[0].index
        if self.cfg.fingerprint.backend == "learned" and self._ae_model is None:
            self._train_ae(take)
        X = np.stack([s.fingerprint for s in take])
        pairs = [
            SequencePair(p.i - base, p.j - base, p.dt_s)
            for p in self.pairs
            if p.i >= base
        ]
        anchors = [
            Anchor(a.index - base, a.p_true, a.weight)
            for a in self.anchors
            if a.index >= base
        ]
        soft = [
            Anchor(a.index - base, a.p_true, a.weight)
            for a in self._propagated_anchors()
            if a.index >= base
        ]

        card = self._try_reuse()
        if card is not None:
            model = load_cycle_model(os.path.join(self.store.root, card.path))
            self._reused_cards.add(card.id)
            reason = f"{reason}+reused-card-{card.id}"
            self._val_corr = card.circular_corr
        else:
            try:
                model = fit_cycle_model(
                    X, pairs, anchors + soft,
                    hyper=FitHyper(lam=self.cfg.edp.lam,
                                   anchor_lam=self.cfg.edp.anchor_weight),
                    version=self.edp_version + 1,
                )
            except (DegenerateGeometryError, ValueError):
                return
            new_corr = self._expert_corr(model, X, anchors)
            if (
                self.model is not None
                and len(anchors) >= 5
                and new_corr < self._expert_corr(self.model, X, anchors)
            ):
                self.retrain_events.append((now_s, f"{reason}+rejected"))
                return
            self._val_corr = new_corr
        self.edp_version += 1
        model.version = self.edp_version
        self.model = model
        self.edp_versions.append(self.edp_version)
        self.retrain_events.append((now_s, reason))
        self.residuals.clear()
        self._rebuild_tracks()
        if self.store is not None and card is None:
            # Validation corr uses expert labels only; propagated copies
            # would grade the model against its own assumptions.
            self._persist_model(model, X, pairs, anchors, now_s)

    def _expert_corr(self, model, X, anchors):
        """Validation corr against expert labels only.

        Alternating fits land in different basins from one data snapshot
        to the next; this score gates refits (a worse model never replaces
        the incumbent) and throttles event-aimed refreshes while the model
        is too poor to aim them.  Propagated labels are excluded: they
        would grade the fit's assumptions against themselves.
        """
        if len(anchors) < 3:
            return 0.0
        pred = [predict(model, X[a.index]).p for a in anchors]
        try:
            return float(circular_corr([a.p_true for a in anchors], pred))
        except UndefinedCorrelationError:
            return 0.0

    def _train_ae(self, take):
        ae = self.cfg.fingerprint.ae
        crops = [s.pixels.astype(float) for s in take]
        model, _report = train_autoencoder(
            crops,
            latent=ae.latent,
            hidden=ae.hidden,
            mask_fraction=ae.mask_fraction,
            config=TrainConfig(lr=ae.lr, momentum=ae.momentum, epochs=ae.epochs,
                               batch=ae.batch, seed=ae.seed),
        )
        self._ae_model = model
        for s in self.samples:
            s.fingerprint = np.concatenate(
                [encode_learned(model, s.pixels.astype(float)).values, s.extras]
            )

    def _encode(self, crop, extras):
        if self.cfg.fingerprint.backend == "learned" and self._ae_model is not None:
            fp = encode_learned(self._ae_model, crop)
        else:
            fp = encode_analytic(crop)
        if fp.flat:
            return None
        return np.concatenate([np.asarray(fp.values, dtype=float), extras])

    def _rebuild_tracks(self):
        """Re-derive every track from the bank under the current model."""
        by_obj = {}
        for s in self.samples:
            by_obj.setdefault(s.object_id, []).append(s)
        for oid in sorted(self.tracks):
            track = self.tracks[oid]
            fresh = new_track(oid, 1.0 / self.cfg.sim.period_mean_s, track.pos_um)
            fresh.dose = track.dose
            fresh.last_capture_s = track.last_capture_s
            for s in by_obj.get(oid, ()):  # bank is chronological per object
                if not self._track_gap_ok(fresh, s.t_s):
                    continue
                est = predict(self.model, s.fingerprint)
                update_track(fresh, s.t_s, est.p, est.v)
            self.tracks[oid] = fresh

    def _persist_model(self, model, X, pairs, anchors, now_s):
        corr = 0.0
        if len(anchors) >= 3:
            labeled = [(a.p_true, predict(model, X[a.index]).p) for a in anchors]
            try:
                corr = circular_corr([a for a, _ in labeled], [b for _, b in labeled])
            except UndefinedCorrelationError:
                corr = 0.0
        pair_cons = self._pair_consistency(model, X, pairs)
        card_id = self.store.next_id()
        card = ModelCard(
            id=card_id,
            context=self._context(),
            circular_corr=float(corr),
            pair_consistency=float(pair_cons),
            version=model.version,
            created_at=float(now_s),
            path=f"blobs/model-{self.run_id}-v{model.version}.bin",
        )
        self.store.put_model(card, encode_cycle_model(model))

    def _pair_consistency(self, model, X, pairs):
        """Fraction of training pairs whose pseudo-time gap matches dt under
        the median implied period, within the retrain residual threshold."""
        if not pairs:
            return 0.0
        p = np.array([predict(model, x).p for x in X])
        ii = np.array([q.i for q in pairs])
        jj = np.array([q.j for q in pairs])
        dts = np.array([q.dt_s for q in pairs])
        gaps = ((p[jj] - p[ii] + 0.5) % 1.0) - 0.5
        pos = gaps > 1e-6
        if not np.any(pos):
            return 0.0
        period = float(np.median(dts[pos] / gaps[pos]))
        if period <= 0:
            return 0.0
        resid = np.abs(((gaps - dts / period) + 0.5) % 1.0 - 0.5)
        return float(np.mean(resid <= self.cfg.retrain.residual_threshold))

    # -- observability ---------------------------------------------------------

    def _emit_oracle_rows(self, t_s):
        for oid, theta, omega, dose in oracle_snapshot(self.world):
            self.oracle_rows.append((self.run_id, t_s, oid, theta, omega, dose))

    def _publish_snapshot(self):
        now = self.world.now_s
        tracks = []
        for oid in sorted(self.tracks):
            tr = self.tracks[oid]
            stale = tr.stale_s(now)
            tracks.append(
                {
                    "object_id": oid,
                    "est_p": tr.last_p,
                    "est_v": tr.last_v,
                    "omega_hat": tr.omega_hat,
                    "stale_s": None if math.isinf(stale) else stale,
                    "dose": tr.dose,
                }
            )
        schedule = [
            {
                "t_s": a.t_s,
                "object_id": a.object_id,
                "purpose": a.purpose,
                "event_id": a.event_id,
                "approved": a.approved,
                "acq_id": a.acq_id,
            }
            for a in self._current_plan
        ]
        pending = [
            {
                "query_id": qid,
                "object_id": q.object_id,
                "thumbnail": _pgm_b64(q.crop_pixels),
            }
            for qid, q in sorted(self.pending_al.items())
        ]
        snap = {
            "tick": self._tick_index,
            "now_s": now,
            "paused": self.paused,
            "finished": self.finished,
            "tracks": tracks,
            "schedule": schedule,
            "edp_version": self.edp_version,
            "metrics_so_far": {
                "acquisitions_total": len(self.acq_rows),
                "al_queries_issued": self.al_queries_issued,
                "anchors_collected": len(self.anchors),
                "retrain_count": len(self.retrain_events),
                "pending_al": len(self.pending_al),
            },
            "pending_al": pending,
        }
        with self._snap_lock:
            self._snapshot = snap
            for q in list(self._listeners):
                try:
                    q.put_nowait(snap)
                except queue.Full:
                    # A reader that cannot keep up is cut off rather than
                    # given a gapped stream; None tells its handler to close.
                    self._listeners.remove(q)
                    try:
                        q.get_nowait()
                        q.put_nowait(None)
                    except (queue.Empty, queue.Full):
                        pass


def run_experiment(config: RunConfig, expert=None, run_id=None, baseline=None) -> RunReport:
    """Run the whole experiment loop to completion; see RunState for the
    machinery.  Deterministic when the expert channel is scripted."""
    state = RunState(config, expert=expert, run_id=run_id, baseline=baseline)
    return state.run()
