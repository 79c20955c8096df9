"""Per-object pseudo-time tracks and event-time extrapolation.

A track accumulates (t, p, v) observations for one object and maintains a
rate estimate omega_hat (cycles per second) plus its scatter.  The planner
extrapolates the newest observation forward at omega_hat to predict when
the object will next hit a target pseudo-time.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from cyclepilot.pseudotime.angles import forward_distance

__all__ = ["EventSpec", "ObjectTrack", "new_track", "update_track", "predict_event_time"]

OBS_CAPACITY = 32

# EMA weight for rate updates and rate-scatter updates.
RATE_ALPHA = 0.3

# Steps longer than this fraction of a cycle are ambiguous mod 1 and are
# excluded from rate estimation.
MAX_STEP_CYCLES = 0.8


@dataclass(frozen=True)
class EventSpec:
    """A target pseudo-time to capture, with tolerance and exposure cost."""

    id: str
    p_star: float
    window_w: float = 0.05
    exposure: float = 1.0
    meta: dict | None = None

    def __post_init__(self):
        if not 0.0 <= self.p_star < 1.0:
            raise ValueError(f"p_star must be in [0, 1), got {self.p_star}")
        if not 0.0 < self.window_w <= 0.25:
            raise ValueError(f"window_w must be in (0, 0.25], got {self.window_w}")
        if self.exposure <= 0:
            raise ValueError(f"exposure must be positive, got {self.exposure}")


@dataclass
class ObjectTrack:
    """Observation history and rate estimate for one object.

    ``pos_um``, ``dose`` and ``last_capture_s`` mirror what the scheduler
    needs about the physical object (travel target, remaining dose budget,
    capture cooldown); the orchestrator keeps them current.
    """

    object_id: int
    omega_hat: float
    sigma_omega: float = 0.0
    obs: deque = field(default_factory=lambda: deque(maxlen=OBS_CAPACITY))
    last_t_s: float | None = None
    pos_um: tuple[float, float] = (0.0, 0.0)
    dose: float = 0.0
    last_capture_s: float | None = None

    def stale_s(self, now_s: float) -> float:
        if self.last_t_s is None:
            return float("inf")
        return now_s - self.last_t_s

    @property
    def last_p(self) -> float | None:
        return self.obs[-1][1] if self.obs else None

    @property
    def last_v(self) -> float | None:
        return self.obs[-1][2] if self.obs else None


def new_track(object_id, prior_omega, pos_um=(0.0, 0.0)):
    """Cold-start track: rate prior (1/mean period) until steps arrive."""
    if prior_omega <= 0:
        raise ValueError("prior_omega must be positive")
    return ObjectTrack(object_id=object_id, omega_hat=float(prior_omega), pos_um=pos_um)


def update_track(track, t_s, p, v):
    """Append an observation and refresh the rate estimate.

    The per-step rate forward_distance(p_prev, p)/dt feeds an EMA; steps
    with dt >= 0.8 cycles at the current rate are skipped because their
    angular advance is ambiguous mod 1.
    """
    if track.last_t_s is not None and t_s <= track.last_t_s:
        raise ValueError(
            f"out-of-order observation at t={t_s} (last was {track.last_t_s})"
        )
    if track.obs:
        t_prev, p_prev, _ = track.obs[-1]
        dt = t_s - t_prev
        if dt < MAX_STEP_CYCLES / track.omega_hat:
            step_rate = forward_distance(p_prev, p) / dt
            if step_rate > 0:
                dev = abs(step_rate - track.omega_hat)
                track.omega_hat = (1 - RATE_ALPHA) * track.omega_hat + RATE_ALPHA * step_rate
                track.sigma_omega = (1 - RATE_ALPHA) * track.sigma_omega + RATE_ALPHA * dev
    track.obs.append((float(t_s), float(p), float(v)))
    track.last_t_s = float(t_s)
    return track


def predict_event_time(track, spec, now_s):
    """Wall-clock estimate (T_hat, sigma_T) of the next p_star hit.

    Extrapolates the newest observation to now at omega_hat, then forward
    to p_star.  sigma_T combines the observation uncertainty v with the
    rate scatter accumulated over the forward gap.
    """
    if track.omega_hat <= 0:
        raise ValueError("track has no positive rate estimate")
    if not track.obs:
        raise ValueError("track has no observations")
    t_last, p_last, v_last = track.obs[-1]
    p_now = (p_last + track.omega_hat * (now_s - t_last)) % 1.0
    fwd = forward_distance(p_now, spec.p_star)
    t_hat = now_s + fwd / track.omega_hat
    sigma_p = (v_last**2 + (fwd * track.sigma_omega / track.omega_hat) ** 2) ** 0.5
    sigma_t = sigma_p / track.omega_hat
    return t_hat, sigma_t
