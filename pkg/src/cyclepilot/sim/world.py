"""World construction and time evolution."""

from __future__ import annotations

import math

import numpy as np

from cyclepilot.sim.types import SimConfig, SimObject, WorldState

__all__ = ["make_world", "advance", "oracle_snapshot"]


def _lognormal_params(mean, cv):
    """(mu, sigma) of a lognormal with the given mean and coefficient of variation."""
    sigma2 = math.log(1.0 + cv * cv)
    mu = math.log(mean) - 0.5 * sigma2
    return mu, math.sqrt(sigma2)


def make_world(config: SimConfig) -> WorldState:
    """Build a world from config; same config (incl. seed) -> same world."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    margin = 0.5 * config.crop_px * config.pixel_size_um
    w, h = config.field_um
    mu, sigma = _lognormal_params(config.period_mean_s, config.period_cv)
    objects = []
    for i in range(config.n_objects):
        x = float(rng.uniform(margin, max(w - margin, margin)))
        y = float(rng.uniform(margin, max(h - margin, margin)))
        period = float(rng.lognormal(mu, sigma)) if config.period_cv > 0 else config.period_mean_s
        theta = float(rng.uniform(0.0, 1.0))
        seed = int(rng.integers(0, 2**31 - 1))
        objects.append(
            SimObject(id=i, pos_um=(x, y), theta=theta, omega=1.0 / period, appearance_seed=seed)
        )
    return WorldState(config=config, now_s=0.0, objects=objects, rng=rng)


def advance(world: WorldState, dt: float) -> WorldState:
    """Advance hidden phases by ``dt`` seconds (in place).

    theta' = (theta + omega*dt + eta) mod 1 with eta ~ N(0, phase_noise^2*dt).
    dt = 0 leaves the world untouched (no RNG draw); dt < 0 is an error.
    With ``divide_on_wrap`` set, each wrap spawns a daughter object with a
    perturbed rate at the parent's position.
    """
    if dt < 0:
        raise ValueError(f"dt must be >= 0, got {dt}")
    if dt == 0:
        return world
    cfg = world.config
    n = len(world.objects)
    if n:
        if cfg.phase_noise > 0:
            eta = world.rng.normal(0.0, cfg.phase_noise * math.sqrt(dt), size=n)
        else:
            eta = np.zeros(n)
        spawned = []
        for obj, e in zip(world.objects, eta):
            raw = obj.theta + obj.omega * dt + float(e)
            wrapped = raw % 1.0
            if cfg.divide_on_wrap and raw >= 1.0:
                jitter = float(world.rng.lognormal(0.0, 0.1))
                spawned.append(
                    SimObject(
                        id=-1,  # assigned below
                        pos_um=obj.pos_um,
                        theta=wrapped,
                        omega=obj.omega * jitter,
                        appearance_seed=int(world.rng.integers(0, 2**31 - 1)),
                    )
                )
            obj.theta = wrapped
        if spawned:
            next_id = max(o.id for o in world.objects) + 1
            for s in spawned:
                s.id = next_id
                next_id += 1
                world.objects.append(s)
    world.now_s += dt
    return world


def oracle_snapshot(world: WorldState):
    """Ground-truth view: list of (id, theta, omega, dose) tuples.

    Evaluation-only; planners and models must never consume this.
    """
    return [(o.id, o.theta, o.omega, o.dose) for o in world.objects]
