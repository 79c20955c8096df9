"""Rendering: hidden phase -> pixels.

An object is drawn as two flat-top lobes on a shared axis.  Early in the
cycle both lobes sit at the center (one round blob); the blob widens
slowly with phase, and over the last stretch of the cycle the lobes pull
apart to a maximal separation just before wrap.  Total intensity is held
constant across phase so that brightness alone carries no phase signal.

All appearance randomness is derived deterministically from seeds; two
renders with equal arguments are identical arrays.
"""

from __future__ import annotations

import numpy as np

from cyclepilot.sim.types import Frame, NuisanceParams, WorldState

__all__ = [
    "render_crop",
    "render_field",
    "separation_px",
    "lobe_width_px",
    "draw_nuisance",
    "TOTAL_INTENSITY",
]

TOTAL_INTENSITY = 100.0

# Lobe separation ramps from 0 to d_max over this phase interval.
SPLIT_START = 0.7
SPLIT_END = 1.0

# Flat-top exponent: intensity falls as exp(-(r^2/2w^2)^FLATNESS), giving
# near-binary blobs whose thresholded area is insensitive to the exact
# threshold while still varying smoothly with the width parameter.
FLATNESS = 8


def lobe_width_px(theta: float, size_px: int) -> float:
    """Lobe width parameter w(theta) = 0.12*size * (1 + 0.5*theta)."""
    return 0.12 * size_px * (1.0 + 0.5 * theta)


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def separation_px(theta: float, size_px: int) -> float:
    """Lobe separation d(theta): 0 until late phase, then a smooth ramp to
    d_max = 0.5*size at wrap."""
    s = _smoothstep((theta - SPLIT_START) / (SPLIT_END - SPLIT_START))
    return 0.5 * size_px * float(s)


def _lobe(xx, yy, cx, cy, w):
    r2 = (xx - cx) ** 2 + (yy - cy) ** 2
    return np.exp(-((r2 / (2.0 * w * w)) ** FLATNESS))


def render_crop(theta: float, seed: int, nuisance: NuisanceParams, size_px: int) -> np.ndarray:
    """Render one object crop.

    Parameters
    ----------
    theta : float in [0, 1)
        Hidden phase.
    seed : int
        Appearance seed; fixes the per-object lobe asymmetry and chirality.
    nuisance : NuisanceParams
        Rotation, reflection, brightness, subpixel shift, noise.
    size_px : int >= 8

    Returns
    -------
    (size_px, size_px) float array, >= 0.
    """
    if size_px < 8:
        raise ValueError(f"crop size must be >= 8 px, got {size_px}")
    if not 0.0 <= theta < 1.0:
        raise ValueError(f"theta must be in [0, 1), got {theta}")

    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0x7FFFFFFF]))
    asym = float(rng.uniform(0.85, 1.15))
    chirality = float(rng.uniform(0.10, 0.20))

    w = lobe_width_px(theta, size_px)
    d = separation_px(theta, size_px)

    c = 0.5 * (size_px - 1)
    phi = nuisance.rotation_rad
    ux, uy = np.cos(phi), np.sin(phi)
    vx, vy = -uy, ux
    if nuisance.reflect:
        vx, vy = -vx, -vy
    dx, dy = nuisance.shift_px

    yy, xx = np.mgrid[0:size_px, 0:size_px].astype(float)
    ax = c + dx + 0.5 * d * ux
    ay = c + dy + 0.5 * d * uy
    # Second lobe sits slightly off-axis (chiral), proportional to separation.
    bx = c + dx - 0.5 * d * ux + chirality * d * vx
    by = c + dy - 0.5 * d * uy + chirality * d * vy

    img = _lobe(xx, yy, ax, ay, w) + asym * _lobe(xx, yy, bx, by, w)
    total = img.sum()
    if total > 0:
        img *= TOTAL_INTENSITY / total
    img *= nuisance.brightness
    if nuisance.noise_std > 0:
        img = img + rng.normal(0.0, nuisance.noise_std, img.shape)
        np.clip(img, 0.0, None, out=img)
    return img


def _time_key(now_s: float) -> int:
    """Stable integer key for a timestamp (bit pattern of the float)."""
    return int(np.float64(now_s).view(np.uint64))


def draw_nuisance(config, appearance_seed: int, now_s: float) -> NuisanceParams:
    """Deterministic per-acquisition nuisance draw for one object."""
    nr = config.nuisance
    rng = np.random.default_rng(
        np.random.SeedSequence([config.seed & 0x7FFFFFFF, int(appearance_seed) & 0x7FFFFFFF, _time_key(now_s)])
    )
    rotation = float(rng.uniform(0.0, 2.0 * np.pi)) if nr.rotation else 0.0
    reflect = bool(rng.uniform() < nr.reflect_prob)
    brightness = float(rng.uniform(nr.brightness_lo, nr.brightness_hi))
    jx = float(rng.uniform(-nr.shift_max_px, nr.shift_max_px))
    jy = float(rng.uniform(-nr.shift_max_px, nr.shift_max_px))
    return NuisanceParams(
        rotation_rad=rotation,
        reflect=reflect,
        brightness=brightness,
        shift_px=(jx, jy),
        noise_std=0.0,  # noise is added once, at frame level
    )


def render_field(world: WorldState, viewport) -> Frame:
    """Composite all objects inside ``viewport`` into one frame.

    viewport : (x0, y0, x1, y1) in microns, x1 > x0 and y1 > y0.

    Each in-view object is rendered with its own deterministic nuisance
    draw (a function of the config seed, its appearance seed, and the
    current time) and stamped at its stage position; objects past the
    dose budget are attenuated by exp(-gamma*(dose - D_max)).  A single
    frame-level noise floor is added, and pixels are clamped to >= 0.
    """
    x0, y0, x1, y1 = viewport
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"degenerate viewport {viewport}")
    cfg = world.config
    px = cfg.pixel_size_um
    W = max(1, int(round((x1 - x0) / px)))
    H = max(1, int(round((y1 - y0) / px)))
    frame = np.zeros((H, W), dtype=float)
    S = cfg.crop_px

    for obj in world.objects:
        ox, oy = obj.pos_um
        if not (x0 <= ox < x1 and y0 <= oy < y1):
            continue
        col = (ox - x0) / px - 0.5
        row = (oy - y0) / px - 0.5
        anchor_col = int(round(col)) - S // 2
        anchor_row = int(round(row)) - S // 2
        sub = (col - round(col), row - round(row))
        nuis = draw_nuisance(cfg, obj.appearance_seed, world.now_s)
        nuis = NuisanceParams(
            rotation_rad=nuis.rotation_rad,
            reflect=nuis.reflect,
            brightness=nuis.brightness,
            shift_px=(nuis.shift_px[0] + sub[0], nuis.shift_px[1] + sub[1]),
            noise_std=0.0,
        )
        crop = render_crop(obj.theta, obj.appearance_seed, nuis, S)
        if obj.dose > cfg.dose_budget:
            crop = crop * np.exp(-cfg.bleach_contrast_decay * (obj.dose - cfg.dose_budget))
        r0, c0 = anchor_row, anchor_col
        r1, c1 = r0 + S, c0 + S
        fr0, fc0 = max(r0, 0), max(c0, 0)
        fr1, fc1 = min(r1, H), min(c1, W)
        if fr1 <= fr0 or fc1 <= fc0:
            continue
        frame[fr0:fr1, fc0:fc1] += crop[fr0 - r0 : fr1 - r0, fc0 - c0 : fc1 - c0]

    if cfg.nuisance.noise_std > 0:
        rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed & 0x7FFFFFFF, 0x00F7A3E, _time_key(world.now_s)])
        )
        frame += rng.normal(0.0, cfg.nuisance.noise_std, frame.shape)
    np.clip(frame, 0.0, None, out=frame)
    return Frame(
        pixels=frame,
        pixel_size_um=px,
        stage_pos_um=(0.5 * (x0 + x1), 0.5 * (y0 + y1)),
        t_s=world.now_s,
    )
