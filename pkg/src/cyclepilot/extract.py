"""Object extraction: frame -> regions -> normalized crops.

Thresholding (Otsu over 256 bins, or a fixed threshold), 8-connected
component labeling, border-following contours, and crop extraction with
background suppression and z-normalization.  No learning happens here;
this stage only isolates objects so the fingerprint stage sees one object
per crop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

__all__ = [
    "ExtractionParams",
    "Region",
    "Crop",
    "InvalidRegionError",
    "otsu_threshold",
    "segment",
    "extract_crop",
]

_EIGHT = np.ones((3, 3), dtype=bool)


class InvalidRegionError(ValueError):
    """Region is unusable for crop extraction (empty or degenerate bbox)."""


@dataclass(frozen=True)
class ExtractionParams:
    """Segmentation knobs.

    threshold_mode : "otsu" | "fixed"
    fixed_threshold : used when mode is "fixed".
    min_area_px : components below this area are dropped.
    """

    threshold_mode: str = "otsu"
    fixed_threshold: float = 0.0
    min_area_px: int = 20

    def validate(self):
        if self.threshold_mode not in ("otsu", "fixed"):
            raise ValueError(f"unknown threshold_mode {self.threshold_mode!r}")
        if self.min_area_px < 1:
            raise ValueError("min_area_px must be >= 1")


@dataclass
class Region:
    """One segmented component.

    mask : full-frame boolean mask of the component.
    bbox : (x0, y0, x1, y1) half-open pixel bounds (x = column, y = row).
    centroid : (cx, cy) mask centroid in pixel coordinates.
    area_px : pixel count.
    contour : ordered boundary pixels [(x, y), ...]; the first and last
        entries are 8-neighbors (closed walk).
    """

    mask: np.ndarray
    bbox: tuple[int, int, int, int]
    centroid: tuple[float, float]
    area_px: int
    contour: list = field(default_factory=list)


@dataclass
class Crop:
    """Square, z-normalized single-object image.

    pixels : (S, S) array with mean ~0 and std ~1 (flat crops keep std 1).
    norm_mean, norm_std : normalization applied (std divisor 1 when flat).
    flat : the source window had no intensity variation.
    bbox : source window in frame pixels (x0, y0, x1, y1).
    """

    pixels: np.ndarray
    norm_mean: float
    norm_std: float
    flat: bool
    bbox: tuple[int, int, int, int]


def otsu_threshold(pixels) -> float:
    """Otsu's threshold over a 256-bin histogram of the value range.

    Maximizes between-class variance; ties resolve to the lowest
    threshold.  Returns a value in the pixel units; foreground is
    ``pixels > threshold``.  A flat image returns its single value
    (empty foreground).
    """
    v = np.asarray(pixels, dtype=float).ravel()
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return hi
    hist, edges = np.histogram(v, bins=256, range=(lo, hi))
    w = hist.astype(float)
    total = w.sum()
    centers = 0.5 * (edges[:-1] + edges[1:])
    cum_w = np.cumsum(w)
    cum_m = np.cumsum(w * centers)
    mean_all = cum_m[-1] / total
    # Split after bin t: class 0 = bins [0..t], class 1 = rest.
    w0 = cum_w[:-1]
    w1 = total - w0
    valid = (w0 > 0) & (w1 > 0)
    mu0 = np.where(valid, cum_m[:-1] / np.maximum(w0, 1), 0.0)
    mu1 = np.where(valid, (cum_m[-1] - cum_m[:-1]) / np.maximum(w1, 1), 0.0)
    sigma_b = np.where(valid, w0 * w1 * (mu0 - mu1) ** 2, -1.0)
    best = int(np.argmax(sigma_b))  # argmax takes the first (lowest) maximum
    _ = mean_all
    return float(edges[best + 1])


def _trace_contour(mask: np.ndarray, start_rc) -> list:
    """Moore-neighbor boundary trace from the top-left-most pixel.

    Returns boundary pixels as (x, y) in order; the walk is closed (the
    last pixel neighbors the first).  A single-pixel region yields [p].
    """
    # Clockwise Moore neighborhood starting from west.
    nbrs = [(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)]
    h, w = mask.shape

    def at(r, c):
        return 0 <= r < h and 0 <= c < w and mask[r, c]

    r0, c0 = start_rc
    contour = [(c0, r0)]
    # Jacob's stopping criterion: stop on re-entering the start pixel from
    # the same direction it was first entered.
    prev_dir = 0
    r, c = r0, c0
    first_dir = None
    for _ in range(4 * h * w + 8):
        found = False
        for k in range(8):
            d = (prev_dir + k) % 8
            dr, dc = nbrs[d]
            rr, cc = r + dr, c + dc
            if at(rr, cc):
                if (rr, cc) == (r0, c0):
                    if first_dir is None or d == first_dir:
                        return contour
                if first_dir is None:
                    first_dir = d
                r, c = rr, cc
                contour.append((cc, rr))
                prev_dir = (d + 6) % 8  # back up two steps in the scan order
                found = True
                break
        if not found:
            return contour  # isolated pixel
    return contour


def segment(frame, params: ExtractionParams = ExtractionParams()) -> list[Region]:
    """Threshold and label a frame into regions.

    Accepts a Frame or a raw 2D array.  Components are 8-connected,
    filtered by ``min_area_px``, and returned sorted by centroid in
    row-major order (top to bottom, then left to right).
    """
    params.validate()
    pixels = frame.pixels if hasattr(frame, "pixels") else np.asarray(frame, dtype=float)
    if pixels.ndim != 2:
        raise ValueError("frame must be 2D")
    if params.threshold_mode == "otsu":
        t = otsu_threshold(pixels)
    else:
        t = params.fixed_threshold
    binary = pixels > t
    labels, n = ndimage.label(binary, structure=_EIGHT)
    regions = []
    for lbl in range(1, n + 1):
        mask = labels == lbl
        area = int(mask.sum())
        if area < params.min_area_px:
            continue
        rows, cols = np.nonzero(mask)
        bbox = (int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1)
        centroid = (float(cols.mean()), float(rows.mean()))
        start = (int(rows[np.lexsort((cols, rows))[0]]), int(cols[np.lexsort((cols, rows))[0]]))
        contour = _trace_contour(mask, start)
        regions.append(Region(mask=mask, bbox=bbox, centroid=centroid, area_px=area, contour=contour))
    regions.sort(key=lambda r: (r.centroid[1], r.centroid[0]))
    return regions


def extract_crop(frame, region: Region, size_px: int) -> Crop:
    """Cut a region out of its frame as a normalized square crop.

    The region bbox is padded by 20% of its size on each side (clamped to
    the frame), pixels outside the 2 px-dilated region mask are replaced
    with the background median of the window, the window is resampled
    bilinearly to ``size_px`` square, and the result is z-normalized.  A
    flat window keeps divisor 1 and sets the ``flat`` flag.
    """
    if size_px < 8:
        raise ValueError(f"crop size must be >= 8 px, got {size_px}")
    pixels = frame.pixels if hasattr(frame, "pixels") else np.asarray(frame, dtype=float)
    h, w = pixels.shape
    x0, y0, x1, y1 = region.bbox
    if x1 <= x0 or y1 <= y0:
        raise InvalidRegionError(f"degenerate bbox {region.bbox}")
    pad_x = int(round(0.2 * (x1 - x0)))
    pad_y = int(round(0.2 * (y1 - y0)))
    wx0, wy0 = max(x0 - pad_x, 0), max(y0 - pad_y, 0)
    wx1, wy1 = min(x1 + pad_x, w), min(y1 + pad_y, h)
    window = pixels[wy0:wy1, wx0:wx1].astype(float).copy()

    dilated = ndimage.binary_dilation(region.mask, structure=_EIGHT, iterations=2)
    dwin = dilated[wy0:wy1, wx0:wx1]
    outside = ~dwin
    if outside.any():
        background = float(np.median(window[outside]))
        window[outside] = background

    wh, ww = window.shape
    rows = (np.arange(size_px) + 0.5) * (wh / size_px) - 0.5
    cols = (np.arange(size_px) + 0.5) * (ww / size_px) - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    resampled = ndimage.map_coordinates(window, [rr, cc], order=1, mode="nearest")

    mean = float(resampled.mean())
    std = float(resampled.std())
    flat = std < 1e-12
    divisor = 1.0 if flat else std
    normalized = (resampled - mean) / divisor
    return Crop(
        pixels=normalized,
        norm_mean=mean,
        norm_std=divisor,
        flat=flat,
        bbox=(wx0, wy0, wx1, wy1),
    )
