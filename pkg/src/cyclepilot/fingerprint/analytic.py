"""Closed-form fingerprint: 17 rotation/reflection-stable features.

Layout of the vector:

    [0:8]   ring means: mean intensity in 8 equal-width annuli about the
            crop center (radius 0 .. S/2; corners beyond S/2 excluded so
            arbitrary-angle rotations stay comparable)
    [8:15]  log-scaled magnitudes of the seven moment invariants (Hu set),
            computed on the min-shifted crop
    [15]    eigenvalue ratio (min/max) of the second-moment matrix
    [16]    area fraction above half of the maximum intensity

Crops are z-normalized upstream, so brightness-affine changes are gone
before encoding; the features above are exactly invariant under the
dihedral grid symmetries (90-degree rotations and flips) and stable under
arbitrary-angle rotations up to resampling error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["Fingerprint", "ANALYTIC_DIM", "encode_analytic"]

ANALYTIC_DIM = 17

# Floor inside the log: moment invariants of symmetric patterns are zero up
# to numeric noise, and a bare logarithm would amplify that noise into huge
# feature swings.  Values below the floor are indistinguishable on purpose.
_LOG_EPS = 1e-6


@dataclass
class Fingerprint:
    """Feature vector plus provenance."""

    values: np.ndarray
    backend: str
    flat: bool = False

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


def _crop_pixels(crop) -> np.ndarray:
    px = crop.pixels if hasattr(crop, "pixels") else np.asarray(crop, dtype=float)
    if px.ndim != 2 or px.shape[0] != px.shape[1]:
        raise ValueError("crop must be a square 2D array")
    return np.asarray(px, dtype=float)


def _ring_means(px: np.ndarray) -> np.ndarray:
    S = px.shape[0]
    c = 0.5 * (S - 1)
    yy, xx = np.mgrid[0:S, 0:S].astype(float)
    r = np.hypot(xx - c, yy - c)
    edges = np.linspace(0.0, S / 2.0, 9)
    out = np.zeros(8)
    for k in range(8):
        sel = (r >= edges[k]) & (r < edges[k + 1])
        if sel.any():
            out[k] = float(px[sel].mean())
    return out


def _hu_log_magnitudes(w: np.ndarray) -> np.ndarray:
    """Seven moment invariants of a non-negative weight image, log10 |.|."""
    S = w.shape[0]
    yy, xx = np.mgrid[0:S, 0:S].astype(float)
    m00 = w.sum()
    if m00 <= 0:
        return np.full(7, np.log10(_LOG_EPS))
    xbar = float((w * xx).sum() / m00)
    ybar = float((w * yy).sum() / m00)
    dx = xx - xbar
    dy = yy - ybar

    def mu(p, q):
        return float((w * dx**p * dy**q).sum())

    def eta(p, q):
        return mu(p, q) / m00 ** (1.0 + 0.5 * (p + q))

    n20, n02, n11 = eta(2, 0), eta(0, 2), eta(1, 1)
    n30, n03 = eta(3, 0), eta(0, 3)
    n21, n12 = eta(2, 1), eta(1, 2)

    h1 = n20 + n02
    h2 = (n20 - n02) ** 2 + 4 * n11**2
    h3 = (n30 - 3 * n12) ** 2 + (3 * n21 - n03) ** 2
    h4 = (n30 + n12) ** 2 + (n21 + n03) ** 2
    h5 = (n30 - 3 * n12) * (n30 + n12) * ((n30 + n12) ** 2 - 3 * (n21 + n03) ** 2) + (
        3 * n21 - n03
    ) * (n21 + n03) * (3 * (n30 + n12) ** 2 - (n21 + n03) ** 2)
    h6 = (n20 - n02) * ((n30 + n12) ** 2 - (n21 + n03) ** 2) + 4 * n11 * (n30 + n12) * (
        n21 + n03
    )
    h7 = (3 * n21 - n03) * (n30 + n12) * ((n30 + n12) ** 2 - 3 * (n21 + n03) ** 2) - (
        n30 - 3 * n12
    ) * (n21 + n03) * (3 * (n30 + n12) ** 2 - (n21 + n03) ** 2)

    hs = np.array([h1, h2, h3, h4, h5, h6, h7])
    return np.log10(np.abs(hs) + _LOG_EPS)


def _eigen_ratio(w: np.ndarray) -> float:
    S = w.shape[0]
    yy, xx = np.mgrid[0:S, 0:S].astype(float)
    m00 = w.sum()
    if m00 <= 0:
        return 0.0
    xbar = (w * xx).sum() / m00
    ybar = (w * yy).sum() / m00
    dx = xx - xbar
    dy = yy - ybar
    mxx = (w * dx * dx).sum() / m00
    myy = (w * dy * dy).sum() / m00
    mxy = (w * dx * dy).sum() / m00
    tr = mxx + myy
    det = mxx * myy - mxy * mxy
    disc = max(0.25 * tr * tr - det, 0.0)
    lam_max = 0.5 * tr + np.sqrt(disc)
    lam_min = 0.5 * tr - np.sqrt(disc)
    if lam_max <= 1e-15:
        return 0.0
    return float(max(lam_min, 0.0) / lam_max)


def encode_analytic(crop) -> Fingerprint:
    """Encode a normalized crop into the 17-feature analytic fingerprint.

    A flat crop (no variation) encodes to the zero vector with the flat
    flag set.
    """
    px = _crop_pixels(crop)
    flat_in = bool(getattr(crop, "flat", False))
    if flat_in or float(px.std()) < 1e-12:
        return Fingerprint(values=np.zeros(ANALYTIC_DIM), backend="analytic", flat=True)
    # Moment weight image: z-normalized crops put background below zero and
    # object pixels above, so clipping at zero isolates the object mass.
    # (Any pixelwise map preserves the dihedral and brightness invariances.)
    w = np.clip(px, 0.0, None)
    if w.max() <= 0:
        w = px - px.min()
    values = np.concatenate(
        [
            _ring_means(px),
            _hu_log_magnitudes(w),
            [_eigen_ratio(w)],
            [float((w > 0.5 * w.max()).mean())],
        ]
    )
    return Fingerprint(values=values, backend="analytic")
