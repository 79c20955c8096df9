"""Circle fitting in the 2D latent plane.

Algebraic (Kasa) initialization followed by a damped Gauss-Newton
refinement of the geometric objective ``sum_i (|y_i - c| - r)^2``.  The
algebraic step solves a linear least-squares problem and is exact for
points lying on a circle; the geometric step removes its bias for noisy
or unevenly spread points.
"""

from __future__ import annotations

import numpy as np

__all__ = ["fit_circle", "kasa_fit", "circle_objective", "DegenerateGeometryError"]


class DegenerateGeometryError(ValueError):
    """Points do not determine a circle (too few, collinear, or coincident)."""


def circle_objective(points, center, radius):
    """Sum of squared radial residuals of ``points`` about the circle."""
    d = np.linalg.norm(np.asarray(points, dtype=float) - center, axis=1)
    return float(np.sum((d - radius) ** 2))


def kasa_fit(points):
    """Algebraic circle fit: linear least squares on x^2 + y^2 = 2ax + 2by + k.

    Returns ``(center, radius)``.  Raises DegenerateGeometryError when the
    normal equations are rank-deficient (collinear or coincident points).
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
        raise DegenerateGeometryError("need at least 3 points in the plane")
    x, y = pts[:, 0], pts[:, 1]
    A = np.column_stack([2.0 * x, 2.0 * y, np.ones_like(x)])
    rhs = x * x + y * y
    # Collinearity check on the centered coordinates: a circle needs rank 2.
    centered = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[0] < 1e-12 or sv[1] / sv[0] < 1e-9:
        raise DegenerateGeometryError("points are collinear or coincident")
    sol, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    a, b, k = sol
    r2 = k + a * a + b * b
    if not np.isfinite(r2) or r2 <= 0.0:
        raise DegenerateGeometryError("algebraic fit produced a non-positive radius")
    return np.array([a, b]), float(np.sqrt(r2))


def fit_circle(points, tol=1e-10, max_iter=100):
    """Best-fit circle through 2D points, geometric least squares.

    Parameters
    ----------
    points : (n, 2) array_like, n >= 3
    tol : float
        Relative objective-decrease threshold for convergence.
    max_iter : int
        Cap on Gauss-Newton iterations.

    Returns
    -------
    (center, radius) : ((2,) ndarray, float), radius > 0.

    Notes
    -----
    The refinement is a damped (Levenberg) Gauss-Newton loop on
    parameters (cx, cy, r); steps are accepted only when the objective
    decreases, so the returned circle is never worse than the algebraic
    initialization.
    """
    pts = np.asarray(points, dtype=float)
    center, radius = kasa_fit(pts)
    obj = circle_objective(pts, center, radius)
    lam = 1e-6
    for _ in range(max_iter):
        delta = pts - center
        dist = np.linalg.norm(delta, axis=1)
        safe = np.maximum(dist, 1e-12)
        res = dist - radius
        # Jacobian of residuals wrt (cx, cy, r).
        J = np.column_stack([-delta[:, 0] / safe, -delta[:, 1] / safe, -np.ones_like(dist)])
        g = J.T @ res
        H = J.T @ J
        stepped = False
        for _attempt in range(12):
            try:
                step = np.linalg.solve(H + lam * np.eye(3), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            cand_center = center + step[:2]
            cand_radius = radius + step[2]
            if cand_radius <= 0.0:
                lam *= 10.0
                continue
            cand_obj = circle_objective(pts, cand_center, cand_radius)
            if cand_obj < obj:
                center, radius, prev_obj, obj = cand_center, cand_radius, obj, cand_obj
                lam = max(lam / 3.0, 1e-12)
                stepped = True
                break
            lam *= 10.0
        if not stepped:
            break
        if prev_obj - obj <= tol * max(prev_obj, 1e-300):
            break
    return center, radius
