"""Arithmetic on cyclic quantities.

Pseudo-time values live on the unit circle, expressed in cycle units
``[0, 1)``.  The process advances in one direction, so "how far ahead"
(forward distance) and "how far apart" (circular distance) are different
questions; both are answered here, together with a circular association
measure used to score pseudo-time estimates against a reference.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "forward_distance",
    "circular_distance",
    "circular_mean",
    "circular_corr",
    "UndefinedCorrelationError",
]


class UndefinedCorrelationError(ValueError):
    """Raised when circular correlation is requested for a degenerate sample."""


def forward_distance(p_a, p_b):
    """Distance from ``p_a`` forward (in process direction) to ``p_b``.

    Both arguments are pseudo-times in cycle units; the result is in
    ``[0, 1)``.  Going from late in one cycle to early in the next is a
    short hop, while the reverse direction wraps nearly a full cycle:
    ``forward_distance(11/12, 0) == 1/12`` but
    ``forward_distance(0, 11/12) == 11/12``.

    Accepts scalars or arrays (broadcast).
    """
    return (np.asarray(p_b, dtype=float) - np.asarray(p_a, dtype=float)) % 1.0


def circular_distance(p_a, p_b):
    """Undirected distance on the cycle, in ``[0, 0.5]``."""
    f = forward_distance(p_a, p_b)
    return np.minimum(f, 1.0 - f)


def circular_mean(p, weights=None):
    """Weighted circular mean of pseudo-times, in ``[0, 1)``.

    Returns the angle of the weighted resultant vector.  A near-zero
    resultant (perfectly balanced sample) has no meaningful mean; 0.0 is
    returned in that case.
    """
    p = np.asarray(p, dtype=float)
    if p.size == 0:
        raise ValueError("circular_mean of an empty sample")
    if weights is None:
        weights = np.ones_like(p)
    w = np.asarray(weights, dtype=float)
    s = float(np.sum(w * np.sin(2.0 * np.pi * p)))
    c = float(np.sum(w * np.cos(2.0 * np.pi * p)))
    if s * s + c * c < 1e-24:
        return 0.0
    return float(np.arctan2(s, c) / (2.0 * np.pi)) % 1.0


def circular_corr(p_a, p_b):
    """Circular-circular association between two pseudo-time samples.

    Implements the T-linear association coefficient for paired angles
    (Fisher & Lee).  The coefficient is invariant to rotating either
    sample by a constant and flips sign when one sample reverses
    orientation; identical samples score 1.0.

    Parameters
    ----------
    p_a, p_b : array_like
        Paired pseudo-times in cycle units, equal length >= 2.

    Returns
    -------
    float in [-1, 1].

    Raises
    ------
    UndefinedCorrelationError
        If either sample has (circular) zero variance, or fewer than two
        observations are given.
    """
    a = 2.0 * np.pi * np.asarray(p_a, dtype=float).ravel()
    b = 2.0 * np.pi * np.asarray(p_b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError("samples must have equal length")
    n = a.size
    if n < 2:
        raise UndefinedCorrelationError("need at least two paired angles")

    num = 4.0 * (
        np.sum(np.cos(a) * np.cos(b)) * np.sum(np.sin(a) * np.sin(b))
        - np.sum(np.cos(a) * np.sin(b)) * np.sum(np.sin(a) * np.cos(b))
    )
    den_a = n * n - np.sum(np.cos(2 * a)) ** 2 - np.sum(np.sin(2 * a)) ** 2
    den_b = n * n - np.sum(np.cos(2 * b)) ** 2 - np.sum(np.sin(2 * b)) ** 2
    den = np.sqrt(den_a * den_b)
    if den < 1e-12:
        raise UndefinedCorrelationError("zero circular variance in a sample")
    return float(num / den)
