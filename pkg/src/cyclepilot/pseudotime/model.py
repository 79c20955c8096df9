"""Circular latent model: fingerprints -> pseudo-time.

Fingerprint vectors from one experiment are standardized, projected to a
plane, and fit with a circle.  The angle of a sample around that circle,
oriented and anchored, is its pseudo-time ``p`` in cycle units; the radial
deviation from the circle gives an uncertainty ``v``.

Fitting alternates between re-fitting the circle and taking gradient
steps on the projection ``W``, minimizing

    J = sum_i (|y_i - c| - r)^2
        + lam * sum_pairs (gap_ij - dt_ij / P)^2
        + anchor_lam * sum_{a<b} w_a w_b wrap(gap_ab - (p_a - p_b))^2

where ``gap_ij`` is the angular advance between two observations of the
same object taken ``dt_ij`` seconds apart and ``P`` is the current period
estimate (median of dt/gap).  The second term stretches the embedding so
equal time steps subtend equal angles, which is what makes the angle
interpretable as pseudo-time.  The third term runs over pairs of labeled
samples: their angular gap has a known target, independent of both the
period estimate and the (not yet calibrated) offset.  J never increases
across iterations: every candidate update (gradient step, column
renormalization, circle refit, period re-estimate) is accepted only if
it does not raise J.

The objective is non-convex and the alternation is local, so the choice
of starting plane decides which minimum is found.  Deterministic starts
are each polished and the lowest final J wins: the top-2 principal
plane of the standardized data; the plane with the strongest pair
circulation per unit variance (when pairs exist); and the weighted
ridge regression of labeled rows onto their label positions on the unit
circle (when at least three labels exist).  The first captures where
the data spreads, the second where the data consistently rotates, and
the third where the labels say the cycle lives, which survives even
when the cycle is compressed into a low-variance subspace that the
unsupervised starts cannot see.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from cyclepilot.pseudotime.angles import circular_mean
from cyclepilot.pseudotime.circlefit import DegenerateGeometryError, fit_circle

__all__ = [
    "CycleModel",
    "PseudoTimeEstimate",
    "SequencePair",
    "Anchor",
    "FitHyper",
    "fit_cycle_model",
    "predict",
    "calibrate",
    "encode_cycle_model",
    "decode_cycle_model",
    "save_cycle_model",
    "load_cycle_model",
]

MODEL_MAGIC = b"EDP1"

_TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class SequencePair:
    """Two observations of the same object, ``dt_s`` seconds apart.

    ``i`` and ``j`` index rows of the fingerprint matrix the model was (or
    will be) fit on; ``j`` was observed ``dt_s > 0`` seconds after ``i``.
    ``dt_s`` should be well under one period, or the angular gap aliases.
    """

    i: int
    j: int
    dt_s: float


@dataclass(frozen=True)
class Anchor:
    """Expert-labeled sample: training row ``index`` has pseudo-time ``p_true``."""

    index: int
    p_true: float
    weight: float = 1.0


@dataclass(frozen=True)
class FitHyper:
    """Hyperparameters of the alternating fit."""

    lam: float = 1.0
    anchor_lam: float = 1.0
    max_iter: int = 500
    tol: float = 1e-6


@dataclass
class PseudoTimeEstimate:
    """Pseudo-time ``p`` in [0, 1) with uncertainty ``v`` in [0, 0.25].

    ``degenerate`` marks samples that projected onto the circle center,
    where the angle is undefined; such estimates carry maximal v.
    """

    p: float
    v: float
    degenerate: bool = False


@dataclass
class CycleModel:
    """Standardization + planar projection + circle + orientation.

    ``train_alpha`` holds the latent angles (radians) of the samples the
    model was fit on; it is needed by :func:`calibrate` and is not part of
    the serialized format.
    """

    mean: np.ndarray
    std: np.ndarray
    W: np.ndarray
    center: np.ndarray
    radius: float
    direction: int = 1
    offset: float = 0.0
    version: int = 1
    converged: bool = True
    train_alpha: np.ndarray | None = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])


def _standardize_stats(F):
    mean = F.mean(axis=0)
    std = F.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    return mean, std


def _angles(Y, center):
    u = Y - center
    return np.arctan2(u[:, 1], u[:, 0])


def _signed_gap_cycles(alpha_i, alpha_j):
    """Signed angular increment in cycles, wrapped to (-0.5, 0.5]."""
    g = (alpha_j - alpha_i) / _TWO_PI
    return (g + 0.5) % 1.0 - 0.5


def _direction_from_pairs(alpha, pairs):
    if not pairs:
        return 1
    gaps = np.array([_signed_gap_cycles(alpha[p.i], alpha[p.j]) for p in pairs])
    return 1 if np.median(gaps) >= 0.0 else -1


def _period_from_pairs(alpha, pairs, direction):
    """Median of dt/gap over pairs, with gap the signed angular increment.

    Reading the gap signed (wrapped to (-0.5, 0.5]) makes the estimate
    robust while the embedding is still partly collapsed: pairs whose gap
    is noise around zero produce huge ratios of BOTH signs, which land at
    the extremes of the sorted order and cancel around the median instead
    of dragging it.  Resolvable pairs contribute consistent positive
    ratios that the median locks onto.
    """
    if not pairs:
        return None
    ratios = []
    for p in pairs:
        g = _signed_gap_cycles(alpha[p.i] * direction, alpha[p.j] * direction)
        if abs(g) > 1e-12:
            ratios.append(p.dt_s / g)
    if not ratios:
        return None
    med = float(np.median(ratios))
    if med <= 0:
        pos = [x for x in ratios if x > 0]
        if not pos:
            return None
        med = float(np.median(pos))
    return med


def _pair_arrays(pairs):
    """Index/delta arrays for the vectorized pair terms (None when empty)."""
    if not pairs:
        return None
    ii = np.array([p.i for p in pairs], dtype=int)
    jj = np.array([p.j for p in pairs], dtype=int)
    dts = np.array([p.dt_s for p in pairs], dtype=float)
    return ii, jj, dts


# All-pairs label terms grow quadratically; beyond this cap the pair list
# is thinned by a deterministic stride, which keeps every label involved
# while bounding the per-iteration cost.
_MAX_ANCHOR_PAIRS = 4000


def _anchor_arrays(anchors):
    """Label-pair index/target/weight arrays (None with fewer than 2 labels).

    Targets are the known pseudo-time gaps between labeled samples; the
    unknown global offset cancels in the gap, so these terms constrain
    the plane without waiting for calibration.
    """
    if len(anchors) < 2:
        return None
    idx = np.array([a.index for a in anchors], dtype=int)
    lab = np.array([a.p_true for a in anchors], dtype=float)
    wgt = np.array([a.weight for a in anchors], dtype=float)
    aa, bb = np.triu_indices(len(idx), k=1)
    if len(aa) > _MAX_ANCHOR_PAIRS:
        stride = -(-len(aa) // _MAX_ANCHOR_PAIRS)
        aa, bb = aa[::stride], bb[::stride]
    tau = (lab[aa] - lab[bb]) % 1.0
    return idx[aa], idx[bb], tau, wgt[aa] * wgt[bb]


def _objective(Y, center, radius, pair_arr, lam, direction, period,
               anc_arr=None, anchor_lam=0.0):
    u = Y - center
    rho = np.linalg.norm(u, axis=1)
    j = float(np.sum((rho - radius) ** 2))
    alpha = None
    if pair_arr is not None and period is not None and period > 0:
        ii, jj, dts = pair_arr
        alpha = np.arctan2(u[:, 1], u[:, 0])
        gaps = (direction * (alpha[jj] - alpha[ii]) / _TWO_PI) % 1.0
        j += lam * float(np.sum((gaps - dts / period) ** 2))
    if anc_arr is not None and anchor_lam > 0:
        aa, bb, tau, w = anc_arr
        if alpha is None:
            alpha = np.arctan2(u[:, 1], u[:, 0])
        g = (direction * (alpha[aa] - alpha[bb]) / _TWO_PI) % 1.0
        e = (g - tau + 0.5) % 1.0 - 0.5
        j += anchor_lam * float(np.sum(w * e * e))
    return j


def _grad_W(X, W, center, radius, pair_arr, lam, direction, period,
            anc_arr=None, anchor_lam=0.0):
    """Gradient of J with respect to W at fixed circle, orientation, period."""
    Y = X @ W
    u = Y - center
    rho = np.maximum(np.linalg.norm(u, axis=1), 1e-12)
    dJdY = 2.0 * ((rho - radius) / rho)[:, None] * u
    alpha = perp = None
    if pair_arr is not None and period is not None and period > 0:
        ii, jj, dts = pair_arr
        alpha = np.arctan2(u[:, 1], u[:, 0])
        perp = np.column_stack([-u[:, 1], u[:, 0]]) / (rho * rho)[:, None]
        gaps = (direction * (alpha[jj] - alpha[ii]) / _TWO_PI) % 1.0
        e = 2.0 * lam * (gaps - dts / period) * direction / _TWO_PI
        np.add.at(dJdY, jj, e[:, None] * perp[jj])
        np.add.at(dJdY, ii, -e[:, None] * perp[ii])
    if anc_arr is not None and anchor_lam > 0:
        aa, bb, tau, w = anc_arr
        if alpha is None:
            alpha = np.arctan2(u[:, 1], u[:, 0])
            perp = np.column_stack([-u[:, 1], u[:, 0]]) / (rho * rho)[:, None]
        g = (direction * (alpha[aa] - alpha[bb]) / _TWO_PI) % 1.0
        e = (g - tau + 0.5) % 1.0 - 0.5
        coef = 2.0 * anchor_lam * w * e * direction / _TWO_PI
        np.add.at(dJdY, aa, coef[:, None] * perp[aa])
        np.add.at(dJdY, bb, -coef[:, None] * perp[bb])
    return X.T @ dJdY


def _unit_columns(W):
    norms = np.linalg.norm(W, axis=0)
    return W / np.maximum(norms, 1e-12)


def _circulation_plane(X, pairs):
    """Plane maximizing pair circulation per unit variance, or None.

    In whitened coordinates the antisymmetric part of the pair lag
    covariance E[x_j x_i^T] is supported on the planes the data rotates
    in, weighted by how consistently pairs advance there rather than by
    raw variance.  Its top singular plane, mapped back to standardized
    coordinates, points at the cycle even when principal components are
    dominated by one high-variance arc of it.
    """
    if not pairs:
        return None
    sigma = X.T @ X / max(len(X), 1)
    evals, evecs = np.linalg.eigh(sigma)
    floor = 1e-8 * float(evals.max())
    if floor <= 0:
        return None
    inv_sqrt = evecs @ np.diag(1.0 / np.sqrt(np.maximum(evals, floor))) @ evecs.T
    Z = X @ inv_sqrt
    ii = np.array([p.i for p in pairs])
    jj = np.array([p.j for p in pairs])
    C = Z[jj].T @ Z[ii] / len(pairs)
    A = 0.5 * (C - C.T)
    U, S, _ = np.linalg.svd(A)
    if not np.isfinite(S[0]) or S[0] <= 1e-12:
        return None
    return _unit_columns(inv_sqrt @ U[:, :2])


def _anchor_ridge_plane(X, anchors, ridge=1.0):
    """Weighted ridge regression of labeled rows onto the label circle.

    Maps each labeled sample toward (cos 2 pi p, sin 2 pi p); the result
    is the plane in which the labels are most nearly laid out as their
    phases dictate.  None with fewer than 3 labels or a singular system.
    """
    if len(anchors) < 3:
        return None
    idx = np.array([a.index for a in anchors], dtype=int)
    lab = np.array([a.p_true for a in anchors], dtype=float)
    w = np.sqrt(np.array([a.weight for a in anchors], dtype=float))
    Za = X[idx] * w[:, None]
    T = np.column_stack([np.cos(_TWO_PI * lab), np.sin(_TWO_PI * lab)]) * w[:, None]
    d = X.shape[1]
    try:
        W0 = np.linalg.solve(Za.T @ Za + ridge * np.eye(d), Za.T @ T)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(W0)) or np.linalg.norm(W0) <= 1e-12:
        return None
    return _unit_columns(W0)


def _run_alternation(X, W0, pairs, hyper, anc_arr=None):
    """Polish one starting plane; returns the fitted state and final J.

    Each round takes up to a few accepted backtracking gradient steps on
    W, refits the circle, and re-estimates (direction, period), accepting
    each candidate only if J does not rise.  Stops when the relative
    objective decrease over a round falls below ``hyper.tol``.
    """
    W = _unit_columns(W0)
    pair_arr = _pair_arrays(pairs)
    a_lam = hyper.anchor_lam
    Y = X @ W
    center, radius = fit_circle(Y)
    alpha = _angles(Y, center)
    direction = _direction_from_pairs(alpha, pairs)
    period = _period_from_pairs(alpha, pairs, direction)
    J = _objective(Y, center, radius, pair_arr, hyper.lam, direction, period,
                   anc_arr, a_lam)

    step = 0.05
    converged = False
    for _ in range(hyper.max_iter):
        J_start = J

        # Gradient steps on W (backtracking; candidates column-normalized).
        for _sub in range(5):
            G = _grad_W(X, W, center, radius, pair_arr, hyper.lam, direction, period,
                        anc_arr, a_lam)
            gnorm = np.linalg.norm(G)
            if gnorm <= 1e-15:
                break
            eta = step / gnorm
            accepted = False
            for _bt in range(24):
                W_c = _unit_columns(W - eta * G)
                J_c = _objective(X @ W_c, center, radius, pair_arr, hyper.lam,
                                 direction, period, anc_arr, a_lam)
                if J_c < J:
                    W, J = W_c, J_c
                    step = min(step * 1.5, 1.0)
                    accepted = True
                    break
                eta *= 0.5
            if not accepted:
                step = max(step * 0.5, 1e-9)
                break
        Y = X @ W

        # Circle refit; accepted only if it does not raise J.
        try:
            cand_center, cand_radius = fit_circle(Y)
        except DegenerateGeometryError:
            cand_center, cand_radius = center, radius
        J_c = _objective(Y, cand_center, cand_radius, pair_arr, hyper.lam,
                         direction, period, anc_arr, a_lam)
        if J_c <= J:
            center, radius, J = cand_center, cand_radius, J_c

        # Re-estimate orientation and period; adopt only if J does not rise.
        alpha = _angles(Y, center)
        cand_dir = _direction_from_pairs(alpha, pairs)
        cand_period = _period_from_pairs(alpha, pairs, cand_dir)
        J_c = _objective(Y, center, radius, pair_arr, hyper.lam, cand_dir,
                         cand_period, anc_arr, a_lam)
        if J_c <= J:
            direction, period, J = cand_dir, cand_period, J_c

        if J_start - J <= hyper.tol * max(J_start, 1e-300):
            converged = True
            break

    return W, np.asarray(center, dtype=float), float(radius), converged, J


def fit_cycle_model(fingerprints, pairs=(), anchors=(), hyper=FitHyper(), version=1,
                    warm_W=None):
    """Fit the circular latent model to a fingerprint matrix.

    Parameters
    ----------
    fingerprints : (n, d) array_like, n >= 3, d >= 2
    pairs : sequence of SequencePair
        Same-object observation pairs; drive the equal-time/equal-angle
        term and the orientation.
    anchors : sequence of Anchor
        Expert labels; fix the pseudo-time offset.
    hyper : FitHyper
    warm_W : (d, 2) array_like, optional
        Extra starting projection, typically the previous model's; lets a
        refit polish the incumbent solution on fresh data instead of
        relying on the cold starts alone.

    Returns
    -------
    CycleModel with ``converged`` False when the iteration cap was hit
    before the relative objective decrease fell below ``hyper.tol``.
    """
    F = np.asarray(fingerprints, dtype=float)
    if F.ndim != 2:
        raise ValueError("fingerprints must be a 2D matrix")
    n, d = F.shape
    if n < 3:
        raise ValueError("need at least 3 samples to fit a circle")
    if d < 2:
        raise ValueError("need at least 2 fingerprint dimensions")
    pairs = list(pairs)
    for p in pairs:
        if not (0 <= p.i < n and 0 <= p.j < n) or p.dt_s <= 0:
            raise ValueError(f"invalid pair {p}")
    anchors = list(anchors)
    for a in anchors:
        if not 0 <= a.index < n:
            raise ValueError(f"anchor index {a.index} out of range")
    mean, std = _standardize_stats(F)
    X = (F - mean) / std
    anc_arr = _anchor_arrays(anchors)

    # Start 1: top-2 principal plane of the standardized data.
    _, _, Vt = np.linalg.svd(X, full_matrices=False)
    starts = [Vt[:2].T.copy()]
    # Start 2: strongest rotation-per-variance plane from the pairs.
    W_circ = _circulation_plane(X, pairs)
    if W_circ is not None:
        starts.append(W_circ)
    # Start 3: plane where the labels lay the cycle out.
    W_anc = _anchor_ridge_plane(X, anchors)
    if W_anc is not None:
        starts.append(W_anc)
    # Start 4: caller-provided warm start.
    if warm_W is not None:
        W_warm = np.asarray(warm_W, dtype=float)
        if W_warm.shape == (d, 2) and np.all(np.isfinite(W_warm)):
            starts.append(_unit_columns(W_warm.copy()))

    best = None
    for W0 in starts:
        try:
            fitted = _run_alternation(X, W0, pairs, hyper, anc_arr)
        except DegenerateGeometryError:
            continue
        if best is None or fitted[-1] < best[-1]:
            best = fitted
    if best is None:
        raise DegenerateGeometryError("projected samples are degenerate from every start")
    W, center, radius, converged, _ = best

    model = CycleModel(
        mean=mean,
        std=std,
        W=W,
        center=np.asarray(center, dtype=float),
        radius=float(radius),
        version=version,
        converged=converged,
        train_alpha=_angles(X @ W, center),
    )
    return calibrate(model, pairs=pairs, anchors=anchors)


def predict(model, fingerprint):
    """Pseudo-time estimate for one fingerprint vector.

    ``v`` is the radial deviation from the fitted circle expressed as a
    fraction of the circumference, capped at 0.25.  A sample landing on
    the circle center (angle undefined) returns ``p = offset`` with
    maximal uncertainty and ``degenerate=True``.
    """
    f = np.asarray(fingerprint, dtype=float).ravel()
    if f.shape[0] != model.dim:
        raise ValueError(f"fingerprint has dim {f.shape[0]}, model expects {model.dim}")
    x = (f - model.mean) / model.std
    y = x @ model.W
    u = y - model.center
    rho = float(np.hypot(u[0], u[1]))
    if rho < 1e-9:
        return PseudoTimeEstimate(p=model.offset % 1.0, v=0.25, degenerate=True)
    alpha = float(np.arctan2(u[1], u[0]))
    p = (model.direction * alpha / _TWO_PI + model.offset) % 1.0
    v = min(0.25, abs(rho - model.radius) / (_TWO_PI * model.radius))
    return PseudoTimeEstimate(p=p, v=v)


def calibrate(model, pairs=(), anchors=()):
    """Orient and anchor a fitted model.

    Direction: the sign making the median signed angular increment over
    ``pairs`` positive (ties and no-pairs keep the current direction).
    Offset: with anchors, the weighted circular mean of the per-anchor
    offsets (closed form); otherwise training sample 0 maps to p = 0.
    Calibration is idempotent: same inputs, same (direction, offset).
    """
    if model.train_alpha is None:
        raise ValueError("model is missing training angles; refit before calibrating")
    alpha = model.train_alpha
    pairs = list(pairs)
    anchors = list(anchors)
    n = alpha.shape[0]

    if pairs:
        gaps = np.array([_signed_gap_cycles(alpha[p.i], alpha[p.j]) for p in pairs])
        med = float(np.median(gaps))
        direction = model.direction if med == 0.0 else (1 if med > 0 else -1)
    else:
        direction = model.direction

    a_cyc = direction * alpha / _TWO_PI
    if anchors:
        for a in anchors:
            if not 0 <= a.index < n:
                raise ValueError(f"anchor index {a.index} out of range")
        deltas = np.array([(a.p_true - a_cyc[a.index]) % 1.0 for a in anchors])
        weights = np.array([a.weight for a in anchors])
        offset = circular_mean(deltas, weights)
    else:
        offset = (-a_cyc[0]) % 1.0
    return replace(model, direction=direction, offset=float(offset))


def encode_cycle_model(model) -> bytes:
    """Serialize in the binary format (little-endian float64).

    Layout: magic ``EDP1`` | u32 d | mean f64[d] | std f64[d] |
    W f64[d*2] row-major | center f64[2] | radius f64 | direction i8 |
    offset f64 | version u32.
    """
    d = model.dim
    buf = bytearray()
    buf += MODEL_MAGIC
    buf += struct.pack("<I", d)
    for arr in (model.mean, model.std, model.W, model.center):
        buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    buf += struct.pack("<d", float(model.radius))
    buf += struct.pack("<b", int(model.direction))
    buf += struct.pack("<d", float(model.offset))
    buf += struct.pack("<I", int(model.version))
    return bytes(buf)


def save_cycle_model(model, path):
    """Write :func:`encode_cycle_model` output to ``path``; returns it."""
    data = encode_cycle_model(model)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def decode_cycle_model(data: bytes):
    """Parse bytes written by :func:`encode_cycle_model` (bit-exact)."""
    if data[:4] != MODEL_MAGIC:
        raise ValueError("not a cycle-model file (bad magic)")
    off = 4
    (d,) = struct.unpack_from("<I", data, off)
    off += 4

    def take(count):
        nonlocal off
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).copy()
        off += 8 * count
        return arr

    mean = take(d)
    std = take(d)
    W = take(d * 2).reshape(d, 2)
    center = take(2)
    (radius,) = struct.unpack_from("<d", data, off)
    off += 8
    (direction,) = struct.unpack_from("<b", data, off)
    off += 1
    (offset,) = struct.unpack_from("<d", data, off)
    off += 8
    (version,) = struct.unpack_from("<I", data, off)
    off += 4
    if off != len(data):
        raise ValueError("trailing bytes in model file")
    return CycleModel(
        mean=mean,
        std=std,
        W=W,
        center=center,
        radius=float(radius),
        direction=int(direction),
        offset=float(offset),
        version=int(version),
    )


def load_cycle_model(path):
    """Read a model file written by :func:`save_cycle_model`."""
    with open(path, "rb") as fh:
        return decode_cycle_model(fh.read())
