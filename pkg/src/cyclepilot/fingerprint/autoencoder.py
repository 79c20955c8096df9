"""Learned fingerprint: a small masked dense autoencoder.

Architecture is fixed to [S^2, 64, latent, 64, S^2] with tanh hidden
layers and a linear output.  Training minimizes reconstruction MSE over a
random masked subset of input pixels (fraction ``m`` of the image is
zeroed at the encoder input; the loss is taken over exactly those
positions).  Conventions:

* mask fraction m = 0 selects no pixels for masking; by convention the
  loss is then taken over ALL pixels (plain autoencoder).
* an explicit all-false mask handed to the loss gives loss 0, gradient 0
  (empty-set convention).

The latent activations of the encoder half are the learned fingerprint.
Per-epoch augmentation re-draws a nuisance variant of each crop (grid
rotation, flip, noise, re-standardized) so the code learns to ignore
exactly the nuisances the analytic features are built to ignore.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from cyclepilot.fingerprint.analytic import Fingerprint

__all__ = [
    "AEModel",
    "TrainConfig",
    "TrainReport",
    "TrainingDivergedError",
    "init_model",
    "train_autoencoder",
    "encode_learned",
    "grad_check",
    "save_ae_model",
    "load_ae_model",
]

AE_MAGIC = b"AEv1"


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch, loss):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 200
    batch: int = 16
    seed: int = 0
    augment: bool = True


@dataclass
class TrainReport:
    loss_curve: list = field(default_factory=list)
    epochs_run: int = 0

    @property
    def final_loss(self):
        return self.loss_curve[-1] if self.loss_curve else None


@dataclass
class AEModel:
    """Dense autoencoder weights.  ``layer_dims`` = [S^2, 64, latent, 64, S^2]."""

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    mask_fraction: float = 0.5
    train_config: TrainConfig | None = None

    @property
    def input_side(self) -> int:
        return int(round(self.layer_dims[0] ** 0.5))

    @property
    def latent_dim(self) -> int:
        return int(self.layer_dims[2])


def init_model(input_dim: int, hidden: int = 64, latent: int = 8,
               mask_fraction: float = 0.5, seed: int = 0) -> AEModel:
    """Uniform +-1/sqrt(fan_in) init, zero biases."""
    if not 0.0 <= mask_fraction < 1.0:
        raise ValueError("mask_fraction must be in [0, 1)")
    dims = [input_dim, hidden, latent, hidden, input_dim]
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return AEModel(layer_dims=dims, weights=weights, biases=biases, mask_fraction=mask_fraction)


def _forward(model: AEModel, x: np.ndarray):
    """Forward pass; returns per-layer activations [a0 .. a4].

    Hidden layers (1..3) are tanh; the output layer is linear.
    """
    acts = [x]
    a = x
    last = len(model.weights) - 1
    for li, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ W + b
        a = z if li == last else np.tanh(z)
        acts.append(a)
    return acts


def masked_loss_and_grads(model: AEModel, target: np.ndarray, masked_input: np.ndarray,
                          mask: np.ndarray):
    """MSE over masked positions and its gradients.

    target, masked_input : (B, S^2) batches.
    mask : (B, S^2) boolean; positions included in the loss.  An all-false
    mask returns loss 0 and zero gradients.
    """
    m_count = int(mask.sum())
    zero_w = [np.zeros_like(W) for W in model.weights]
    zero_b = [np.zeros_like(b) for b in model.biases]
    if m_count == 0:
        return 0.0, zero_w, zero_b
    acts = _forward(model, masked_input)
    out = acts[-1]
    diff = np.where(mask, out - target, 0.0)
    loss = float(np.sum(diff * diff) / m_count)

    grads_w = zero_w
    grads_b = zero_b
    delta = 2.0 * diff / m_count  # d loss / d out
    last = len(model.weights) - 1
    for li in range(last, -1, -1):
        a_prev = acts[li]
        grads_w[li] = a_prev.T @ delta
        grads_b[li] = delta.sum(axis=0)
        if li > 0:
            delta = (delta @ model.weights[li].T) * (1.0 - acts[li] ** 2)
    return loss, grads_w, grads_b


def _augment(px: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random nuisance variant of one (S, S) crop, re-standardized."""
    out = np.rot90(px, k=int(rng.integers(0, 4)))
    if rng.uniform() < 0.5:
        out = out[:, ::-1]
    out = out + rng.normal(0.0, rng.uniform(0.0, 0.1), out.shape)
    std = out.std()
    return (out - out.mean()) / (std if std > 1e-12 else 1.0)


def _as_matrix(crops) -> np.ndarray:
    rows = []
    for c in crops:
        px = c.pixels if hasattr(c, "pixels") else np.asarray(c, dtype=float)
        rows.append(np.asarray(px, dtype=float))
    return np.stack(rows)


def train_autoencoder(crops, latent: int = 8, hidden: int = 64,
                      mask_fraction: float = 0.5, config: TrainConfig = TrainConfig()):
    """Train on a list of normalized crops; returns (AEModel, TrainReport).

    Deterministic for a fixed config seed.  Raises TrainingDivergedError
    on a non-finite loss.  ``epochs=0`` returns the initialized model
    with an empty loss curve.
    """
    stack = _as_matrix(crops)
    n, S, _ = stack.shape
    model = init_model(S * S, hidden=hidden, latent=latent,
                       mask_fraction=mask_fraction, seed=config.seed)
    model.train_config = config
    report = TrainReport()
    rng = np.random.default_rng(config.seed + 1)
    vel_w = [np.zeros_like(W) for W in model.weights]
    vel_b = [np.zeros_like(b) for b in model.biases]

    for epoch in range(config.epochs):
        if config.augment:
            epoch_imgs = np.stack([_augment(stack[i], rng) for i in range(n)])
        else:
            epoch_imgs = stack
        flat = epoch_imgs.reshape(n, -1)
        order = rng.permutation(n)
        epoch_loss = 0.0
        seen = 0
        for start in range(0, n, config.batch):
            idx = order[start : start + config.batch]
            target = flat[idx]
            if mask_fraction > 0:
                mask = rng.uniform(size=target.shape) < mask_fraction
            else:
                mask = np.ones_like(target, dtype=bool)
            masked_input = np.where(mask, 0.0, target)
            loss, gw, gb = masked_loss_and_grads(model, target, masked_input, mask)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            for li in range(len(model.weights)):
                vel_w[li] = config.momentum * vel_w[li] - config.lr * gw[li]
                vel_b[li] = config.momentum * vel_b[li] - config.lr * gb[li]
                model.weights[li] += vel_w[li]
                model.biases[li] += vel_b[li]
            epoch_loss += loss * len(idx)
            seen += len(idx)
        report.loss_curve.append(epoch_loss / max(seen, 1))
        report.epochs_run = epoch + 1
    return model, report


def encode_learned(model: AEModel, crop) -> Fingerprint:
    """Latent activations of the encoder half for one crop."""
    px = crop.pixels if hasattr(crop, "pixels") else np.asarray(crop, dtype=float)
    x = np.asarray(px, dtype=float).reshape(1, -1)
    if x.shape[1] != model.layer_dims[0]:
        raise ValueError(f"crop has {x.shape[1]} pixels, model expects {model.layer_dims[0]}")
    acts = _forward(model, x)
    return Fingerprint(values=acts[2].ravel().copy(), backend="learned")


def grad_check(model: AEModel | None = None, seed: int = 7, h: float = 1e-4) -> float:
    """Max relative error between backprop and central finite differences.

    Uses a small probe model (8x8 input, hidden 8, latent 3) unless one is
    given.  Relative error uses denominator max(|a|, |b|, 1e-8).
    """
    rng = np.random.default_rng(seed)
    if model is None:
        model = init_model(64, hidden=8, latent=3, mask_fraction=0.5, seed=seed)
    d = model.layer_dims[0]
    target = rng.normal(size=(2, d))
    mask = rng.uniform(size=target.shape) < 0.5
    masked_input = np.where(mask, 0.0, target)

    def loss_only():
        m_count = int(mask.sum())
        if m_count == 0:
            return 0.0
        out = _forward(model, masked_input)[-1]
        diff = np.where(mask, out - target, 0.0)
        return float(np.sum(diff * diff) / m_count)

    _, gw, gb = masked_loss_and_grads(model, target, masked_input, mask)
    worst = 0.0
    for params, grads in ((model.weights, gw), (model.biases, gb)):
        for arr, g in zip(params, grads):
            it = np.nditer(arr, flags=["multi_index"])
            while not it.finished:
                ix = it.multi_index
                orig = arr[ix]
                arr[ix] = orig + h
                up = loss_only()
                arr[ix] = orig - h
                dn = loss_only()
                arr[ix] = orig
                fd = (up - dn) / (2 * h)
                an = g[ix]
                rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
                worst = max(worst, rel)
                it.iternext()
    return worst


def save_ae_model(model: AEModel, path) -> bytes:
    """Binary format: magic ``AEv1`` | u32 n_dims | u32 dims[] | f32 m |
    per layer: f32 W row-major, f32 b.  Little-endian float32 weights."""
    buf = bytearray()
    buf += AE_MAGIC
    buf += struct.pack("<I", len(model.layer_dims))
    buf += struct.pack(f"<{len(model.layer_dims)}I", *model.layer_dims)
    buf += struct.pack("<f", float(model.mask_fraction))
    for W, b in zip(model.weights, model.biases):
        buf += np.ascontiguousarray(W, dtype="<f4").tobytes()
        buf += np.ascontiguousarray(b, dtype="<f4").tobytes()
    data = bytes(buf)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def load_ae_model(path) -> AEModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != AE_MAGIC:
        raise ValueError("not an autoencoder file (bad magic)")
    off = 4
    (n_dims,) = struct.unpack_from("<I", data, off)
    off += 4
    dims = list(struct.unpack_from(f"<{n_dims}I", data, off))
    off += 4 * n_dims
    (m,) = struct.unpack_from("<f", data, off)
    off += 4
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        W = np.frombuffer(data, dtype="<f4", count=fan_in * fan_out, offset=off).copy()
        off += 4 * fan_in * fan_out
        b = np.frombuffer(data, dtype="<f4", count=fan_out, offset=off).copy()
        off += 4 * fan_out
        weights.append(W.reshape(fan_in, fan_out).astype(float))
        biases.append(b.astype(float))
    if off != len(data):
        raise ValueError("trailing bytes in autoencoder file")
    return AEModel(layer_dims=dims, weights=weights, biases=biases, mask_fraction=float(m))
