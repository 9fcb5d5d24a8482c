"""Redundancy-reduction objective on twin embedding batches.

Two batches of embeddings (same samples, different distortions) are
column-standardized and crossed into a D x D correlation matrix.  The
objective pulls the diagonal toward 1 (the two views agree feature by
feature) and the off-diagonal toward 0 (features carry non-redundant
information):

    loss = sum_i (1 - C_ii)^2 + lambda * sum_{i != j} C_ij^2

The analytic gradient includes the centering/scaling terms of the
standardization; the derivation is spelled out in docs/barlow_gradient.md
and pinned by finite-difference tests.

A deterministic augmentation-pair generator and a small full-batch
gradient-descent trainer round out the module; the trainer demonstrates
numerically that the objective drives the cross-correlation toward the
identity on redundant synthetic data.
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceDetected, ImageTooSmall, SchemaVersionMismatch, ShapeMismatch
from .fileio import atomic_write_bytes

logger = logging.getLogger(__name__)


@dataclass
class CrossCorrelation:
    """Cross-correlation matrix with its loss decomposition."""

    matrix: np.ndarray
    lambda_coeff: float
    loss_diag: float
    loss_offdiag: float
    loss_total: float


@dataclass(frozen=True)
class AugmentationSpec:
    """Distortion recipe for grayscale [0,1] images.

    Applied in order: crop-and-resize, horizontal flip, brightness shift,
    contrast scale around the image mean, additive Gaussian noise, clamp
    to [0,1].  All draws come from one stream seeded by (seed, index).
    """

    crop_scale_range: tuple[float, float] = (1.0, 1.0)
    flip_probability: float = 0.0
    noise_sigma: float = 0.0
    brightness_jitter: float = 0.0
    contrast_jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ShapeMismatch(f"crop_scale_range must satisfy 0 < lo <= hi <= 1, got {self.crop_scale_range}")
        if not (0.0 <= self.flip_probability <= 1.0):
            raise ShapeMismatch(f"flip_probability outside [0,1]: {self.flip_probability}")
        if self.noise_sigma < 0 or self.brightness_jitter < 0 or self.contrast_jitter < 0:
            raise ShapeMismatch("jitter magnitudes must be >= 0")


def _validate_pair(za: np.ndarray, zb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    za = np.asarray(za, dtype=np.float64)
    zb = np.asarray(zb, dtype=np.float64)
    if za.ndim != 2 or zb.ndim != 2:
        raise ShapeMismatch(f"expected 2-d batches, got {za.shape} and {zb.shape}")
    if za.shape != zb.shape:
        raise ShapeMismatch(f"batch shapes differ: {za.shape} vs {zb.shape}")
    if za.shape[0] < 2:
        raise ShapeMismatch(f"need at least 2 samples, got {za.shape[0]}")
    if not (np.isfinite(za).all() and np.isfinite(zb).all()):
        raise ShapeMismatch("batches must be finite")
    return za, zb


def _standardize(z: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Column-wise (x - mean) / (population std + eps); returns (z_std, std)."""
    mu = z.mean(axis=0)
    sd = z.std(axis=0)  # ddof=0: matches the 1/N factor in the matrix
    return (z - mu) / (sd + eps), sd


def cross_correlation(za: np.ndarray, zb: np.ndarray, eps: float = 1e-9) -> np.ndarray:
    """D x D cross-correlation of two standardized embedding batches."""
    za, zb = _validate_pair(za, zb)
    n = za.shape[0]
    a_std, _ = _standardize(za, eps)
    b_std, _ = _standardize(zb, eps)
    return (a_std.T @ b_std) / n


def bt_loss(
    za: np.ndarray,
    zb: np.ndarray,
    lambda_coeff: float = 5e-3,
    eps: float = 1e-9,
) -> CrossCorrelation:
    """Loss decomposition: diagonal term + lambda * off-diagonal term."""
    c = cross_correlation(za, zb, eps)
    diag = c.diagonal()
    loss_diag = float(np.sum((1.0 - diag) ** 2))
    off = c.copy()
    np.fill_diagonal(off, 0.0)
    loss_offdiag = float(np.sum(off * off))
    return CrossCorrelation(
        matrix=c,
        lambda_coeff=lambda_coeff,
        loss_diag=loss_diag,
        loss_offdiag=loss_offdiag,
        loss_total=loss_diag + lambda_coeff * loss_offdiag,
    )


def _standardize_backward(
    z: np.ndarray,
    z_std: np.ndarray,
    sd: np.ndarray,
    grad_std: np.ndarray,
    eps: float,
) -> np.ndarray:
    """Backprop one standardization: see docs/barlow_gradient.md.

    For each column, with d = sd + eps and y the standardized column:
        dx = (g - mean(g)) / d - y * mean(g * y) / sd
    The second term vanishes for constant columns (y == 0 there).
    """
    n = z.shape[0]
    d = sd + eps
    g_centered = grad_std - grad_std.mean(axis=0)
    proj = np.sum(grad_std * z_std, axis=0) / n
    with np.errstate(divide="ignore", invalid="ignore"):
        scale_term = np.where(sd > 0.0, proj / sd, 0.0)
    return g_centered / d - z_std * scale_term


def bt_loss_gradient(
    za: np.ndarray,
    zb: np.ndarray,
    lambda_coeff: float = 5e-3,
    eps: float = 1e-9,
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradients of the loss w.r.t. both raw embedding batches."""
    za, zb = _validate_pair(za, zb)
    n = za.shape[0]
    a_std, a_sd = _standardize(za, eps)
    b_std, b_sd = _standardize(zb, eps)
    c = (a_std.T @ b_std) / n

    grad_c = 2.0 * lambda_coeff * c
    np.fill_diagonal(grad_c, -2.0 * (1.0 - c.diagonal()))

    grad_a_std = (b_std @ grad_c.T) / n
    grad_b_std = (a_std @ grad_c) / n
    grad_a = _standardize_backward(za, a_std, a_sd, grad_a_std, eps)
    grad_b = _standardize_backward(zb, b_std, b_sd, grad_b_std, eps)
    return grad_a, grad_b


# ---------------------------------------------------------------------------
# Augmentation pairs
# ---------------------------------------------------------------------------

def _bilinear_crop_resize(
    img: np.ndarray,
    y0: int,
    x0: int,
    ch: int,
    cw: int,
) -> np.ndarray:
    """Resample the crop [y0, y0+ch) x [x0, x0+cw) back to img's shape."""
    h, w = img.shape
    ys = y0 + np.arange(h) * ((ch - 1) / (h - 1))
    xs = x0 + np.arange(w) * ((cw - 1) / (w - 1))
    yf = np.floor(ys).astype(np.int64)
    xf = np.floor(xs).astype(np.int64)
    wy = ys - yf
    wx = xs - xf
    yf1 = np.minimum(yf + 1, h - 1)
    xf1 = np.minimum(xf + 1, w - 1)
    top = img[yf][:, xf] * (1 - wx) + img[yf][:, xf1] * wx
    bot = img[yf1][:, xf] * (1 - wx) + img[yf1][:, xf1] * wx
    return top * (1 - wy)[:, None] + bot * wy[:, None]


def _one_view(img: np.ndarray, spec: AugmentationSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape
    lo, hi = spec.crop_scale_range
    scale = rng.uniform(lo, hi)
    ch = max(2, int(round(scale * h)))
    cw = max(2, int(round(scale * w)))
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    view = _bilinear_crop_resize(img, y0, x0, ch, cw)

    if rng.uniform(0.0, 1.0) < spec.flip_probability:
        view = view[:, ::-1]

    shift = rng.uniform(-spec.brightness_jitter, spec.brightness_jitter)
    view = view + shift

    delta_c = rng.uniform(-spec.contrast_jitter, spec.contrast_jitter)
    view = view + delta_c * (view - view.mean())

    noise = rng.normal(0.0, 1.0, size=view.shape) * spec.noise_sigma
    view = view + noise
    return np.clip(view, 0.0, 1.0)


def augment_pair(
    image: np.ndarray,
    spec: AugmentationSpec,
    index: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Two independently distorted views of one image.

    The draw stream is fully determined by (spec.seed, index): view A
    consumes its draws first, then view B, so pairs are reproducible.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ImageTooSmall(f"expected a 2-d grayscale image, got shape {img.shape}")
    if img.shape[0] < 8 or img.shape[1] < 8:
        raise ImageTooSmall(f"image must be at least 8x8, got {img.shape}")
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, index)))
    return _one_view(img, spec, rng), _one_view(img, spec, rng)


# ---------------------------------------------------------------------------
# Desk-scale trainer
# ---------------------------------------------------------------------------

@dataclass
class TrainingTrace:
    """Per-epoch loss decomposition plus the final cross-correlation."""

    loss_total: list[float]
    loss_diag: list[float]
    loss_offdiag: list[float]
    final: CrossCorrelation


class _Encoder:
    """Fully connected net, tanh between layers, linear output."""

    def __init__(self, dims: list[int], rng: np.random.Generator):
        if len(dims) < 2:
            raise ShapeMismatch(f"encoder needs at least input and output widths, got {dims}")
        self.weights = [
            rng.standard_normal((dims[i], dims[i + 1])) / np.sqrt(dims[i])
            for i in range(len(dims) - 1)
        ]
        self.biases = [np.zeros(dims[i + 1]) for i in range(len(dims) - 1)]

    def forward(self, x: np.ndarray) -> list[np.ndarray]:
        """Returns [input, hidden activations..., output]."""
        acts = [x]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            pre = acts[-1] @ w + b
            acts.append(np.tanh(pre) if i < len(self.weights) - 1 else pre)
        return acts

    def backward(self, acts: list[np.ndarray], grad_out: np.ndarray):
        """Per-layer (dW, db) given the gradient at the output."""
        grads_w = [np.zeros_like(w) for w in self.weights]
        grads_b = [np.zeros_like(b) for b in self.biases]
        delta = grad_out
        for i in reversed(range(len(self.weights))):
            if i < len(self.weights) - 1:
                delta = delta * (1.0 - acts[i + 1] ** 2)  # tanh'
            grads_w[i] = acts[i].T @ delta
            grads_b[i] = delta.sum(axis=0)
            if i > 0:
                delta = delta @ self.weights[i].T
        return grads_w, grads_b


def _make_views(
    data: np.ndarray,
    spec: AugmentationSpec,
) -> tuple[np.ndarray, np.ndarray]:
    """Fixed twin views for every sample: images via augment_pair, vectors
    via additive Gaussian noise (the only distortion meaningful for them)."""
    if data.ndim == 3:  # N x H x W images
        pairs = [augment_pair(img, spec, index=i) for i, img in enumerate(data)]
        va = np.stack([a.reshape(-1) for a, _ in pairs])
        vb = np.stack([b.reshape(-1) for _, b in pairs])
        return va, vb
    if data.ndim == 2:  # N x D vectors
        n, d = data.shape
        va = np.empty_like(data)
        vb = np.empty_like(data)
        for i in range(n):
            rng = np.random.default_rng(np.random.SeedSequence((spec.seed, i)))
            va[i] = data[i] + rng.standard_normal(d) * spec.noise_sigma
            vb[i] = data[i] + rng.standard_normal(d) * spec.noise_sigma
        return va, vb
    raise ShapeMismatch(f"data must be N x D vectors or N x H x W images, got shape {data.shape}")


def bt_train_toy(
    data: np.ndarray,
    encoder_dims: list[int],
    spec: AugmentationSpec,
    lambda_coeff: float = 5e-3,
    lr: float = 0.05,
    epochs: int = 500,
    seed: int = 0,
    eps: float = 1e-9,
) -> TrainingTrace:
    """Full-batch gradient descent of the twin objective through a small
    fully connected encoder; deterministic given (data, spec, seed).

    Views are generated once and held fixed, so the loss is an exact
    deterministic function of the weights and decreases monotonically for
    a sufficiently small learning rate.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.shape[0] < 2:
        raise ShapeMismatch(f"need at least 2 samples, got {data.shape[0]}")
    va, vb = _make_views(data, spec)
    if va.shape[1] != encoder_dims[0]:
        raise ShapeMismatch(
            f"sample dimension {va.shape[1]} does not match encoder input width {encoder_dims[0]}"
        )

    enc = _Encoder(list(encoder_dims), np.random.default_rng(seed))
    trace_total: list[float] = []
    trace_diag: list[float] = []
    trace_offdiag: list[float] = []

    for epoch in range(epochs):
        acts_a = enc.forward(va)
        acts_b = enc.forward(vb)
        cc = bt_loss(acts_a[-1], acts_b[-1], lambda_coeff, eps)
        if not np.isfinite(cc.loss_total):
            raise DivergenceDetected(f"loss became non-finite at epoch {epoch}")
        trace_total.append(cc.loss_total)
        trace_diag.append(cc.loss_diag)
        trace_offdiag.append(cc.loss_offdiag)

        grad_a, grad_b = bt_loss_gradient(acts_a[-1], acts_b[-1], lambda_coeff, eps)
        gw_a, gb_a = enc.backward(acts_a, grad_a)
        gw_b, gb_b = enc.backward(acts_b, grad_b)
        for i in range(len(enc.weights)):
            enc.weights[i] -= lr * (gw_a[i] + gw_b[i])
            enc.biases[i] -= lr * (gb_a[i] + gb_b[i])

    final = bt_loss(enc.forward(va)[-1], enc.forward(vb)[-1], lambda_coeff, eps)
    logger.info("trained %d epochs, final loss %.6f", epochs, final.loss_total)
    return TrainingTrace(
        loss_total=trace_total,
        loss_diag=trace_diag,
        loss_offdiag=trace_offdiag,
        final=final,
    )


# ---------------------------------------------------------------------------
# Training-data files: header {N, H, W} as little-endian u64, then
# N*H*W float64 row-major.  H == 1 marks N vectors of width W.
# ---------------------------------------------------------------------------

def write_train_data(data: np.ndarray, path: str | os.PathLike) -> None:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 2:
        n, w = data.shape
        h = 1
    elif data.ndim == 3:
        n, h, w = data.shape
    else:
        raise ShapeMismatch(f"expected N x D or N x H x W data, got shape {data.shape}")
    header = struct.pack("<QQQ", n, h, w)
    atomic_write_bytes(path, header + np.ascontiguousarray(data, dtype="<f8").tobytes())


def read_train_data(path: str | os.PathLike) -> np.ndarray:
    """Returns N x D vectors when H == 1, else N x H x W images."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 24:
        raise SchemaVersionMismatch(f"{path}: truncated header")
    n, h, w = struct.unpack_from("<QQQ", blob, 0)
    expected = 24 + n * h * w * 8
    if len(blob) != expected:
        raise SchemaVersionMismatch(
            f"{path}: expected {expected} bytes for {n}x{h}x{w} float64, got {len(blob)}"
        )
    data = np.frombuffer(blob, dtype="<f8", offset=24).copy()
    if h == 1:
        return data.reshape(n, w)
    return data.reshape(n, h, w)
