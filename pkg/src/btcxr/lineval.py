"""Linear evaluation protocol on frozen feature vectors.

Representation quality is measured by fitting only a linear multi-label
head on externally produced embeddings at several training-set fractions
(label-stratified subsamples) and scoring per-label and macro ROC-AUC on
a held-out feature set.  The head minimizes mean per-element sigmoid
cross-entropy with L2 weight decay by full-batch gradient descent from a
zero initialization, so the fit is deterministic and the optimum unique.

The feature file format (.btfx) is a small flat binary:
    magic "BTFX" | version u32 | N u64 | D u64 | L u64   (little-endian)
    N*D float64 features, row-major
    N*L bytes of {0,1} labels
    newline-joined UTF-8 image ids
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BtcxrError, DegenerateLabels, SchemaVersionMismatch, ShapeMismatch
from .fileio import atomic_write_bytes
from .metrics import roc_auc
from .stratify import subsample_labelsets

logger = logging.getLogger(__name__)

BTFX_MAGIC = b"BTFX"
BTFX_VERSION = 1


@dataclass
class FeatureSet:
    """Frozen features with binary multi-label targets and image ids."""

    features: np.ndarray  # N x D float64
    labels: np.ndarray    # N x L in {0,1}
    ids: list[str]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.features.ndim != 2 or self.labels.ndim != 2:
            raise ShapeMismatch("features and labels must be 2-d")
        if self.features.shape[0] != self.labels.shape[0] or self.features.shape[0] != len(self.ids):
            raise ShapeMismatch(
                f"row counts disagree: features {self.features.shape[0]}, "
                f"labels {self.labels.shape[0]}, ids {len(self.ids)}"
            )
        if self.labels.shape[1] < 1:
            raise ShapeMismatch("need at least one label column")
        if not np.isin(self.labels, (0, 1)).all():
            raise ShapeMismatch("labels must be 0/1")

    @property
    def n_labels(self) -> int:
        return int(self.labels.shape[1])

    def degenerate_columns(self) -> list[int]:
        """Label columns missing a positive or a negative example."""
        return [
            l for l in range(self.n_labels)
            if self.labels[:, l].min() == self.labels[:, l].max()
        ]

    def subset(self, rows: np.ndarray) -> "FeatureSet":
        return FeatureSet(
            features=self.features[rows],
            labels=self.labels[rows],
            ids=[self.ids[i] for i in rows],
        )


@dataclass(frozen=True)
class HeadConfig:
    """Linear-head fit settings; zero init keeps the seed inert for now."""

    lr: float = 0.1
    epochs: int = 500
    l2: float = 1e-4
    seed: int = 0


@dataclass
class LinearHead:
    weights: np.ndarray  # D x L
    bias: np.ndarray     # L
    config: HeadConfig = field(default_factory=HeadConfig)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def head_loss_and_gradient(
    features: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray,
    bias: np.ndarray,
    l2: float,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean per-element sigmoid cross-entropy + l2 * ||weights||^2."""
    n, _ = features.shape
    n_labels = labels.shape[1]
    scores = features @ weights + bias
    probs = _sigmoid(scores)
    # log(sigmoid) written via logaddexp for stability at large |score|
    loss_ce = float(
        np.mean(np.logaddexp(0.0, scores) - labels * scores)
    )
    loss = loss_ce + l2 * float(np.sum(weights * weights))
    dscores = (probs - labels) / (n * n_labels)
    grad_w = features.T @ dscores + 2.0 * l2 * weights
    grad_b = dscores.sum(axis=0)
    return loss, grad_w, grad_b


def train_linear_head(fs: FeatureSet, cfg: HeadConfig | None = None) -> LinearHead:
    """Fit the multi-label linear head by full-batch gradient descent."""
    cfg = cfg or HeadConfig()
    if fs.features.shape[0] < 2:
        raise ShapeMismatch(f"need at least 2 samples, got {fs.features.shape[0]}")
    if len(fs.degenerate_columns()) == fs.n_labels:
        raise DegenerateLabels("no label column has both classes")
    d = fs.features.shape[1]
    weights = np.zeros((d, fs.n_labels))
    bias = np.zeros(fs.n_labels)
    for _ in range(cfg.epochs):
        _, grad_w, grad_b = head_loss_and_gradient(
            fs.features, fs.labels, weights, bias, cfg.l2
        )
        weights -= cfg.lr * grad_w
        bias -= cfg.lr * grad_b
    return LinearHead(weights=weights, bias=bias, config=cfg)


def predict_scores(head: LinearHead, features: np.ndarray) -> np.ndarray:
    return _sigmoid(np.asarray(features, dtype=np.float64) @ head.weights + head.bias)


def _label_sets(fs: FeatureSet) -> list[set[int]]:
    return [set(np.flatnonzero(fs.labels[i]).tolist()) for i in range(len(fs.ids))]


def _macro_auc(
    scores: np.ndarray,
    labels: np.ndarray,
) -> tuple[float, list[float | None], list[int]]:
    """Mean of per-label AUCs over columns carrying both classes."""
    per_label: list[float | None] = []
    excluded: list[int] = []
    for l in range(labels.shape[1]):
        col = labels[:, l]
        if col.min() == col.max():
            per_label.append(None)
            excluded.append(l)
        else:
            per_label.append(roc_auc(col, scores[:, l]))
    defined = [a for a in per_label if a is not None]
    if not defined:
        raise DegenerateLabels("no test label column has both classes")
    return float(np.mean(defined)), per_label, excluded


def _derived_seed(seed: int, fraction_index: int, repeat_index: int) -> int:
    seq = np.random.SeedSequence((seed, fraction_index, repeat_index))
    return int(seq.generate_state(1, np.uint64)[0])


def evaluate_protocol(
    fs_train: FeatureSet,
    fs_test: FeatureSet,
    fractions: list[float] | None = None,
    repeats: int = 5,
    cfg: HeadConfig | None = None,
    seed: int = 0,
) -> dict:
    """Fit-and-score grid over training fractions, repeated with fresh
    stratified subsamples; reports mean and min-max band per fraction.

    The report is a JSON-ready dict; schema documented in the README.
    """
    fractions = fractions if fractions is not None else [0.01, 0.1, 1.0]
    cfg = cfg or HeadConfig()
    if repeats < 1:
        raise BtcxrError(f"repeats must be >= 1, got {repeats}")
    if any(not (0.0 < f <= 1.0) for f in fractions):
        raise BtcxrError(f"fractions must lie in (0,1], got {fractions}")
    if fs_train.n_labels != fs_test.n_labels:
        raise ShapeMismatch(
            f"label spaces differ: train {fs_train.n_labels}, test {fs_test.n_labels}"
        )

    train_ids = list(fs_train.ids)
    train_label_sets = _label_sets(fs_train)
    row_of = {iid: i for i, iid in enumerate(train_ids)}

    results = []
    for fi, fraction in enumerate(fractions):
        cells = []
        for ri in range(repeats):
            sub_seed = _derived_seed(seed, fi, ri)
            if fraction == 1.0:
                rows = np.arange(len(train_ids))
            else:
                chosen = subsample_labelsets(
                    train_ids, train_label_sets, fraction, seed=sub_seed
                )
                rows = np.array(sorted(row_of[iid] for iid in chosen))
            head = train_linear_head(fs_train.subset(rows), cfg)
            test_scores = predict_scores(head, fs_test.features)
            macro, per_label, excluded = _macro_auc(test_scores, fs_test.labels)
            cells.append(
                {
                    "repeat": ri,
                    "subsample_seed": sub_seed,
                    "n_train": int(len(rows)),
                    "macro_auc": macro,
                    "per_label_auc": per_label,
                    "excluded_labels": excluded,
                }
            )
        macros = [c["macro_auc"] for c in cells]
        results.append(
            {
                "fraction": fraction,
                "cells": cells,
                "macro_auc_mean": float(np.mean(macros)),
                "macro_auc_band": [float(np.min(macros)), float(np.max(macros))],
            }
        )
        logger.info("fraction %.3g: macro AUC %.4f", fraction, float(np.mean(macros)))

    return {
        "version": "1",
        "fractions": list(fractions),
        "repeats": repeats,
        "seed": seed,
        "head_config": {"lr": cfg.lr, "epochs": cfg.epochs, "l2": cfg.l2, "seed": cfg.seed},
        "results": results,
    }


# ---------------------------------------------------------------------------
# .btfx feature files
# ---------------------------------------------------------------------------

def write_feature_set(fs: FeatureSet, path: str | os.PathLike) -> None:
    n, d = fs.features.shape
    l = fs.labels.shape[1]
    header = BTFX_MAGIC + struct.pack("<IQQQ", BTFX_VERSION, n, d, l)
    feat = np.ascontiguousarray(fs.features, dtype="<f8").tobytes()
    labs = np.ascontiguousarray(fs.labels, dtype=np.uint8).tobytes()
    ids = "\n".join(fs.ids).encode("utf-8")
    atomic_write_bytes(path, header + feat + labs + ids)


def read_feature_set(path: str | os.PathLike) -> FeatureSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != BTFX_MAGIC:
        raise SchemaVersionMismatch(f"{path}: not a BTFX file")
    version, n, d, l = struct.unpack_from("<IQQQ", blob, 4)
    if version != BTFX_VERSION:
        raise SchemaVersionMismatch(f"{path}: unsupported BTFX version {version}")
    offset = 4 + struct.calcsize("<IQQQ")
    feat_bytes = n * d * 8
    feats = np.frombuffer(blob, dtype="<f8", count=n * d, offset=offset).reshape(n, d)
    labs = np.frombuffer(blob, dtype=np.uint8, count=n * l, offset=offset + feat_bytes).reshape(n, l)
    ids_blob = blob[offset + feat_bytes + n * l:]
    ids = ids_blob.decode("utf-8").split("\n") if ids_blob else []
    if len(ids) != n:
        raise SchemaVersionMismatch(f"{path}: expected {n} ids, found {len(ids)}")
    return FeatureSet(features=feats.copy(), labels=labs.astype(np.int8), ids=ids)
