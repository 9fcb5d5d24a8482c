"""Deterministic synthetic fixtures shared by tests, demos, and the CLI.

The generators here are part of the package (not the test suite) because
the training demo and the linear-evaluation trend check are meaningful
user-facing entry points, and both need reproducible data.
"""

from __future__ import annotations

import numpy as np

from .lineval import FeatureSet


def make_redundant_vectors(
    n: int = 256,
    d_latent: int = 8,
    duplication: int = 2,
    seed: int = 7,
) -> np.ndarray:
    """N x (d_latent * duplication) Gaussian vectors with exactly duplicated
    coordinate blocks: a maximally redundant input for the twin objective."""
    rng = np.random.default_rng(seed)
    latent = rng.standard_normal((n, d_latent))
    return np.concatenate([latent] * duplication, axis=1)


def make_linear_eval_features(
    n: int,
    n_features: int = 16,
    n_labels: int = 4,
    signal: float = 1.5,
    label_noise: float = 1.0,
    seed: int = 0,
) -> FeatureSet:
    """Features with a planted linear labeling rule plus label noise.

    Small training subsets estimate the rule poorly and large ones well,
    so downstream macro AUC grows with the training fraction.  Every label
    column is guaranteed to carry both classes.
    """
    rng = np.random.default_rng(seed)
    features = rng.standard_normal((n, n_features))
    true_w = rng.standard_normal((n_features, n_labels))
    true_w /= np.linalg.norm(true_w, axis=0, keepdims=True)
    logits = signal * (features @ true_w) + label_noise * rng.standard_normal((n, n_labels))
    labels = (logits > 0).astype(np.int8)
    for l in range(n_labels):
        # Flip two rows if a column came out single-class (vanishingly rare).
        if labels[:, l].min() == labels[:, l].max():
            labels[0, l] = 1 - labels[0, l]
            labels[1, l] = 1 - labels[1, l]
    ids = [f"img_{i:05d}" for i in range(n)]
    return FeatureSet(features=features, labels=labels, ids=ids)
