"""Iterative stratification of multi-label datasets into folds.

The splitter preserves per-label proportions greedily: at each round it
picks the label with the fewest remaining unassigned examples and deals
those examples to the folds hungriest for that label.  Tie-breaking is
fully pinned (label index, then remaining fold capacity, then a seeded
draw) so the same inputs give the same split on every platform.

Randomness comes from a self-contained 64-bit mixing generator (splitmix
update; see docs/determinism.md), never from platform RNG state.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .errors import BtcxrError, EmptyDataset, FractionTooSmall
from .ingest import DatasetManifest

logger = logging.getLogger(__name__)

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """Deterministic 64-bit generator with the splitmix64 update rule.

    Fully specified by the constants below, so sequences are reproducible
    across interpreters and platforms (no dependence on platform RNG).
    """

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return (z ^ (z >> 31)) & _MASK64

    def choice(self, n: int) -> int:
        """Index in [0, n). Modulo bias is irrelevant for tie-breaking."""
        return self.next_u64() % n


@dataclass(frozen=True)
class SplitSpec:
    """Fold names, fractions (sum 1), and the seed driving tie-breaks."""

    fold_names: tuple[str, ...]
    fold_fractions: tuple[float, ...]
    seed: int = 0

    def __post_init__(self):
        if len(self.fold_names) != len(self.fold_fractions):
            raise BtcxrError("fold_names and fold_fractions lengths differ")
        if len(self.fold_names) < 2:
            raise BtcxrError("need at least 2 folds")
        if len(set(self.fold_names)) != len(self.fold_names):
            raise BtcxrError("fold names must be distinct")
        if any(not (0.0 < f < 1.0) for f in self.fold_fractions):
            raise BtcxrError("every fold fraction must lie in (0,1)")
        if abs(sum(self.fold_fractions) - 1.0) > 1e-9:
            raise BtcxrError(f"fractions sum to {sum(self.fold_fractions)}, not 1")


@dataclass
class SplitAssignment:
    """image_id -> fold plus the per-(fold,label) counts actually achieved."""

    assignment: dict[str, str]
    spec: SplitSpec
    per_label_counts: dict[tuple[str, int], int] = field(default_factory=dict)


def iterative_stratify(
    ids: Sequence[str],
    label_sets: Sequence[set[int]],
    spec: SplitSpec,
) -> SplitAssignment:
    """Core algorithm on (id, label-set) pairs; see module docstring.

    Examples carrying the chosen label are processed in input order;
    unlabeled examples are dealt last to the fold with the most remaining
    capacity.
    """
    if len(ids) == 0:
        raise EmptyDataset("cannot split an empty dataset")
    if len(ids) != len(label_sets):
        raise BtcxrError("ids and label_sets lengths differ")

    rng = SplitMix64(spec.seed)
    n_folds = len(spec.fold_names)
    n = len(ids)

    # Desired totals per fold and per (fold, label).
    fold_remaining = [frac * n for frac in spec.fold_fractions]
    all_labels = sorted({lab for labs in label_sets for lab in labs})
    label_totals = {lab: sum(1 for labs in label_sets if lab in labs) for lab in all_labels}
    label_remaining = {
        lab: [frac * label_totals[lab] for frac in spec.fold_fractions]
        for lab in all_labels
    }

    unassigned = list(range(n))
    fold_of: dict[int, int] = {}

    def assign(idx: int, fold: int) -> None:
        fold_of[idx] = fold
        fold_remaining[fold] -= 1.0
        for lab in label_sets[idx]:
            label_remaining[lab][fold] -= 1.0

    while True:
        remaining_label_counts = {lab: 0 for lab in all_labels}
        for idx in unassigned:
            for lab in label_sets[idx]:
                remaining_label_counts[lab] += 1
        candidates = [(cnt, lab) for lab, cnt in remaining_label_counts.items() if cnt > 0]
        if not candidates:
            break
        # Rarest label first; ties fall to the lower label index.
        _, label = min(candidates)

        batch = [idx for idx in unassigned if label in label_sets[idx]]
        for idx in batch:
            desiderata = label_remaining[label]
            best = max(desiderata)
            tied = [k for k in range(n_folds) if desiderata[k] == best]
            if len(tied) > 1:
                best_total = max(fold_remaining[k] for k in tied)
                tied = [k for k in tied if fold_remaining[k] == best_total]
            fold = tied[0] if len(tied) == 1 else tied[rng.choice(len(tied))]
            assign(idx, fold)
        batch_set = set(batch)
        unassigned = [idx for idx in unassigned if idx not in batch_set]

    # Unlabeled examples last, by remaining fold capacity.
    for idx in unassigned:
        best_total = max(fold_remaining)
        tied = [k for k in range(n_folds) if fold_remaining[k] == best_total]
        fold = tied[0] if len(tied) == 1 else tied[rng.choice(len(tied))]
        assign(idx, fold)

    assignment = {ids[i]: spec.fold_names[fold_of[i]] for i in range(n)}
    counts: dict[tuple[str, int], int] = {
        (name, lab): 0 for name in spec.fold_names for lab in all_labels
    }
    for i in range(n):
        for lab in label_sets[i]:
            counts[(assignment[ids[i]], lab)] += 1

    return SplitAssignment(assignment=assignment, spec=spec, per_label_counts=counts)


def stratified_split(m: DatasetManifest, spec: SplitSpec) -> SplitAssignment:
    """Split a manifest; labels come from image_labels, else box classes."""
    ids = m.image_ids()
    label_sets = [m.labels_for_split(rec) for rec in m.images]
    return iterative_stratify(ids, label_sets, spec)


def stratified_subsample(
    m: DatasetManifest,
    fraction: float,
    seed: int = 0,
) -> set[str]:
    """Label-balanced subsample of the manifest's image ids."""
    if not m.images:
        raise EmptyDataset("cannot subsample an empty dataset")
    if not (0.0 < fraction <= 1.0):
        raise BtcxrError(f"fraction must be in (0,1], got {fraction}")
    if fraction == 1.0:
        return set(m.image_ids())
    if fraction * len(m.images) < 1.0:
        raise FractionTooSmall(
            f"fraction {fraction} of {len(m.images)} images selects an empty fold"
        )
    spec = SplitSpec(
        fold_names=("selected", "rest"),
        fold_fractions=(fraction, 1.0 - fraction),
        seed=seed,
    )
    result = stratified_split(m, spec)
    selected = {iid for iid, fold in result.assignment.items() if fold == "selected"}
    if not selected:
        raise FractionTooSmall(
            f"fraction {fraction} of {len(m.images)} images selected nothing"
        )
    return selected


def subsample_labelsets(
    ids: Sequence[str],
    label_sets: Sequence[set[int]],
    fraction: float,
    seed: int = 0,
) -> set[str]:
    """stratified_subsample for callers holding raw (id, label-set) pairs."""
    if len(ids) == 0:
        raise EmptyDataset("cannot subsample an empty dataset")
    if not (0.0 < fraction <= 1.0):
        raise BtcxrError(f"fraction must be in (0,1], got {fraction}")
    if fraction == 1.0:
        return set(ids)
    if fraction * len(ids) < 1.0:
        raise FractionTooSmall(
            f"fraction {fraction} of {len(ids)} examples selects an empty fold"
        )
    spec = SplitSpec(
        fold_names=("selected", "rest"),
        fold_fractions=(fraction, 1.0 - fraction),
        seed=seed,
    )
    result = iterative_stratify(ids, label_sets, spec)
    return {iid for iid, fold in result.assignment.items() if fold == "selected"}


def assignment_to_dict(a: SplitAssignment) -> dict:
    """split.json layout: {version, spec, assignment}."""
    return {
        "version": "1",
        "spec": {
            "fold_names": list(a.spec.fold_names),
            "fold_fractions": list(a.spec.fold_fractions),
            "seed": a.spec.seed,
        },
        "assignment": dict(a.assignment),
    }


def fold_sizes(a: SplitAssignment) -> Mapping[str, int]:
    sizes = {name: 0 for name in a.spec.fold_names}
    for fold in a.assignment.values():
        sizes[fold] += 1
    return sizes
