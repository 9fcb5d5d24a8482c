"""Weighted box fusion of duplicate multi-rater annotations.

Fusion runs per class, greedily and sequentially: boxes are visited in
descending effective score (score x rater weight, ties broken by input
order); each box joins the existing cluster whose *current fused box*
overlaps it most, provided that IoU exceeds the threshold, otherwise it
starts a new cluster.  After every join the fused coordinates are
recomputed as the effective-score-weighted average of the members, so the
fused box drifts as members accumulate.  Clusters come out ordered by
descending fused score.

All arithmetic is plain scalar float: box counts per image are tiny and
the step-by-step semantics above are pinned by oracle tests.
"""

from __future__ import annotations

import concurrent.futures
import logging
from dataclasses import dataclass, field, replace

from .boxes import Box, iou
from .errors import BtcxrError
from .ingest import DatasetManifest, ImageRecord

logger = logging.getLogger(__name__)

SCORE_MODES = ("mean", "mean_scaled_by_rater_count")


@dataclass(frozen=True)
class FusionConfig:
    """Tunables for fusion; the source method leaves all of them open.

    iou_threshold 0.4 merges rater jitter without gluing distinct lesions;
    rater_weights default to 1.0 for every rater; score_mode "mean" keeps
    ground-truth scores at 1.0, while "mean_scaled_by_rater_count" scales
    the fused score by min(#members, #raters)/#raters as an agreement
    signal.
    """

    iou_threshold: float = 0.4
    rater_weights: dict[str, float] = field(default_factory=dict)
    score_mode: str = "mean"

    def __post_init__(self):
        if not (0.0 < self.iou_threshold <= 1.0):
            raise BtcxrError(f"iou_threshold must be in (0,1], got {self.iou_threshold}")
        if self.score_mode not in SCORE_MODES:
            raise BtcxrError(f"score_mode must be one of {SCORE_MODES}")
        if any(w <= 0 for w in self.rater_weights.values()):
            raise BtcxrError("rater weights must be strictly positive")

    def weight_for(self, rater_id: str | None) -> float:
        if rater_id is None:
            return 1.0
        return self.rater_weights.get(rater_id, 1.0)


@dataclass
class FusedCluster:
    """A group of mutually merged boxes and their fused representative."""

    members: list[Box]
    fused: Box


def _fuse_members(members: list[Box], cfg: FusionConfig, n_raters: int) -> Box:
    """Weighted average of member coordinates; score per score_mode."""
    score = sum(b.score for b in members) / len(members)
    if cfg.score_mode == "mean_scaled_by_rater_count" and n_raters > 0:
        score *= min(len(members), n_raters) / n_raters
    if len(members) == 1:
        # The one-member average is the member; skip the rounding of w*x/w.
        return replace(members[0], score=score, rater_id=None)
    wsum = 0.0
    x0 = y0 = x1 = y1 = 0.0
    for b in members:
        w = b.score * cfg.weight_for(b.rater_id)
        wsum += w
        x0 += w * b.x_min
        y0 += w * b.y_min
        x1 += w * b.x_max
        y1 += w * b.y_max
    return Box(
        class_id=members[0].class_id,
        x_min=x0 / wsum,
        y_min=y0 / wsum,
        x_max=x1 / wsum,
        y_max=y1 / wsum,
        score=score,
        rater_id=None,
    )


def fuse_image(boxes: list[Box], cfg: FusionConfig | None = None) -> list[FusedCluster]:
    """Fuse one image's boxes into clusters, per class independently."""
    cfg = cfg or FusionConfig()
    n_raters = len({b.rater_id for b in boxes})

    by_class: dict[int, list[Box]] = {}
    for b in boxes:
        by_class.setdefault(b.class_id, []).append(b)

    clusters: list[FusedCluster] = []
    for class_id in sorted(by_class):
        class_boxes = by_class[class_id]
        # Stable sort keeps input order among equal effective scores.
        order = sorted(
            range(len(class_boxes)),
            key=lambda i: -class_boxes[i].score * cfg.weight_for(class_boxes[i].rater_id),
        )
        class_clusters: list[FusedCluster] = []
        for i in order:
            box = class_boxes[i]
            best = None
            best_iou = cfg.iou_threshold
            for cluster in class_clusters:
                overlap = iou(cluster.fused, box)
                if overlap > best_iou:
                    best = cluster
                    best_iou = overlap
            if best is None:
                class_clusters.append(
                    FusedCluster(members=[box], fused=_fuse_members([box], cfg, n_raters))
                )
            else:
                best.members.append(box)
                best.fused = _fuse_members(best.members, cfg, n_raters)
        clusters.extend(class_clusters)

    clusters.sort(key=lambda c: -c.fused.score)
    return clusters


def _fuse_record(rec: ImageRecord, cfg: FusionConfig) -> ImageRecord:
    if not rec.instance_boxes:
        return rec
    fused = [c.fused for c in fuse_image(rec.instance_boxes, cfg)]
    return replace(rec, instance_boxes=fused)


def fuse_manifest(
    m: DatasetManifest,
    cfg: FusionConfig | None = None,
    threads: int = 1,
) -> DatasetManifest:
    """Fuse every image's boxes; images are independent and keep their order."""
    cfg = cfg or FusionConfig()
    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            images = list(pool.map(lambda rec: _fuse_record(rec, cfg), m.images))
    else:
        images = [_fuse_record(rec, cfg) for rec in m.images]

    provenance = dict(m.provenance)
    provenance["wbf"] = {
        "iou_threshold": cfg.iou_threshold,
        "score_mode": cfg.score_mode,
        "rater_weights": dict(cfg.rater_weights),
    }
    n_in = sum(len(r.instance_boxes) for r in m.images)
    n_out = sum(len(r.instance_boxes) for r in images)
    logger.info("fused %d boxes into %d", n_in, n_out)
    return DatasetManifest(images=images, label_names=list(m.label_names),
                           provenance=provenance)
