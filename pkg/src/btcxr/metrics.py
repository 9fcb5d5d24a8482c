"""Detection and classification scoring with bootstrap confidence intervals.

Average precision uses the standard greedy matcher: within an image,
detections are visited in descending confidence (ties by input order) and
each one claims the unmatched ground-truth box it overlaps most, provided
IoU >= the threshold.  The precision-recall curve is accumulated over the
globally score-sorted detection list and integrated either exactly
(continuous envelope area) or at 101 evenly spaced recall points.

ROC-AUC is the Mann-Whitney statistic, computed from average ranks so
tied scores contribute half a concordant pair.

Confidence intervals resample *images* with replacement: the uncertainty
being reported is over test-set composition.  Replicate i draws from a
generator seeded with seed+i, so replicates are reproducible and may be
computed concurrently without changing the result.
"""

from __future__ import annotations

import concurrent.futures
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence, TypeVar

import numpy as np

from .boxes import Box
from .errors import (
    AllResamplesUndefined,
    BtcxrError,
    NoGroundTruth,
    SingleClassOnly,
    UnknownImageId,
)
from .fileio import read_jsonl
from .ingest import DatasetManifest

logger = logging.getLogger(__name__)

AP_MODES = ("continuous", "points101")
EMPTY_CLASS_MODES = ("exclude", "zero")


@dataclass(frozen=True)
class Detection:
    """One model prediction: the box's score field is the confidence."""

    image_id: str
    box: Box


def read_detections(path) -> list[Detection]:
    """Load a JSON-lines detections file (normalized coordinates)."""
    dets = []
    for line_no, obj in enumerate(read_jsonl(path), start=1):
        try:
            box = Box(
                class_id=int(obj["class_id"]),
                x_min=float(obj["x_min"]),
                y_min=float(obj["y_min"]),
                x_max=float(obj["x_max"]),
                y_max=float(obj["y_max"]),
                score=float(obj["score"]),
            )
            dets.append(Detection(image_id=str(obj["image_id"]), box=box))
        except KeyError as exc:
            raise BtcxrError(f"{path}: line {line_no}: missing field {exc}") from exc
        except BtcxrError as exc:
            raise BtcxrError(f"{path}: line {line_no}: {exc}") from exc
    return dets


def read_label_scores(path) -> dict[str, list[float]]:
    """Load a JSON-lines classification-scores file."""
    scores: dict[str, list[float]] = {}
    for line_no, obj in enumerate(read_jsonl(path), start=1):
        try:
            iid = str(obj["image_id"])
            row = [float(v) for v in obj["scores"]]
        except KeyError as exc:
            raise BtcxrError(f"{path}: line {line_no}: missing field {exc}") from exc
        if iid in scores:
            raise BtcxrError(f"{path}: line {line_no}: duplicate image_id {iid!r}")
        scores[iid] = row
    return scores


_T = TypeVar("_T")
_U = TypeVar("_U")


def _map_ordered(fn: Callable[[_T], _U], items: Iterable[_T], threads: int) -> list[_U]:
    """map() that may fan out to a thread pool; output order is fixed."""
    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


# ---------------------------------------------------------------------------
# Matching and average precision
# ---------------------------------------------------------------------------

class _ClassParts(NamedTuple):
    """Per-image matching result for one class, reusable across resamples."""

    scores: np.ndarray  # detection confidences, image input order
    tp: np.ndarray      # bool, aligned with scores
    n_gt: int


def _match_image(
    gt_boxes: Sequence[Box],
    det_boxes: Sequence[Box],
    iou_thr: float,
) -> np.ndarray:
    """True-positive flags for one image's detections of one class.

    Detections are processed in descending score (stable w.r.t. input
    order); each takes the unmatched ground truth with the highest IoU when
    that IoU reaches the threshold.  IoU ties go to the earliest ground
    truth.
    """
    n_det = len(det_boxes)
    tp = np.zeros(n_det, dtype=bool)
    if not gt_boxes or n_det == 0:
        return tp
    order = sorted(range(n_det), key=lambda i: -det_boxes[i].score)
    taken = [False] * len(gt_boxes)
    for i in order:
        det = det_boxes[i]
        best_j = -1
        best_iou = 0.0
        for j, gt in enumerate(gt_boxes):
            if taken[j]:
                continue
            ix = min(det.x_max, gt.x_max) - max(det.x_min, gt.x_min)
            iy = min(det.y_max, gt.y_max) - max(det.y_min, gt.y_min)
            if ix <= 0.0 or iy <= 0.0:
                continue
            inter = ix * iy
            overlap = inter / (det.area + gt.area - inter)
            if overlap > best_iou:
                best_iou = overlap
                best_j = j
        if best_j >= 0 and best_iou >= iou_thr:
            taken[best_j] = True
            tp[i] = True
    return tp


def _class_parts(
    gts: Mapping[str, Sequence[Box]],
    dets: Sequence[Detection],
    class_id: int,
    iou_thr: float,
) -> dict[str, _ClassParts]:
    """Match one class on every image; keyed by image_id."""
    det_by_image: dict[str, list[Box]] = {iid: [] for iid in gts}
    for det in dets:
        if det.box.class_id != class_id:
            continue
        if det.image_id not in det_by_image:
            raise UnknownImageId(
                f"detection references unknown image_id {det.image_id!r}"
            )
        det_by_image[det.image_id].append(det.box)

    parts: dict[str, _ClassParts] = {}
    for iid, gt_boxes_all in gts.items():
        gt_boxes = [b for b in gt_boxes_all if b.class_id == class_id]
        det_boxes = det_by_image[iid]
        tp = _match_image(gt_boxes, det_boxes, iou_thr)
        scores = np.array([b.score for b in det_boxes], dtype=np.float64)
        parts[iid] = _ClassParts(scores=scores, tp=tp, n_gt=len(gt_boxes))
    return parts


def _ap_from_parts(
    parts: dict[str, _ClassParts],
    image_order: Sequence[str],
    mode: str,
) -> float | None:
    """Aggregate per-image parts (with multiplicity) into one AP value."""
    scores_list = [parts[iid].scores for iid in image_order]
    tp_list = [parts[iid].tp for iid in image_order]
    n_gt = sum(parts[iid].n_gt for iid in image_order)
    if n_gt == 0:
        return None
    if not scores_list or sum(len(s) for s in scores_list) == 0:
        return 0.0

    scores = np.concatenate(scores_list)
    tp = np.concatenate(tp_list)
    # Stable sort pins tie order to the concatenated input order.
    order = np.argsort(-scores, kind="stable")
    tp_sorted = tp[order]

    tp_cum = np.cumsum(tp_sorted)
    fp_cum = np.cumsum(~tp_sorted)
    precision = tp_cum / (tp_cum + fp_cum)
    recall = tp_cum / n_gt

    if mode == "continuous":
        mrec = np.concatenate(([0.0], recall, [1.0]))
        mpre = np.concatenate(([0.0], precision, [0.0]))
        mpre = np.maximum.accumulate(mpre[::-1])[::-1]
        idx = np.flatnonzero(mrec[1:] != mrec[:-1])
        return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))
    if mode == "points101":
        suffix_max = np.maximum.accumulate(precision[::-1])[::-1]
        grid = np.linspace(0.0, 1.0, 101)
        pos = np.searchsorted(recall, grid, side="left")
        sampled = np.where(pos < len(recall), suffix_max[np.minimum(pos, len(recall) - 1)], 0.0)
        return float(np.mean(sampled))
    raise BtcxrError(f"unknown AP mode {mode!r}; expected one of {AP_MODES}")


def average_precision(
    gts: Mapping[str, Sequence[Box]],
    dets: Sequence[Detection],
    class_id: int,
    iou_thr: float = 0.5,
    mode: str = "continuous",
) -> float | None:
    """AP for one class, or None when the class has no ground truth."""
    if mode not in AP_MODES:
        raise BtcxrError(f"unknown AP mode {mode!r}; expected one of {AP_MODES}")
    parts = _class_parts(gts, dets, class_id, iou_thr)
    return _ap_from_parts(parts, list(gts.keys()), mode)


def mean_ap(
    gts: Mapping[str, Sequence[Box]],
    dets: Sequence[Detection],
    class_ids: Sequence[int],
    iou_thr: float = 0.5,
    mode: str = "continuous",
    empty_class: str = "exclude",
) -> float:
    """Unweighted mean of per-class APs.

    Classes without ground truth are excluded by default, or counted as 0
    under empty_class="zero".  Raises NoGroundTruth when nothing is defined.
    """
    if empty_class not in EMPTY_CLASS_MODES:
        raise BtcxrError(f"empty_class must be one of {EMPTY_CLASS_MODES}")
    values = []
    for cid in class_ids:
        ap = average_precision(gts, dets, cid, iou_thr, mode)
        if ap is None:
            if empty_class == "zero":
                values.append(0.0)
        else:
            values.append(ap)
    if not values:
        raise NoGroundTruth("every class has zero ground-truth boxes")
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# ROC-AUC
# ---------------------------------------------------------------------------

def roc_auc(labels: Sequence[int], scores: Sequence[float]) -> float:
    """Mann-Whitney AUC: (#concordant + 0.5 #tied) / (#pos * #neg)."""
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape or y.ndim != 1:
        raise BtcxrError("labels and scores must be 1-d and equally long")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos + n_neg != len(y):
        raise BtcxrError("labels must be 0/1")
    if n_pos == 0 or n_neg == 0:
        raise SingleClassOnly(
            f"need both classes, got {n_pos} positives / {n_neg} negatives"
        )
    ranks = _average_ranks(s)
    rank_sum = float(np.sum(ranks[y == 1]))
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    n = len(values)
    while i < n:
        j = i
        while j + 1 < n and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        avg = (i + j) / 2.0 + 1.0
        ranks[order[i:j + 1]] = avg
        i = j + 1
    return ranks


# ---------------------------------------------------------------------------
# Bootstrap
# ---------------------------------------------------------------------------

class BootstrapResult(NamedTuple):
    lo: float
    hi: float
    n_resamples: int
    n_undefined: int


def _resample_indices(n: int, replicate: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed + replicate)
    return rng.integers(0, n, size=n)


def bootstrap_ci(
    metric: Callable[[Sequence[str]], float | None],
    images: Sequence[str],
    B: int = 1000,
    seed: int = 0,
) -> BootstrapResult:
    """95% percentile bootstrap over images resampled with replacement.

    ``metric`` receives a list of image ids (with multiplicity) and returns
    the metric value, or None where undefined; undefined resamples are
    skipped and counted.
    """
    if B < 100:
        raise BtcxrError(f"need at least 100 resamples, got {B}")
    n = len(images)
    if n == 0:
        raise BtcxrError("cannot bootstrap an empty image set")
    values = []
    n_undef = 0
    for i in range(B):
        idx = _resample_indices(n, i, seed)
        sample = [images[j] for j in idx]
        try:
            v = metric(sample)
        except (NoGroundTruth, SingleClassOnly):
            v = None
        if v is None or (isinstance(v, float) and math.isnan(v)):
            n_undef += 1
        else:
            values.append(float(v))
    if not values:
        raise AllResamplesUndefined(f"metric undefined on all {B} resamples")
    lo, hi = np.percentile(values, [2.5, 97.5], method="linear")
    return BootstrapResult(float(lo), float(hi), B, n_undef)


# ---------------------------------------------------------------------------
# Evaluation reports
# ---------------------------------------------------------------------------

@dataclass
class MetricCell:
    """One reported number with its interval and resampling bookkeeping."""

    value: float | None
    ci: tuple[float, float] | None
    n_undefined_resamples: int = 0


@dataclass
class EvalReport:
    """Per-class metric values plus the overall summary and config echo."""

    metric_name: str
    overall: float
    overall_ci: tuple[float, float]
    per_class: dict[str, MetricCell]
    n_images: int
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "version": "1",
            "metric_name": self.metric_name,
            "overall": {
                "value": self.overall,
                "ci_lo": self.overall_ci[0],
                "ci_hi": self.overall_ci[1],
            },
            "per_class": {
                name: {
                    "value": cell.value,
                    "ci_lo": cell.ci[0] if cell.ci else None,
                    "ci_hi": cell.ci[1] if cell.ci else None,
                    "n_undefined_resamples": cell.n_undefined_resamples,
                }
                for name, cell in self.per_class.items()
            },
            "n_images": self.n_images,
            "config": dict(self.config),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        if data.get("version") != "1":
            raise BtcxrError(f"unsupported report version {data.get('version')!r}")
        per_class = {}
        for name, cell in data["per_class"].items():
            ci = None
            if cell.get("ci_lo") is not None:
                ci = (cell["ci_lo"], cell["ci_hi"])
            per_class[name] = MetricCell(
                value=cell["value"],
                ci=ci,
                n_undefined_resamples=cell.get("n_undefined_resamples", 0),
            )
        return cls(
            metric_name=data["metric_name"],
            overall=data["overall"]["value"],
            overall_ci=(data["overall"]["ci_lo"], data["overall"]["ci_hi"]),
            per_class=per_class,
            n_images=data["n_images"],
            config=dict(data.get("config", {})),
        )


def detection_report(
    manifest: DatasetManifest,
    dets: Sequence[Detection],
    iou_thr: float = 0.5,
    mode: str = "continuous",
    B: int = 1000,
    seed: int = 0,
    empty_class: str = "exclude",
    threads: int = 1,
) -> EvalReport:
    """mAP@iou_thr with per-class APs, each with a bootstrap CI.

    Every metric (overall and per class) is recomputed on the same B
    resampled image sets, so the intervals are mutually consistent.
    """
    gts = {rec.image_id: rec.instance_boxes for rec in manifest.images}
    n_labels = len(manifest.label_names)
    for det in dets:
        if det.image_id not in gts:
            raise UnknownImageId(
                f"detection references unknown image_id {det.image_id!r}"
            )
        if det.box.class_id >= n_labels:
            raise BtcxrError(
                f"detection class_id {det.box.class_id} outside label space "
                f"of size {n_labels}"
            )
    class_ids = list(range(n_labels))
    parts_by_class = {
        cid: _class_parts(gts, dets, cid, iou_thr) for cid in class_ids
    }
    image_ids = list(gts.keys())

    def all_values(order: Sequence[str]) -> tuple[float | None, list[float | None]]:
        aps = [_ap_from_parts(parts_by_class[cid], order, mode) for cid in class_ids]
        defined = [a for a in aps if a is not None] if empty_class == "exclude" else [
            0.0 if a is None else a for a in aps
        ]
        overall = float(np.mean(defined)) if defined else None
        return overall, aps

    overall, aps = all_values(image_ids)
    if overall is None:
        raise NoGroundTruth("every class has zero ground-truth boxes")

    n = len(image_ids)

    def one_replicate(i: int) -> tuple[float | None, list[float | None]]:
        idx = _resample_indices(n, i, seed)
        return all_values([image_ids[j] for j in idx])

    replicates = _map_ordered(one_replicate, range(B), threads)
    overall_samples: list[float] = []
    class_samples: list[list[float]] = [[] for _ in class_ids]
    for ov, per in replicates:
        if ov is not None:
            overall_samples.append(ov)
        for k, ap in enumerate(per):
            if ap is not None:
                class_samples[k].append(ap)
    if not overall_samples:
        raise AllResamplesUndefined(f"mAP undefined on all {B} resamples")

    overall_ci = tuple(np.percentile(overall_samples, [2.5, 97.5], method="linear"))
    per_class = {}
    for k, cid in enumerate(class_ids):
        name = manifest.label_names[cid]
        vals = class_samples[k]
        ci = tuple(np.percentile(vals, [2.5, 97.5], method="linear")) if vals else None
        per_class[name] = MetricCell(
            value=aps[k],
            ci=ci,
            n_undefined_resamples=B - len(vals),
        )
    return EvalReport(
        metric_name=f"mAP@{iou_thr:g}",
        overall=overall,
        overall_ci=(float(overall_ci[0]), float(overall_ci[1])),
        per_class=per_class,
        n_images=n,
        config={
            "iou_threshold": iou_thr,
            "interpolation": mode,
            "bootstrap_resamples": B,
            "seed": seed,
            "empty_class": empty_class,
            "n_undefined_resamples": B - len(overall_samples),
        },
    )


def classification_report(
    manifest: DatasetManifest,
    scores_by_image: Mapping[str, Sequence[float]],
    B: int = 1000,
    seed: int = 0,
    threads: int = 1,
) -> EvalReport:
    """Per-label ROC-AUC and macro AUC, each with a bootstrap CI."""
    n_labels = len(manifest.label_names)
    image_ids = []
    for rec in manifest.images:
        if rec.image_id not in scores_by_image:
            raise UnknownImageId(f"no scores for image_id {rec.image_id!r}")
        image_ids.append(rec.image_id)
    known = set(image_ids)
    for iid in scores_by_image:
        if iid not in known:
            raise UnknownImageId(f"scores reference unknown image_id {iid!r}")

    y = np.zeros((len(image_ids), n_labels), dtype=np.int8)
    s = np.zeros((len(image_ids), n_labels), dtype=np.float64)
    idx_of = {iid: i for i, iid in enumerate(image_ids)}
    for rec in manifest.images:
        i = idx_of[rec.image_id]
        for lab in rec.image_labels:
            y[i, lab] = 1
        row = scores_by_image[rec.image_id]
        if len(row) != n_labels:
            raise BtcxrError(
                f"image {rec.image_id!r} has {len(row)} scores, expected {n_labels}"
            )
        s[i] = row

    def all_values(rows: np.ndarray) -> tuple[float | None, list[float | None]]:
        aucs: list[float | None] = []
        for lab in range(n_labels):
            yy = y[rows, lab]
            if yy.min() == yy.max():
                aucs.append(None)
                continue
            aucs.append(roc_auc(yy, s[rows, lab]))
        defined = [a for a in aucs if a is not None]
        overall = float(np.mean(defined)) if defined else None
        return overall, aucs

    base_rows = np.arange(len(image_ids))
    overall, aucs = all_values(base_rows)
    if overall is None:
        raise SingleClassOnly("no label column has both classes")

    n = len(image_ids)

    def one_replicate(i: int) -> tuple[float | None, list[float | None]]:
        return all_values(_resample_indices(n, i, seed))

    replicates = _map_ordered(one_replicate, range(B), threads)
    overall_samples: list[float] = []
    label_samples: list[list[float]] = [[] for _ in range(n_labels)]
    for ov, per in replicates:
        if ov is not None:
            overall_samples.append(ov)
        for k, a in enumerate(per):
            if a is not None:
                label_samples[k].append(a)
    if not overall_samples:
        raise AllResamplesUndefined(f"macro AUC undefined on all {B} resamples")

    overall_ci = tuple(np.percentile(overall_samples, [2.5, 97.5], method="linear"))
    per_class = {}
    for k in range(n_labels):
        vals = label_samples[k]
        ci = tuple(np.percentile(vals, [2.5, 97.5], method="linear")) if vals else None
        per_class[manifest.label_names[k]] = MetricCell(
            value=aucs[k],
            ci=ci,
            n_undefined_resamples=B - len(vals),
        )
    return EvalReport(
        metric_name="macro-AUC",
        overall=overall,
        overall_ci=(float(overall_ci[0]), float(overall_ci[1])),
        per_class=per_class,
        n_images=n,
        config={
            "bootstrap_resamples": B,
            "seed": seed,
            "excluded_labels": [
                manifest.label_names[k] for k, a in enumerate(aucs) if a is None
            ],
            "n_undefined_resamples": B - len(overall_samples),
        },
    )
