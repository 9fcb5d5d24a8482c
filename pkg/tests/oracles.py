"""Independent oracle implementations used to pin the library's semantics.

Everything here is deliberately written from the rule statements alone,
with different structure from the library code (pure-Python loops, fresh
recomputation, brute-force envelopes), so agreement is evidence and not
tautology.
"""

from __future__ import annotations

import numpy as np


# ---------------------------------------------------------------------------
# IoU: pixel-grid rasterization
# ---------------------------------------------------------------------------

def grid_iou(box_a, box_b, grid_side: int = 1024) -> float:
    """Count grid cells whose centers fall inside each box.

    A cell (i, j) covers [i/G,(i+1)/G) x [j/G,(j+1)/G); its center is at
    ((i+0.5)/G, (j+0.5)/G).  Axis-aligned rectangles factorize, so the
    2-d counts are products of per-axis center counts.
    """
    centers = (np.arange(grid_side) + 0.5) / grid_side
    ax = (centers >= box_a.x_min) & (centers <= box_a.x_max)
    ay = (centers >= box_a.y_min) & (centers <= box_a.y_max)
    bx = (centers >= box_b.x_min) & (centers <= box_b.x_max)
    by = (centers >= box_b.y_min) & (centers <= box_b.y_max)
    n_a = int(ax.sum()) * int(ay.sum())
    n_b = int(bx.sum()) * int(by.sum())
    n_ab = int((ax & bx).sum()) * int((ay & by).sum())
    union = n_a + n_b - n_ab
    return n_ab / union if union > 0 else 0.0


# ---------------------------------------------------------------------------
# WBF: step-by-step greedy replay
# ---------------------------------------------------------------------------

def _oracle_iou(a: tuple, b: tuple) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def wbf_replay(boxes, iou_threshold=0.4, rater_weights=None, score_mode="mean"):
    """Replay the greedy fusion definition on plain tuples.

    Returns a list of clusters, each a dict with "members" (list of the
    original Box objects) and "fused" (class_id, x0, y0, x1, y1, score),
    ordered by descending fused score.
    """
    rater_weights = rater_weights or {}

    def weight(box):
        if box.rater_id is None:
            return 1.0
        return rater_weights.get(box.rater_id, 1.0)

    n_raters = len({b.rater_id for b in boxes})

    def fuse(members):
        total_w = sum(m.score * weight(m) for m in members)
        x0 = sum(m.score * weight(m) * m.x_min for m in members) / total_w
        y0 = sum(m.score * weight(m) * m.y_min for m in members) / total_w
        x1 = sum(m.score * weight(m) * m.x_max for m in members) / total_w
        y1 = sum(m.score * weight(m) * m.y_max for m in members) / total_w
        score = sum(m.score for m in members) / len(members)
        if score_mode == "mean_scaled_by_rater_count":
            score = score * min(len(members), n_raters) / n_raters
        return (members[0].class_id, x0, y0, x1, y1, score)

    clusters = []
    for class_id in sorted({b.class_id for b in boxes}):
        class_boxes = [b for b in boxes if b.class_id == class_id]
        by_score = sorted(
            enumerate(class_boxes), key=lambda item: -item[1].score * weight(item[1])
        )
        class_clusters = []
        for _, box in by_score:
            box_tuple = (box.x_min, box.y_min, box.x_max, box.y_max)
            best_idx = None
            best_overlap = iou_threshold
            for idx, cluster in enumerate(class_clusters):
                fused = cluster["fused"]
                overlap = _oracle_iou((fused[1], fused[2], fused[3], fused[4]), box_tuple)
                if overlap > best_overlap:
                    best_overlap = overlap
                    best_idx = idx
            if best_idx is None:
                class_clusters.append({"members": [box], "fused": fuse([box])})
            else:
                cluster = class_clusters[best_idx]
                cluster["members"].append(box)
                cluster["fused"] = fuse(cluster["members"])
        clusters.extend(class_clusters)

    clusters.sort(key=lambda c: -c["fused"][5])
    return clusters


# ---------------------------------------------------------------------------
# AP: exhaustive precision-recall enumeration
# ---------------------------------------------------------------------------

def pr_enumeration_ap(gts_by_image, dets, class_id, iou_thr=0.5):
    """AP oracle: replay the matching rule, then integrate the envelope by
    brute force.  Returns None when the class has no ground truth."""
    total_gt = sum(
        1 for boxes in gts_by_image.values() for b in boxes if b.class_id == class_id
    )
    if total_gt == 0:
        return None

    flags = []  # (score, global input position, is_tp)
    for image_id, gt_boxes in gts_by_image.items():
        gt = [b for b in gt_boxes if b.class_id == class_id]
        image_dets = [
            (pos, det) for pos, det in enumerate(dets)
            if det.image_id == image_id and det.box.class_id == class_id
        ]
        image_dets.sort(key=lambda item: -item[1].box.score)
        used = set()
        matched = {}
        for pos, det in image_dets:
            best_j, best_o = None, 0.0
            for j, g in enumerate(gt):
                if j in used:
                    continue
                o = _oracle_iou(
                    (det.box.x_min, det.box.y_min, det.box.x_max, det.box.y_max),
                    (g.x_min, g.y_min, g.x_max, g.y_max),
                )
                if o > best_o:
                    best_o, best_j = o, j
            hit = best_j is not None and best_o >= iou_thr
            if hit:
                used.add(best_j)
            matched[pos] = hit
        for pos, det in image_dets:
            flags.append((det.box.score, pos, matched[pos]))

    if not flags:
        return 0.0
    flags.sort(key=lambda t: (-t[0], t[1]))
    precisions, recalls = [], []
    tp = fp = 0
    for _, _, is_tp in flags:
        if is_tp:
            tp += 1
        else:
            fp += 1
        precisions.append(tp / (tp + fp))
        recalls.append(tp / total_gt)

    ap = 0.0
    prev_recall = 0.0
    for i in range(len(flags)):
        if recalls[i] == prev_recall:
            continue
        envelope = max(
            precisions[j] for j in range(len(flags)) if recalls[j] >= recalls[i]
        )
        ap += (recalls[i] - prev_recall) * envelope
        prev_recall = recalls[i]
    return ap


# ---------------------------------------------------------------------------
# AUC: explicit pairwise counting
# ---------------------------------------------------------------------------

def pairwise_auc(labels, scores) -> float:
    pos = [s for y, s in zip(labels, scores) if y == 1]
    neg = [s for y, s in zip(labels, scores) if y == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def central_difference_gradient(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of a scalar function, entry by entry."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for k in range(xf.size):
        orig = xf[k]
        xf[k] = orig + h
        f_plus = fn(x)
        xf[k] = orig - h
        f_minus = fn(x)
        xf[k] = orig
        flat[k] = (f_plus - f_minus) / (2.0 * h)
    return grad
