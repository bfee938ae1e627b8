"""Slow, independent reference implementations used as test oracles.

Nothing here imports the code under test; each function is written from the
textbook definition with plain Python loops.
"""

from __future__ import annotations

import math


def iou_ref(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def raster_iou(a, b) -> float:
    """IoU of integer pixel boxes by counting covered cells."""
    cells_a = {(x, y) for x in range(a[0], a[2]) for y in range(a[1], a[3])}
    cells_b = {(x, y) for x in range(b[0], b[2]) for y in range(b[1], b[3])}
    return len(cells_a & cells_b) / len(cells_a | cells_b)


def nms_ref(dets, iou_threshold, top_k):
    """O(n^2): rank all, then let each kept box suppress every later same-class box."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    suppressed = [False] * len(dets)
    kept = []
    for r, i in enumerate(order):
        if suppressed[i]:
            continue
        kept.append(i)
        for j in order[r + 1 :]:
            if dets[j].class_id == dets[i].class_id and iou_ref(dets[i].box, dets[j].box) > iou_threshold:
                suppressed[j] = True
    return [dets[i] for i in kept[:top_k]]


def _prefix_tp(ranked, gts, class_id, iou_threshold):
    """Number of true positives among ``ranked`` (already in rank order)."""
    taken = set()
    tp = 0
    for d in ranked:
        cands = [(k, iou_ref(d.box, box)) for k, (box, c) in enumerate(gts.get(d.image_id, [])) if c == class_id]
        if not cands:
            continue
        best_k, best_iou = max(cands, key=lambda t: (t[1], -t[0]))
        if best_iou >= iou_threshold and (d.image_id, best_k) not in taken:
            taken.add((d.image_id, best_k))
            tp += 1
    return tp


def ap_ref(dets, gts, class_id, iou_threshold=0.5):
    """Enumerate every cutoff, recompute P/R from scratch, integrate the envelope."""
    cls = [d for d in dets if d.class_id == class_id]
    ranked = [cls[i] for i in sorted(range(len(cls)), key=lambda i: (-cls[i].confidence, i))]
    n_gt = sum(1 for objs in gts.values() for _, c in objs if c == class_id)
    points = []
    for k in range(1, len(ranked) + 1):
        tp = _prefix_tp(ranked[:k], gts, class_id, iou_threshold)
        points.append((tp / n_gt, tp / k))
    ap, prev_r = 0.0, 0.0
    for r, _ in points:
        if r > prev_r:
            ap += (r - prev_r) * max(p for rr, p in points if rr >= r)
            prev_r = r
    return ap


def match_ref(gts, anchors, iou_threshold=0.5):
    n = len(anchors)
    assign = [-1] * n
    claimed = [False] * n
    for j, g in enumerate(gts):
        best, best_iou = None, -1.0
        for i in range(n):
            if claimed[i]:
                continue
            v = iou_ref(g, anchors[i])
            if v > best_iou:
                best, best_iou = i, v
        assign[best] = j
        claimed[best] = True
    for i in range(n):
        if claimed[i] or not gts:
            continue
        best_j, best_iou = 0, -1.0
        for j, g in enumerate(gts):
            v = iou_ref(g, anchors[i])
            if v > best_iou:
                best_j, best_iou = j, v
        if best_iou >= iou_threshold:
            assign[i] = best_j
    return assign


def smooth_l1_ref(x: float) -> float:
    return 0.5 * x * x if abs(x) < 1 else abs(x) - 0.5


def cross_entropy_ref(scores, label) -> float:
    m = max(scores)
    return -(scores[label] - m - math.log(sum(math.exp(s - m) for s in scores)))


def detection_loss_ref(loc, conf, loc_t, labels, ratio=3):
    """Single-image loss from per-anchor scalars."""
    pos = [i for i, l in enumerate(labels) if l > 0]
    if not pos:
        return 0.0
    loc_loss = sum(smooth_l1_ref(loc[i][k] - loc_t[i][k]) for i in pos for k in range(4))
    ce = [cross_entropy_ref(conf[i], labels[i]) for i in range(len(labels))]
    negs = sorted((i for i in range(len(labels)) if labels[i] == 0), key=lambda i: (-ce[i], i))
    chosen = pos + negs[: ratio * len(pos)]
    return (loc_loss + sum(ce[i] for i in chosen)) / len(pos)
