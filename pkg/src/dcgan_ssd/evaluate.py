"""Detection and enhancement metrics, and the cascade-vs-baseline harness."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .boxes import iou, iou_matrix
from .data import Annotation
from .errors import ShapeError

__all__ = [
    "iou", "EvalReport", "ComparisonReport", "average_precision", "mean_average_precision",
    "psnr", "compare_pipelines", "ground_truth_from_annotations",
]

GroundTruth = Mapping[str, Sequence[tuple[tuple[float, float, float, float], int]]]


@dataclass
class EvalReport:
    per_class_ap: dict[str, float]
    map_score: float
    recall_at_iou: float
    psnr_stats: tuple[float, float, float] | None = None
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def ground_truth_from_annotations(annotations: Sequence[Annotation], class_names: Sequence[str]) -> dict:
    """``image_id -> [(normalized box, class_id)]`` with 1-based class ids."""
    out = {}
    for ann in annotations:
        boxes = ann.normalized_boxes()
        out[ann.image_id] = [(tuple(float(v) for v in box), list(class_names).index(o.label) + 1)
                             for box, o in zip(boxes, ann.objects)]
    return out


def _greedy_matches(dets, gts: GroundTruth, class_id: int, iou_threshold: float) -> tuple[np.ndarray, int]:
    """TP flags for ``class_id`` detections in descending-confidence order.

    Each detection is compared with every ground truth of its class in its
    image; it is a true positive when its best IoU reaches the threshold and
    that ground truth is not already taken (VOC convention).
    """
    cls_dets = [d for d in dets if d.class_id == class_id]
    order = sorted(range(len(cls_dets)), key=lambda i: (-cls_dets[i].confidence, i))
    gt_boxes = {img: np.array([b for b, c in objs if c == class_id], dtype=np.float64).reshape(-1, 4)
                for img, objs in gts.items()}
    taken = {img: np.zeros(len(b), dtype=bool) for img, b in gt_boxes.items()}
    n_gt = sum(len(b) for b in gt_boxes.values())
    tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        det = cls_dets[i]
        boxes = gt_boxes.get(det.image_id)
        if boxes is None or len(boxes) == 0:
            continue
        overlaps = iou_matrix(np.asarray(det.box), boxes)[0]
        best = int(np.argmax(overlaps))
        if overlaps[best] >= iou_threshold and not taken[det.image_id][best]:
            taken[det.image_id][best] = True
            tp[rank] = True
    return tp, n_gt


def _all_point_ap(tp: np.ndarray, n_gt: int) -> float:
    if len(tp) == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.arange(1, len(tp) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


def average_precision(dets, gts: GroundTruth, class_id: int, iou_threshold: float = 0.5) -> float:
    """Area under the all-point interpolated precision-recall curve."""
    if not any(c == class_id for objs in gts.values() for _, c in objs):
        raise ValueError(f"class {class_id} has no ground truth")
    tp, n_gt = _greedy_matches(dets, gts, class_id, iou_threshold)
    return _all_point_ap(tp, n_gt)


def _recall(dets, gts: GroundTruth, iou_threshold: float) -> float:
    classes = sorted({c for objs in gts.values() for _, c in objs})
    hits = total = 0
    for c in classes:
        tp, n_gt = _greedy_matches(dets, gts, c, iou_threshold)
        hits += int(tp.sum())
        total += n_gt
    return hits / total if total else float("nan")


def mean_average_precision(
    dets, gts: GroundTruth, iou_threshold: float = 0.5, class_names: Sequence[str] | None = None, config: dict | None = None
) -> EvalReport:
    classes = sorted({c for objs in gts.values() for _, c in objs})
    if not classes:
        raise ValueError("no ground truth objects to evaluate against")
    per_class = {}
    for c in classes:
        name = class_names[c - 1] if class_names is not None else str(c)
        per_class[name] = average_precision(dets, gts, c, iou_threshold)
    return EvalReport(per_class, float(np.mean(list(per_class.values()))), _recall(dets, gts, iou_threshold),
                      config=dict(config or {}, iou_threshold=iou_threshold))


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 2.0) -> float:
    """Peak signal-to-noise ratio in dB for [-1, 1] images; ``inf`` when identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr needs equal shapes, got {a.shape} and {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


@dataclass
class ComparisonReport:
    baseline: EvalReport
    cascade: EvalReport
    delta_recall: float
    delta_map: float
    per_image: list[tuple[str, float, float]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "baseline": self.baseline.to_json(),
            "cascade": self.cascade.to_json(),
            "delta_recall": self.delta_recall,
            "delta_map": self.delta_map,
        }

    def write(self, json_path: str | Path, csv_path: str | Path | None = None) -> None:
        Path(json_path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["image", "recall_baseline", "recall_cascade"])
                for image_id, rb, rc in self.per_image:
                    writer.writerow([image_id, f"{rb:.6f}", f"{rc:.6f}"])


def compare_pipelines(
    detector,
    generator,
    frames: Sequence[np.ndarray],
    annotations: Sequence[Annotation],
    spec,
    conf_threshold: float = 0.5,
    iou_threshold: float = 0.5,
    nms_threshold: float = 0.45,
) -> ComparisonReport:
    """Run the detector alone and behind the enhancer on identical frames."""
    from .ssd import detect, detect_cascade

    if not frames:
        raise ValueError("empty test set")
    if len(frames) != len(annotations):
        raise ValueError(f"{len(frames)} frames but {len(annotations)} annotations")
    names = detector.config.class_names
    gts = ground_truth_from_annotations(annotations, names)
    base_dets, casc_dets, per_image = [], [], []
    for frame, ann in zip(frames, annotations):
        b = detect(detector, frame, conf_threshold, nms_threshold, image_id=ann.image_id)
        c = detect_cascade(generator, detector, frame, spec, conf_threshold, nms_threshold, image_id=ann.image_id)
        base_dets += b
        casc_dets += c
        single = {ann.image_id: gts[ann.image_id]}
        per_image.append((ann.image_id, _recall(b, single, iou_threshold), _recall(c, single, iou_threshold)))
    fingerprint = {"conf_threshold": conf_threshold, "nms_threshold": nms_threshold,
                   "target": [spec.target_width, spec.target_height], "frames": len(frames)}
    base = mean_average_precision(base_dets, gts, iou_threshold, names, fingerprint)
    casc = mean_average_precision(casc_dets, gts, iou_threshold, names, fingerprint)
    return ComparisonReport(base, casc, casc.recall_at_iou - base.recall_at_iou, casc.map_score - base.map_score, per_image)
