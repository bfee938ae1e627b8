"""Single-shot multi-scale detector.

Default boxes over progressively smaller feature maps, anchor matching,
the smooth-L1 + hard-negative cross-entropy loss, greedy NMS, inference,
training, and the enhance-then-detect cascade.

Class index 0 is background; foreground class ``k`` (1-based) is
``config.class_names[k - 1]``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .boxes import decode_boxes, encode_boxes, iou_matrix
from .data import Annotation, batch_indices, resize_image, to_batch
from .errors import NumericalError, ShapeError
from .gan import init_dcgan_weights, seeded_build

log = logging.getLogger(__name__)

ASPECT_SEQUENCE = (1.0, 2.0, 0.5, 3.0, 1 / 3, 4.0, 0.25, 5.0, 0.2)


# ---------------------------------------------------------------------------
# Default boxes


def aspect_list(aspects) -> tuple[float, ...]:
    """Expand an aspect count into ratios (1, 2, 1/2, 3, 1/3, ...); pass lists through."""
    if isinstance(aspects, (int, np.integer)):
        if not 1 <= aspects <= len(ASPECT_SEQUENCE):
            raise ValueError(f"aspect count must be in [1, {len(ASPECT_SEQUENCE)}], got {aspects}")
        return ASPECT_SEQUENCE[: int(aspects)]
    ratios = tuple(float(a) for a in aspects)
    if not ratios or any(a <= 0 for a in ratios):
        raise ValueError(f"aspect ratios must be positive, got {aspects}")
    return ratios


@dataclass
class AnchorSet:
    boxes: np.ndarray  # (N, 4) corner boxes clipped to [0, 1]
    provenance: np.ndarray  # (N, 4): map index, row, col, aspect index
    scales: list[float]
    aspect_ratios: list[tuple[float, ...]]

    def __len__(self) -> int:
        return len(self.boxes)


def map_scales(m: int, s_min: float, s_max: float) -> list[float]:
    if m == 1:
        return [s_min]
    return [s_min + (s_max - s_min) * k / (m - 1) for k in range(m)]


def build_default_boxes(map_specs: Sequence[tuple], s_min: float = 0.2, s_max: float = 0.9) -> AnchorSet:
    """One box per (map, cell, aspect), centred on the cell.

    ``map_specs`` is a list of ``(rows, cols, aspects)`` where ``aspects`` is a
    ratio list or a count. Box width and height are ``s_k * sqrt(a)`` and
    ``s_k / sqrt(a)`` with the per-map scale ``s_k`` spaced linearly from
    ``s_min`` to ``s_max``.
    """
    if not map_specs:
        raise ValueError("need at least one feature map")
    if not 0 < s_min < s_max < 1:
        raise ValueError(f"need 0 < s_min < s_max < 1, got {s_min}, {s_max}")
    scales = map_scales(len(map_specs), s_min, s_max)
    boxes, prov, ratios_per_map = [], [], []
    for k, ((rows, cols, aspects), s) in enumerate(zip(map_specs, scales)):
        if rows < 1 or cols < 1:
            raise ValueError(f"map {k} has non-positive size {rows}x{cols}")
        ratios = aspect_list(aspects)
        ratios_per_map.append(ratios)
        r, c, a = np.meshgrid(np.arange(rows), np.arange(cols), np.arange(len(ratios)), indexing="ij")
        r, c, a = r.ravel(), c.ravel(), a.ravel()
        sq = np.sqrt(np.asarray(ratios))[a]
        cx, cy = (c + 0.5) / cols, (r + 0.5) / rows
        w, h = s * sq, s / sq
        boxes.append(np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1))
        prov.append(np.stack([np.full_like(r, k), r, c, a], axis=1))
    return AnchorSet(np.clip(np.concatenate(boxes), 0.0, 1.0), np.concatenate(prov), scales, ratios_per_map)


# ---------------------------------------------------------------------------
# Matching


@dataclass
class MatchResult:
    anchor_to_gt: np.ndarray  # (N,), gt index or -1 for background
    anchor_offsets: np.ndarray  # (N, 4), zeros for background
    labels: np.ndarray  # (N,), class id per anchor, 0 for background

    @property
    def num_positive(self) -> int:
        return int((self.anchor_to_gt >= 0).sum())


def match_anchors(
    gts: np.ndarray,
    anchors: AnchorSet | np.ndarray,
    iou_threshold: float = 0.5,
    gt_labels: Sequence[int] | None = None,
) -> MatchResult:
    """Assign ground truths to anchors.

    First every ground truth, in index order, claims its highest-IoU anchor
    among those not yet claimed (lowest anchor index on ties). Then every
    unclaimed anchor whose best IoU reaches ``iou_threshold`` goes to that
    best ground truth (lowest gt index on ties).
    """
    anchor_boxes = anchors.boxes if isinstance(anchors, AnchorSet) else np.asarray(anchors, dtype=np.float64)
    n = len(anchor_boxes)
    if n == 0:
        raise ValueError("empty anchor set")
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    assignment = np.full(n, -1, dtype=np.int64)
    if len(gts):
        overlaps = iou_matrix(gts, anchor_boxes)
        claimed = np.zeros(n, dtype=bool)
        for j in range(len(gts)):
            row = np.where(claimed, -1.0, overlaps[j])
            best = int(np.argmax(row))
            assignment[best] = j
            claimed[best] = True
        best_gt = np.argmax(overlaps, axis=0)
        best_iou = overlaps[best_gt, np.arange(n)]
        extra = (~claimed) & (best_iou >= iou_threshold)
        assignment[extra] = best_gt[extra]

    offsets = np.zeros((n, 4), dtype=np.float64)
    pos = assignment >= 0
    if pos.any():
        offsets[pos] = encode_boxes(gts[assignment[pos]], anchor_boxes[pos])
    labels = np.zeros(n, dtype=np.int64)
    if pos.any():
        cls = np.ones(len(gts), dtype=np.int64) if gt_labels is None else np.asarray(gt_labels, dtype=np.int64)
        labels[pos] = cls[assignment[pos]]
    return MatchResult(assignment, offsets, labels)


# ---------------------------------------------------------------------------
# Loss


def detection_loss(
    loc_preds: torch.Tensor,
    conf_preds: torch.Tensor,
    loc_targets: torch.Tensor,
    labels: torch.Tensor,
    neg_pos_ratio: int = 3,
) -> torch.Tensor:
    """Smooth-L1 localization plus hard-negative-mined cross-entropy.

    Shapes are ``(B, N, 4)``, ``(B, N, C + 1)``, ``(B, N, 4)``, ``(B, N)`` (the
    batch dimension may be dropped). Per image, the background anchors with
    the highest cross-entropy are kept at ``neg_pos_ratio`` per positive. The
    total is divided by the number of positives and is 0 when there are none.
    """
    if loc_preds.ndim == 2:
        loc_preds, conf_preds, loc_targets, labels = (t.unsqueeze(0) for t in (loc_preds, conf_preds, loc_targets, labels))
    b, n = labels.shape
    if loc_preds.shape != (b, n, 4) or loc_targets.shape != (b, n, 4) or conf_preds.shape[:2] != (b, n):
        raise ShapeError(
            f"prediction/target shapes disagree: loc {tuple(loc_preds.shape)}, conf {tuple(conf_preds.shape)}, "
            f"targets {tuple(loc_targets.shape)}, labels {tuple(labels.shape)}"
        )
    pos = labels > 0
    num_pos = int(pos.sum())
    if num_pos == 0:
        return (loc_preds.sum() + conf_preds.sum()) * 0.0

    loc_loss = F.smooth_l1_loss(loc_preds[pos], loc_targets[pos], reduction="sum", beta=1.0)
    ce = F.cross_entropy(conf_preds.reshape(b * n, -1), labels.reshape(-1), reduction="none").view(b, n)

    selected = pos.clone()
    with torch.no_grad():
        for i in range(b):
            k = min(neg_pos_ratio * int(pos[i].sum()), int((~pos[i]).sum()))
            if k == 0:
                continue
            neg_scores = ce[i].detach().masked_fill(pos[i], -math.inf)
            order = torch.sort(neg_scores, descending=True, stable=True).indices
            selected[i, order[:k]] = True
    conf_loss = ce[selected].sum()
    return (loc_loss + conf_loss) / num_pos


# ---------------------------------------------------------------------------
# Detections and NMS


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    class_id: int
    confidence: float
    image_id: str | None = None


def nms(dets: Sequence[Detection], iou_threshold: float = 0.45, top_k: int = 200) -> list[Detection]:
    """Greedy per-class non-maximum suppression.

    Candidates are visited by descending confidence, ties by input index; a
    candidate is dropped when its IoU with an already kept box of the same
    class exceeds ``iou_threshold``. At most ``top_k`` survivors are returned,
    sorted the same way.
    """
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    boxes = np.array([d.box for d in dets], dtype=np.float64)
    classes = np.array([d.class_id for d in dets])
    kept: list[int] = []
    kept_by_class: dict[int, list[int]] = {}
    for i in order:
        same = kept_by_class.setdefault(int(classes[i]), [])
        if same and iou_matrix(boxes[i], boxes[same]).max() > iou_threshold:
            continue
        same.append(i)
        kept.append(i)
        if len(kept) == top_k:
            break
    return [dets[i] for i in kept]


# ---------------------------------------------------------------------------
# Network


@dataclass(frozen=True)
class DetectorConfig:
    input_size: int = 128
    class_names: tuple[str, ...] = ("circle", "square", "triangle")
    backbone_channels: tuple[int, ...] = (64, 128, 256)
    extra_channels: tuple[int, ...] = (256, 256)
    aspects: tuple[tuple[float, ...], ...] = ((1.0, 2.0, 0.5), (1.0, 2.0, 0.5), (1.0, 2.0, 0.5))
    s_min: float = 0.15
    s_max: float = 0.6

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


class SSDDetector(nn.Module):
    """Truncated discriminator-style conv ladder plus extra stride-2 layers.

    The backbone blocks mirror :class:`~dcgan_ssd.gan.Discriminator` so a
    discriminator's conv weights can initialise it. Prediction heads sit on
    the last ``len(config.aspects)`` feature maps.
    """

    kind = "detector"
    config_class = DetectorConfig

    def __init__(self, config: DetectorConfig = DetectorConfig()):
        super().__init__()
        self.config = config
        size = config.input_size
        sizes = []
        backbone = []
        c_in = 3
        for i, c in enumerate(config.backbone_channels):
            layers: list[nn.Module] = [nn.Conv2d(c_in, c, 4, 2, 1, bias=(i == 0))]
            if i > 0:
                layers.append(nn.BatchNorm2d(c))
            layers.append(nn.LeakyReLU(0.2))
            backbone.append(nn.Sequential(*layers))
            c_in = c
            size //= 2
            sizes.append(size)
        extras = []
        for c in config.extra_channels:
            extras.append(nn.Sequential(nn.Conv2d(c_in, c, 3, 2, 1, bias=False), nn.BatchNorm2d(c), nn.LeakyReLU(0.2)))
            c_in = c
            size = (size + 1) // 2
            sizes.append(size)
        self.backbone = nn.ModuleList(backbone)
        self.extras = nn.ModuleList(extras)

        n_heads = len(config.aspects)
        channels = list(config.backbone_channels) + list(config.extra_channels)
        if n_heads > len(channels):
            raise ShapeError(f"{n_heads} prediction maps requested but only {len(channels)} feature maps exist")
        self.map_sizes = sizes[-n_heads:]
        tail = [sizes[len(config.backbone_channels) - 1]] + sizes[len(config.backbone_channels):]
        if min(sizes) < 1 or any(a <= b for a, b in zip(tail, tail[1:])):
            raise ShapeError(f"feature map sizes {sizes} must stay >= 1 and strictly decrease along the extra layers")
        k1 = config.num_classes + 1
        self.loc_heads = nn.ModuleList()
        self.conf_heads = nn.ModuleList()
        for c, aspects in zip(channels[-n_heads:], config.aspects):
            a = len(aspect_list(aspects))
            self.loc_heads.append(nn.Conv2d(c, a * 4, 3, 1, 1))
            self.conf_heads.append(nn.Conv2d(c, a * k1, 3, 1, 1))
        init_dcgan_weights(self)
        self.anchors = build_default_boxes(
            [(s, s, a) for s, a in zip(self.map_sizes, config.aspects)], config.s_min, config.s_max
        )

    def feature_maps(self, x: torch.Tensor) -> list[torch.Tensor]:
        maps = []
        for block in list(self.backbone) + list(self.extras):
            x = block(x)
            maps.append(x)
        return maps[-len(self.loc_heads):]

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(loc, conf)`` of shapes ``(B, N, 4)`` and ``(B, N, C + 1)``."""
        b = x.shape[0]
        k1 = self.config.num_classes + 1
        locs, confs = [], []
        for fmap, lh, ch in zip(self.feature_maps(x), self.loc_heads, self.conf_heads):
            locs.append(lh(fmap).permute(0, 2, 3, 1).reshape(b, -1, 4))
            confs.append(ch(fmap).permute(0, 2, 3, 1).reshape(b, -1, k1))
        return torch.cat(locs, 1), torch.cat(confs, 1)

    def layer_spec(self) -> list[dict]:
        spec = [{"type": "conv", "kernel": 4, "stride": 2, "channels": c, "norm": i > 0, "activation": "leaky_relu"}
                for i, c in enumerate(self.config.backbone_channels)]
        spec += [{"type": "conv", "kernel": 3, "stride": 2, "channels": c, "norm": True, "activation": "leaky_relu"}
                 for c in self.config.extra_channels]
        spec += [{"type": "heads", "map_sizes": self.map_sizes,
                  "anchors_per_cell": [len(aspect_list(a)) for a in self.config.aspects],
                  "num_classes": self.config.num_classes + 1}]
        return spec


def init_backbone(detector: SSDDetector, source) -> int:
    """Copy matching backbone tensors from a detector or discriminator state.

    ``source`` may be a module, a state dict, or a checkpoint directory.
    Discriminator ``convs.*`` tensors map onto ``backbone.*``. A same-named
    tensor with a different shape raises :class:`ShapeError`. Returns the
    number of tensors copied.
    """
    if isinstance(source, (str, Path)):
        from .checkpoint import load_checkpoint

        source = load_checkpoint(source)
    state = source.state_dict() if isinstance(source, nn.Module) else source
    target = detector.state_dict()
    copied = {}
    for name, value in state.items():
        key = "backbone." + name[len("convs."):] if name.startswith("convs.") else name
        if not key.startswith("backbone.") or key not in target:
            continue
        if tuple(target[key].shape) != tuple(value.shape):
            raise ShapeError(f"{key}: source shape {tuple(value.shape)} does not fit {tuple(target[key].shape)}")
        copied[key] = torch.as_tensor(value)
    if not copied:
        raise ShapeError("no backbone tensors in the source match this detector")
    detector.load_state_dict(copied, strict=False)
    return len(copied)


def _prepare_input(detector: SSDDetector, image: np.ndarray) -> torch.Tensor:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"detector expects an HxWx3 image, got {image.shape}")
    s = detector.config.input_size
    return to_batch([resize_image(image, s, s)])


def detect(
    detector: SSDDetector,
    image: np.ndarray,
    conf_threshold: float = 0.5,
    nms_threshold: float = 0.45,
    top_k: int = 200,
    image_id: str | None = None,
) -> list[Detection]:
    """Detections in normalized coordinates of ``image``.

    The image is bilinearly resized to the detector input. A class score
    must be strictly greater than ``conf_threshold`` to be kept.
    """
    detector.eval()
    with torch.no_grad():
        loc, conf = detector(_prepare_input(detector, image))
    probs = torch.softmax(conf[0].double(), dim=-1).numpy()
    boxes = decode_boxes(loc[0].double().numpy(), detector.anchors.boxes)
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    candidates = []
    for cls in range(1, probs.shape[1]):
        for i in np.nonzero((probs[:, cls] > conf_threshold) & valid)[0]:
            candidates.append(Detection(tuple(float(v) for v in boxes[i]), cls, float(probs[i, cls]), image_id))
    return nms(candidates, nms_threshold, top_k)


def detect_cascade(
    generator,
    detector: SSDDetector,
    frame: np.ndarray,
    spec,
    conf_threshold: float = 0.5,
    nms_threshold: float = 0.45,
    top_k: int = 200,
    image_id: str | None = None,
) -> list[Detection]:
    """Enhance ``frame`` with the conditional generator, then detect.

    Boxes are normalized, so they already refer to the original frame.
    """
    from .enhancer import enhance_frame

    enhanced = enhance_frame(generator, frame, spec)
    return detect(detector, enhanced, conf_threshold, nms_threshold, top_k, image_id)


# ---------------------------------------------------------------------------
# Training


@dataclass
class DetectorTrainConfig:
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 1e-3
    optimizer_moments: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    iou_threshold: float = 0.5
    neg_pos_ratio: int = 3

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("epochs >= 1, batch_size >= 1 and learning_rate > 0 are required")


@dataclass
class DetectorTrainResult:
    detector: SSDDetector
    epoch_losses: list[float] = field(default_factory=list)
    batch_losses: list[tuple[int, int, float]] = field(default_factory=list)
    checkpoints: list = field(default_factory=list)


def encode_targets(detector: SSDDetector, annotations: Sequence[Annotation], iou_threshold: float = 0.5):
    names = detector.config.class_names
    locs, labels = [], []
    for ann in annotations:
        gt_labels = [names.index(o.label) + 1 for o in ann.objects]
        m = match_anchors(ann.normalized_boxes(), detector.anchors, iou_threshold, gt_labels)
        locs.append(m.anchor_offsets)
        labels.append(m.labels)
    return torch.tensor(np.stack(locs), dtype=torch.float32), torch.tensor(np.stack(labels), dtype=torch.long)


def train_detector(
    config: DetectorTrainConfig,
    images: Sequence[np.ndarray],
    annotations: Sequence[Annotation],
    detector: SSDDetector | None = None,
    detector_config: DetectorConfig | None = None,
    generator=None,
    init_from=None,
    checkpoint_dir: str | Path | None = None,
    log_path: str | Path | None = None,
) -> DetectorTrainResult:
    """Minimize :func:`detection_loss` with Adam.

    ``generator`` (conditional) enhances every training image first, so the
    detector learns on the same kind of frames the cascade feeds it.
    ``init_from`` seeds the backbone from a pretrained detector or
    discriminator (see :func:`init_backbone`).
    """
    config.validate()
    if not images or len(images) != len(annotations):
        raise ValueError("need a non-empty image list aligned with its annotations")
    if detector is None:
        cfg = detector_config or DetectorConfig()
        detector = seeded_build(lambda: SSDDetector(cfg), config.seed)
    if init_from is not None:
        init_backbone(detector, init_from)
    s = detector.config.input_size
    if generator is not None:
        from .enhancer import EnhanceSpec, enhance_frame

        spec = EnhanceSpec(s, s)
        inputs = [enhance_frame(generator, resize_image(im, min(s, im.shape[0]), min(s, im.shape[1])), spec) for im in images]
    else:
        inputs = [resize_image(im, s, s) for im in images]
    x_all = to_batch(inputs)
    loc_t, lab_t = encode_targets(detector, annotations, config.iou_threshold)

    opt = torch.optim.Adam(detector.parameters(), lr=config.learning_rate, betas=tuple(config.optimizer_moments))
    result = DetectorTrainResult(detector)
    detector.train()
    for epoch in range(config.epochs):
        losses = []
        for b, idx in enumerate(batch_indices(len(inputs), config.batch_size, config.seed, epoch)):
            idx_t = torch.from_numpy(idx)
            opt.zero_grad(set_to_none=True)
            loc, conf = detector(x_all[idx_t])
            loss = detection_loss(loc, conf, loc_t[idx_t], lab_t[idx_t], config.neg_pos_ratio)
            if not math.isfinite(loss.item()):
                raise NumericalError(f"non-finite detection loss at epoch {epoch} batch {b}")
            loss.backward()
            opt.step()
            losses.append(loss.item())
            result.batch_losses.append((epoch, b, loss.item()))
        result.epoch_losses.append(float(np.mean(losses)))
        log.info("detector epoch %d: loss %.4f", epoch, result.epoch_losses[-1])
        if checkpoint_dir is not None:
            from .checkpoint import save_checkpoint

            path = save_checkpoint(detector, Path(checkpoint_dir) / f"epoch_{epoch + 1:03d}")
            result.checkpoints.append(path)
    detector.eval()
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "batch", "loss"])
            for epoch, b, loss in result.batch_losses:
                writer.writerow([epoch, b, repr(loss)])
    return result
