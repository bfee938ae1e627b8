"""Synthetic corpora: shapes on textured backgrounds, with annotations.

These stand in for the CIFAR/Caltech/KITTI material so every training run and
acceptance check works offline and is reproducible from a seed.
"""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

from .boxes import iou
from .data import AnnotatedObject, Annotation, DegradationParams, degrade, save_annotations, save_image

SHAPES = ("circle", "square", "triangle", "cross")


def textured_background(rng: np.random.Generator, height: int, width: int, dark: bool = False) -> np.ndarray:
    """Smooth low-frequency color noise, returned as a [-1, 1] image."""
    coarse = rng.uniform(-0.9, 0.1 if dark else 0.3, size=(4, 4, 3)).astype(np.float32)
    base = cv2.resize(coarse, (width, height), interpolation=cv2.INTER_CUBIC)
    grain = rng.normal(0.0, 0.05, size=(height, width, 3)).astype(np.float32)
    return np.clip(base + grain, -1.0, 1.0)


def shape_mask(kind: str, height: int, width: int, cx: float, cy: float, size: float) -> np.ndarray:
    """Boolean mask of a shape centred at (cx, cy) with extent ``size`` pixels."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
    dx, dy = xx - cx, yy - cy
    r = size / 2
    if kind == "circle":
        return dx**2 + dy**2 <= r**2
    if kind == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if kind == "triangle":
        # apex up, base at cy + r
        return (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2)
    if kind == "cross":
        arm = size / 6
        return ((np.abs(dx) <= r) & (np.abs(dy) <= arm)) | ((np.abs(dy) <= r) & (np.abs(dx) <= arm))
    raise ValueError(f"unknown shape {kind!r}")


def _paint(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator) -> None:
    color = rng.uniform(0.3, 1.0, size=3).astype(np.float32)
    color[rng.integers(3)] = rng.uniform(-1.0, 1.0)
    image[mask] = color


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def classification_corpus(
    n: int, seed: int, size: int = 32, classes: tuple[str, ...] = SHAPES
) -> tuple[list[np.ndarray], np.ndarray]:
    """``n`` single-shape images with integer labels indexing ``classes``.

    Shape scale and position jitter keep the task from being trivially
    template-matched.
    """
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for i in range(n):
        label = i % len(classes)
        img = textured_background(rng, size, size)
        extent = rng.uniform(0.35, 0.75) * size
        cx, cy = rng.uniform(extent / 2, size - extent / 2, size=2)
        _paint(img, shape_mask(classes[label], size, size, cx, cy, extent), rng)
        images.append(img)
        labels.append(label)
    order = rng.permutation(n)
    return [images[i] for i in order], np.asarray(labels, dtype=np.int64)[order]


def detection_scene(
    rng: np.random.Generator,
    size: int = 128,
    classes: tuple[str, ...] = SHAPES[:3],
    max_objects: int = 3,
    extent_range: tuple[float, float] = (0.15, 0.4),
    image_id: str = "",
) -> tuple[np.ndarray, Annotation]:
    img = textured_background(rng, size, size)
    objects: list[AnnotatedObject] = []
    for _ in range(int(rng.integers(1, max_objects + 1))):
        for _attempt in range(20):
            kind = classes[int(rng.integers(len(classes)))]
            extent = rng.uniform(*extent_range) * size
            cx, cy = rng.uniform(extent / 2, size - extent / 2, size=2)
            mask = shape_mask(kind, size, size, cx, cy, extent)
            if not mask.any():
                continue
            bbox = mask_bbox(mask)
            if all(iou(bbox, o.bbox) < 0.05 for o in objects):
                _paint(img, mask, rng)
                objects.append(AnnotatedObject(kind, bbox))
                break
    return img, Annotation(image_id, (size, size), tuple(objects))


def detection_corpus(n: int, seed: int, size: int = 128, **kwargs) -> list[tuple[np.ndarray, Annotation]]:
    rng = np.random.default_rng(seed)
    return [detection_scene(rng, size, image_id=f"scene_{i:05d}.png", **kwargs) for i in range(n)]


def write_classification_corpus(out_dir: str | Path, n: int, seed: int, size: int = 32) -> Path:
    """Write PNGs plus an annotations.jsonl whose single object spans each image."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    images, labels = classification_corpus(n, seed, size)
    anns = []
    for i, (img, label) in enumerate(zip(images, labels)):
        name = f"images/img_{i:05d}.png"
        save_image(img, out / name)
        anns.append(Annotation(name, (size, size), (AnnotatedObject(SHAPES[label], (0, 0, size, size)),)))
    save_annotations(anns, out / "annotations.jsonl")
    return out / "annotations.jsonl"


def write_detection_corpus(out_dir: str | Path, n: int, seed: int, size: int = 128) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    anns = []
    for img, ann in detection_corpus(n, seed, size):
        name = f"images/{ann.image_id}"
        save_image(img, out / name)
        anns.append(Annotation(name, ann.image_size, ann.objects))
    save_annotations(anns, out / "annotations.jsonl")
    return out / "annotations.jsonl"


def wild_conditions(seed: int) -> DegradationParams:
    """The shipped "wild" degradation: half resolution, 40% light, mild sensor noise."""
    return DegradationParams(downscale_factor=2, brightness_scale=0.4, gaussian_noise_sigma=0.02, seed=seed)


def enhancement_pairs(n: int, seed: int, size: int = 64, scene_size: int = 128) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """``n`` (degraded, clean) pairs: ``size`` crops of detection scenes and their wild versions.

    Crops keep objects at the pixel scale the detection benchmark shows, and
    start on even coordinates so the degraded crop equals the matching region
    of a degraded full frame.
    """
    rng = np.random.default_rng(seed)
    low, clean = [], []
    for i in range(n):
        scene, _ = detection_scene(rng, scene_size)
        y0, x0 = (2 * int(v) for v in rng.integers(0, (scene_size - size) // 2 + 1, size=2))
        crop = np.ascontiguousarray(scene[y0 : y0 + size, x0 : x0 + size])
        clean.append(crop)
        low.append(degrade(crop, wild_conditions(seed * 100_003 + i)))
    return low, clean


def degraded_benchmark(n: int = 100, seed: int = 3, size: int = 128) -> tuple[list[np.ndarray], list[Annotation]]:
    """The seeded detection benchmark: darkened, downscaled scenes with their annotations.

    Annotations keep the clean-scene geometry; evaluation works in normalized
    coordinates, so they apply unchanged to the smaller degraded frames.
    """
    frames, anns = [], []
    for i, (img, ann) in enumerate(detection_corpus(n, seed, size)):
        frames.append(degrade(img, wild_conditions(seed * 100_003 + i)))
        anns.append(ann)
    return frames, anns
