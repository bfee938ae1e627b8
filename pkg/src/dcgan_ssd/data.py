"""Dataset ingestion, synthetic degradation, frame extraction and batching.

Images are ``numpy`` arrays of shape ``(H, W, C)``, ``float32``, with values in
[-1, 1]. That range matches the tanh output of the generators, so the same
array can flow from disk through the GAN and into the detector unchanged.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import DataValidationError, ShapeError


# ---------------------------------------------------------------------------
# Image tensors


def validate_image(image: np.ndarray) -> np.ndarray:
    """Check the ImageTensor invariants and return the array unchanged."""
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise ShapeError(f"expected HxWxC image with C in (1, 3), got shape {image.shape}")
    if image.shape[0] < 1 or image.shape[1] < 1:
        raise ShapeError(f"empty image of shape {image.shape}")
    if not np.all(np.isfinite(image)) or image.min() < -1.0 or image.max() > 1.0:
        raise DataValidationError("image values must be finite and lie in [-1, 1]")
    return image


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    return (pixels.astype(np.float32) / 127.5 - 1.0).astype(np.float32)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((image + 1.0) * 127.5), 0, 255).astype(np.uint8)


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB") if im.mode not in ("L", "RGB") else im
        return from_uint8(np.asarray(im))


def save_image(image: np.ndarray, path: str | Path) -> None:
    pixels = to_uint8(image)
    if pixels.shape[2] == 1:
        pixels = pixels[:, :, 0]
    Image.fromarray(pixels).save(path, format="PNG")


def to_batch(images: Sequence[np.ndarray]) -> torch.Tensor:
    """Stack HWC images into an NCHW float32 tensor."""
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def from_batch(batch: torch.Tensor) -> list[np.ndarray]:
    arr = batch.detach().permute(0, 2, 3, 1).contiguous().numpy()
    return [np.ascontiguousarray(a, dtype=np.float32) for a in arr]


def resize_image(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize (half-pixel centers, no antialiasing)."""
    if image.shape[:2] == (height, width):
        return image
    t = to_batch([image])
    out = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False)
    return from_batch(out.clamp(-1.0, 1.0))[0]


# ---------------------------------------------------------------------------
# Annotations


@dataclass(frozen=True)
class AnnotatedObject:
    label: str
    bbox: tuple[int, int, int, int]  # pixel corners, [min, max)


@dataclass(frozen=True)
class Annotation:
    image_id: str
    image_size: tuple[int, int]  # (width, height)
    objects: tuple[AnnotatedObject, ...] = field(default_factory=tuple)

    def validate(self, vocabulary: Sequence[str] | None = None) -> None:
        width, height = self.image_size
        for obj in self.objects:
            xmin, ymin, xmax, ymax = obj.bbox
            if not (0 <= xmin < xmax <= width and 0 <= ymin < ymax <= height):
                raise DataValidationError(
                    f"image {self.image_id!r}: box {obj.bbox} outside {width}x{height} or degenerate"
                )
            if vocabulary is not None and obj.label not in vocabulary:
                raise DataValidationError(f"image {self.image_id!r}: unknown class {obj.label!r}")

    def normalized_boxes(self) -> np.ndarray:
        width, height = self.image_size
        boxes = np.array([o.bbox for o in self.objects], dtype=np.float64).reshape(-1, 4)
        return boxes / np.array([width, height, width, height], dtype=np.float64)

    def to_json(self) -> dict:
        return {
            "image": self.image_id,
            "width": self.image_size[0],
            "height": self.image_size[1],
            "objects": [{"class": o.label, "bbox": list(o.bbox)} for o in self.objects],
        }


def _parse_annotation(record: dict) -> Annotation:
    objects = tuple(
        AnnotatedObject(str(o["class"]), tuple(int(v) for v in o["bbox"])) for o in record["objects"]
    )
    if any(len(o.bbox) != 4 for o in objects):
        raise KeyError("bbox")
    return Annotation(str(record["image"]), (int(record["width"]), int(record["height"])), objects)


def load_annotations(path: str | Path, vocabulary: Sequence[str] | None = None) -> list[Annotation]:
    """Read a JSON Lines annotation file, one image per line.

    Blank lines are skipped. A line that is not valid JSON or lacks a field
    raises :class:`DataValidationError` naming the 1-based line number.
    """
    annotations = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                ann = _parse_annotation(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataValidationError(f"{path}: line {lineno}: malformed annotation ({exc})") from exc
            ann.validate(vocabulary)
            annotations.append(ann)
    return annotations


def save_annotations(annotations: Sequence[Annotation], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ann in annotations:
            fh.write(json.dumps(ann.to_json()) + "\n")


def class_vocabulary(annotations: Sequence[Annotation]) -> list[str]:
    """Sorted class labels; detector class ids are ``index + 1`` (0 is background)."""
    return sorted({o.label for a in annotations for o in a.objects})


# ---------------------------------------------------------------------------
# Degradation


@dataclass(frozen=True)
class DegradationParams:
    downscale_factor: float = 1.0
    brightness_scale: float = 1.0
    gaussian_noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.downscale_factor >= 1.0:
            raise DataValidationError("downscale_factor must be >= 1")
        if not 0.0 < self.brightness_scale <= 1.0:
            raise DataValidationError("brightness_scale must lie in (0, 1]")
        if not self.gaussian_noise_sigma >= 0.0:
            raise DataValidationError("gaussian_noise_sigma must be >= 0")


def area_downscale(image: np.ndarray, factor: float) -> np.ndarray:
    """Area-average downscale to ``floor(H / factor) x floor(W / factor)``."""
    h, w, c = image.shape
    oh, ow = math.floor(h / factor), math.floor(w / factor)
    if oh < 1 or ow < 1:
        raise ShapeError(f"downscale factor {factor} turns {h}x{w} into {oh}x{ow}")
    if factor == 1.0:
        return image
    k = int(factor)
    if k == factor:
        blocks = image[: oh * k, : ow * k].reshape(oh, k, ow, k, c)
        return blocks.mean(axis=(1, 3), dtype=np.float64).astype(np.float32)
    out = cv2.resize(image, (ow, oh), interpolation=cv2.INTER_AREA)
    return out.reshape(oh, ow, c).astype(np.float32)


def degrade(image: np.ndarray, params: DegradationParams) -> np.ndarray:
    """Synthesize a low-quality frame: downscale, darken, add noise, clamp.

    Brightness and noise act in linear [0, 1] light, so a brightness scale of
    0.5 halves the light reaching every pixel. Identity parameters return the
    input values unchanged.
    """
    validate_image(image)
    out = area_downscale(image, params.downscale_factor)
    if params.brightness_scale == 1.0 and params.gaussian_noise_sigma == 0.0:
        return np.clip(out, -1.0, 1.0).astype(np.float32)
    light = (out.astype(np.float64) + 1.0) / 2.0
    light *= params.brightness_scale
    if params.gaussian_noise_sigma > 0:
        rng = np.random.default_rng(params.seed)
        light += rng.normal(0.0, params.gaussian_noise_sigma, size=light.shape)
    return np.clip(light * 2.0 - 1.0, -1.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Video


def iter_frames(video_path: str | Path, stride: int = 1) -> Iterator[np.ndarray]:
    """Yield frames 0, stride, 2*stride, ... as RGB images in [-1, 1].

    The container is opened before the first ``next()`` so that an unreadable
    file fails at call time rather than at first iteration.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if not Path(video_path).is_file():
        raise OSError(f"cannot open video {video_path}")
    cap = cv2.VideoCapture(str(video_path))
    if not cap.isOpened():
        cap.release()
        raise OSError(f"cannot open video {video_path}")

    def frames():
        index = 0
        try:
            while True:
                ok, frame = cap.read()
                if not ok:
                    break
                if index % stride == 0:
                    yield from_uint8(cv2.cvtColor(frame, cv2.COLOR_BGR2RGB))
                index += 1
        finally:
            cap.release()

    return frames()


def extract_frames(video_path: str | Path, stride: int = 1) -> list[np.ndarray]:
    return list(iter_frames(video_path, stride))


# ---------------------------------------------------------------------------
# Batching


def batch_indices(n: int, batch_size: int, seed: int = 0, epoch: int = 0, shuffle: bool = True) -> list[np.ndarray]:
    """Index batches for one epoch; the order depends only on (seed, epoch)."""
    if n < 1:
        raise ValueError("cannot batch an empty dataset")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def batch_iterator(dataset: Sequence, batch_size: int, seed: int = 0, shuffle: bool = True, epoch: int = 0) -> list[list]:
    return [[dataset[i] for i in idx] for idx in batch_indices(len(dataset), batch_size, seed, epoch, shuffle)]
