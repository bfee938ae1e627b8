"""Frame enhancement with a trained conditional generator.

A frame is bilinearly resized to the exact target resolution and then run
through the generator's resolution-preserving refinement pass. Large frames
can be processed in overlapping tiles to bound memory.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F

from .data import from_batch, to_batch
from .errors import ShapeError

TILE_OVERLAP = 8


@dataclass(frozen=True)
class EnhanceSpec:
    target_width: int
    target_height: int
    tile_size: int = 0  # 0 processes the whole frame at once
    checkpoint_ref: str = ""

    def __post_init__(self):
        if self.target_width < 1 or self.target_height < 1:
            raise ValueError(f"target size must be positive, got {self.target_width}x{self.target_height}")
        if self.tile_size < 0 or 0 < self.tile_size <= TILE_OVERLAP:
            raise ValueError(f"tile_size must be 0 or larger than the {TILE_OVERLAP}px overlap")


def enhanced_name(stem: str, spec: EnhanceSpec) -> str:
    return f"{stem}_enh_{spec.target_width}x{spec.target_height}.png"


def _tile_starts(length: int, tile: int) -> list[int]:
    if length <= tile:
        return [0]
    step = tile - TILE_OVERLAP
    starts = list(range(0, length - tile, step))
    return starts + [length - tile]


def _ramp(length: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)
    return torch.minimum(torch.ones_like(pos), torch.minimum(pos + 1, length - pos) / (TILE_OVERLAP + 1))


def _refine_tiled(generator, x: torch.Tensor, tile: int) -> torch.Tensor:
    _, c, h, w = x.shape
    acc = torch.zeros((1, c, h, w), dtype=torch.float64)
    weight = torch.zeros((1, 1, h, w), dtype=torch.float64)
    for y0 in _tile_starts(h, tile):
        for x0 in _tile_starts(w, tile):
            th, tw = min(tile, h), min(tile, w)
            out = generator.refine(x[..., y0 : y0 + th, x0 : x0 + tw]).double()
            wgt = _ramp(th)[:, None] * _ramp(tw)[None, :]
            acc[..., y0 : y0 + th, x0 : x0 + tw] += out * wgt
            weight[..., y0 : y0 + th, x0 : x0 + tw] += wgt
    return (acc / weight).to(x.dtype)


def enhance_frame(generator, frame: np.ndarray, spec: EnhanceSpec) -> np.ndarray:
    """Return ``frame`` enhanced to exactly ``target_height x target_width``."""
    if getattr(generator, "mode", None) != "conditional":
        raise ValueError("enhancement needs a conditional (image-to-image) generator")
    if frame.ndim != 3 or frame.shape[2] != generator.config.in_channels:
        raise ShapeError(f"generator expects {generator.config.in_channels}-channel frames, got shape {frame.shape}")
    h, w = frame.shape[:2]
    if spec.target_height < h or spec.target_width < w:
        raise ValueError(f"target {spec.target_width}x{spec.target_height} is smaller than the {w}x{h} input")

    generator.eval()
    x = to_batch([frame])
    with torch.no_grad():
        if (h, w) != (spec.target_height, spec.target_width):
            x = F.interpolate(x, size=(spec.target_height, spec.target_width), mode="bilinear", align_corners=False)
            x = x.clamp(-1.0, 1.0)
        if spec.tile_size and max(x.shape[-2:]) > spec.tile_size:
            y = _refine_tiled(generator, x, spec.tile_size)
        else:
            y = generator.refine(x)
    return from_batch(y.clamp(-1.0, 1.0))[0]


def enhance_stream(generator, frames: Iterable[np.ndarray], spec: EnhanceSpec) -> list[np.ndarray]:
    out = []
    for i, frame in enumerate(frames):
        try:
            out.append(enhance_frame(generator, frame, spec))
        except (ValueError, ShapeError) as exc:
            raise type(exc)(f"frame {i}: {exc}") from exc
    return out
