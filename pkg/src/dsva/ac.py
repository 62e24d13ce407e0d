"""Attention concentration: threshold the mean attribute attention and crop.

The crop is a stop-gradient image transform; box selection is discrete.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from dsva.core import ShapeError


@dataclass(frozen=True)
class ConcentrationMask:
    mask: np.ndarray  # k x k, {0, 1}
    mean_attention: np.ndarray  # k x k
    threshold: float


@dataclass(frozen=True)
class CropBox:
    row_min: int
    row_max: int
    col_min: int
    col_max: int

    def is_full(self, k: int) -> bool:
        return (self.row_min, self.row_max, self.col_min, self.col_max) == (0, k - 1, 0, k - 1)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.row_min, self.row_max, self.col_min, self.col_max)


def mean_attention(maps) -> torch.Tensor:
    """Average of the ``N_a`` attention maps: ``(..., N_a, k, k) -> (..., k, k)``."""
    maps = torch.as_tensor(maps)
    if maps.shape[-3] < 1:
        raise ShapeError("need at least one attention map")
    return maps.mean(dim=-3)


def concentration_mask(mean_map) -> ConcentrationMask:
    m = np.asarray(torch.as_tensor(mean_map).detach().cpu().numpy(), dtype=np.float64)
    # exact sum; clipping at the max absorbs the last-ulp rounding of the mean
    threshold = min(math.fsum(m.ravel()) / m.size, float(m.max()))
    return ConcentrationMask((m >= threshold).astype(np.uint8), m, threshold)


def crop_box(mask: ConcentrationMask | np.ndarray) -> CropBox:
    """Tightest axis-aligned box (patch indices, inclusive) around the mask's ones."""
    grid = mask.mask if isinstance(mask, ConcentrationMask) else np.asarray(mask)
    rows = np.flatnonzero(grid.any(axis=1))
    cols = np.flatnonzero(grid.any(axis=0))
    assert rows.size and cols.size, "concentration mask has no nonzero entry"
    return CropBox(int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1]))


def crop_and_resize(image, box: CropBox, k: int):
    """Cut out the pixels under ``box`` and resize them back to ``H x W`` bilinearly.

    ``image`` is ``H x W x C`` (numpy or torch); the result has the same type.
    Patch rows ``[r0, r1]`` map to pixel rows ``[r0*H/k, (r1+1)*H/k)``.
    """
    is_numpy = not isinstance(image, torch.Tensor)
    x = torch.as_tensor(np.asarray(image)) if is_numpy else image
    H, W, _ = x.shape
    if H % k or W % k:
        raise ShapeError(f"image {H}x{W} is not divisible into a {k}x{k} grid")
    if not (0 <= box.row_min <= box.row_max < k and 0 <= box.col_min <= box.col_max < k):
        raise ShapeError(f"crop box {box} outside a {k}x{k} grid")
    if box.is_full(k):
        out = x.clone()
    else:
        ph, pw = H // k, W // k
        region = x[box.row_min * ph:(box.row_max + 1) * ph, box.col_min * pw:(box.col_max + 1) * pw]
        chw = region.permute(2, 0, 1).unsqueeze(0)
        resized = F.interpolate(chw, size=(H, W), mode="bilinear", align_corners=False)
        out = resized[0].permute(1, 2, 0).clamp(0.0, 1.0).contiguous()
    return out.numpy() if is_numpy else out


def concentrate(images: torch.Tensor, maps: torch.Tensor, k: int) -> tuple[torch.Tensor, list[CropBox]]:
    """Crop every image in a batch from its own attention maps (no gradient)."""
    with torch.no_grad():
        means = mean_attention(maps.detach())
        boxes = [crop_box(concentration_mask(m)) for m in means]
        crops = torch.stack([crop_and_resize(img, b, k) for img, b in zip(images.detach(), boxes)])
    return crops, boxes
