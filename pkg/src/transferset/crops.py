"""Crop-rectangle sampling for crop-level galleries.

Only geometry is produced here.  Decoding, resampling to ``out_size`` and any
pixel augmentation happen elsewhere; their names are kept as provenance in
``aug_tag``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .rng import make_rng
from .store import ItemRecord

CROPS_PER_IMAGE = 10
CROP_SCALE = (0.08, 1.0)
CROP_RATIO = (3.0 / 4.0, 4.0 / 3.0)
CROP_OUT_SIZE = 224
MAX_ATTEMPTS = 10
DEFAULT_AUG_TAG = "RandomResizedCrop(scale=(0.08,1.0),size=224)+RandAug"


@dataclass(frozen=True)
class CropSpec:
    source_image_id: str
    crop_index: int
    rect: tuple[int, int, int, int]  # x, y, w, h
    out_size: int = CROP_OUT_SIZE
    aug_tag: str = DEFAULT_AUG_TAG

    @property
    def area(self) -> int:
        return self.rect[2] * self.rect[3]


def sample_crop_rect(
    image_w: int,
    image_h: int,
    scale_range: tuple[float, float] = CROP_SCALE,
    ratio_range: tuple[float, float] = CROP_RATIO,
    out_size: int = CROP_OUT_SIZE,
    seed: int = 0,
    crop_index: int = 0,
    source_image_id: str = "",
    aug_tag: str = DEFAULT_AUG_TAG,
) -> CropSpec:
    """Sample one random-resized-crop rectangle.

    Area fraction is drawn uniformly from ``scale_range`` and the aspect ratio
    log-uniformly from ``ratio_range``; after ``MAX_ATTEMPTS`` rejected draws
    the largest centered crop with an admissible aspect ratio is returned.
    The result depends only on ``(seed, source_image_id, crop_index)``.
    """
    if image_w < 1 or image_h < 1:
        raise ValueError(f"degenerate image dimensions {image_w}x{image_h}")
    lo, hi = scale_range
    if not 0 < lo <= hi <= 1:
        raise ValueError(f"scale_range must lie within (0, 1], got {scale_range}")
    rlo, rhi = ratio_range
    if not 0 < rlo <= rhi:
        raise ValueError(f"invalid ratio_range {ratio_range}")
    if crop_index < 0:
        raise ValueError("crop_index must be non-negative")

    rng = make_rng(seed, "crop", source_image_id, crop_index)
    area = image_w * image_h
    log_lo, log_hi = math.log(rlo), math.log(rhi)
    for _ in range(MAX_ATTEMPTS):
        target = area * rng.uniform(lo, hi)
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= image_w and 0 < h <= image_h:
            y = int(rng.integers(0, image_h - h + 1))
            x = int(rng.integers(0, image_w - w + 1))
            return CropSpec(source_image_id, crop_index, (x, y, w, h), out_size, aug_tag)

    in_ratio = image_w / image_h
    if in_ratio < rlo:
        w = image_w
        h = int(round(w / rlo))
    elif in_ratio > rhi:
        h = image_h
        w = int(round(h * rhi))
    else:
        w, h = image_w, image_h
    w, h = max(1, min(w, image_w)), max(1, min(h, image_h))
    x = (image_w - w) // 2
    y = (image_h - h) // 2
    return CropSpec(source_image_id, crop_index, (x, y, w, h), out_size, aug_tag)


def crop_records(
    source_image_id: str,
    image_w: int,
    image_h: int,
    first_item_id: int,
    seed: int = 0,
    crops_per_image: int = CROPS_PER_IMAGE,
    split_tag: str = "gallery",
    aug_tag: str = DEFAULT_AUG_TAG,
    **kwargs,
) -> list[ItemRecord]:
    """Gallery provenance records for ``crops_per_image`` crops of one image."""
    out = []
    for c in range(crops_per_image):
        spec = sample_crop_rect(
            image_w, image_h, seed=seed, crop_index=c, source_image_id=source_image_id, aug_tag=aug_tag, **kwargs
        )
        out.append(
            ItemRecord(
                item_id=first_item_id + c,
                source_image_id=source_image_id,
                crop_index=c,
                crop_rect=spec.rect,
                aug_tag=f"{aug_tag};out={spec.out_size}",
                split_tag=split_tag,
                source_size=(image_w, image_h),
            )
        )
    return out
