"""Image resampling, augmentation and admission-date splits.

Bilinear resampling uses half-pixel centers: output pixel i samples the
source at (i + 0.5) * in/out - 0.5, clamped to the valid range, so results
do not depend on any imaging library's conventions.
"""

import logging
import math
from dataclasses import dataclass
from datetime import date
from typing import List, Sequence, Tuple

import numpy as np

from app.core.error_handling import ContractError, ShapeError
from app.data.records import PatientRecord

logger = logging.getLogger(__name__)

RESIZE_SIZE = 256
CROP_SIZE = 224
AREA_RANGE = (0.09, 1.0)


def _axis_weights(in_size: int, out_size: int):
    centers = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    centers = np.clip(centers, 0.0, in_size - 1)
    lower = np.floor(centers).astype(np.int64)
    upper = np.minimum(lower + 1, in_size - 1)
    return lower, upper, centers - lower


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize an H x W x C raster"""
    if image.ndim != 3:
        raise ShapeError(f"expected H x W x C raster, got shape {image.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output size must be positive, got {out_h}x{out_w}")
    in_h, in_w = image.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return image.astype(np.float32, copy=True)

    src = image.astype(np.float64)
    top, bottom, wy = _axis_weights(in_h, out_h)
    left, right, wx = _axis_weights(in_w, out_w)
    rows = src[top] * (1.0 - wy)[:, None, None] + src[bottom] * wy[:, None, None]
    out = rows[:, left] * (1.0 - wx)[None, :, None] + rows[:, right] * wx[None, :, None]
    return out.astype(np.float32)


def resize_square(image: np.ndarray, size: int) -> np.ndarray:
    return bilinear_resize(image, size, size)


@dataclass(frozen=True)
class CropBox:
    top: int
    left: int
    side: int


def sample_crop_box(size: int, rng: np.random.Generator, area_range: Tuple[float, float] = AREA_RANGE) -> CropBox:
    """Square crop covering a uniformly drawn share of the source area"""
    low, high = area_range
    if not 0.0 < low <= high <= 1.0:
        raise ContractError(f"area range must satisfy 0 < low <= high <= 1, got {area_range}")
    area = rng.uniform(low, high)
    side = int(round(math.sqrt(area) * size))
    side = min(max(side, 1), size)
    top = int(rng.integers(0, size - side + 1))
    left = int(rng.integers(0, size - side + 1))
    return CropBox(top=top, left=left, side=side)


def apply_crop(image: np.ndarray, box: CropBox, out_size: int, flip: bool) -> np.ndarray:
    height, width = image.shape[:2]
    if box.top < 0 or box.left < 0 or box.top + box.side > height or box.left + box.side > width:
        raise ShapeError(f"crop {box} falls outside a {height}x{width} image")
    window = image[box.top:box.top + box.side, box.left:box.left + box.side]
    out = bilinear_resize(window, out_size, out_size)
    return out[:, ::-1].copy() if flip else out


def _ensure_size(image: np.ndarray, resize_size: int, crop_size: int) -> np.ndarray:
    if image.ndim != 3:
        raise ShapeError(f"expected H x W x C raster, got shape {image.shape}")
    if min(image.shape[:2]) < crop_size:
        raise ShapeError(f"image {image.shape[0]}x{image.shape[1]} is smaller than the {crop_size} crop")
    if resize_size < crop_size:
        raise ShapeError(f"resize size {resize_size} is smaller than crop size {crop_size}")
    return resize_square(image, resize_size)


def augment_train_image(image: np.ndarray, rng: np.random.Generator, resize_size: int = RESIZE_SIZE,
                        crop_size: int = CROP_SIZE, area_range: Tuple[float, float] = AREA_RANGE,
                        flip_prob: float = 0.5) -> np.ndarray:
    """Resize, random-area crop, resize to crop_size, random horizontal flip"""
    image = _ensure_size(image, resize_size, crop_size)
    box = sample_crop_box(resize_size, rng, area_range)
    flip = bool(rng.random() < flip_prob)
    return apply_crop(image, box, crop_size, flip)


def preprocess_eval_image(image: np.ndarray, resize_size: int = RESIZE_SIZE, crop_size: int = CROP_SIZE) -> np.ndarray:
    """Deterministic resize then center crop"""
    image = _ensure_size(image, resize_size, crop_size)
    offset = (resize_size - crop_size) // 2
    return image[offset:offset + crop_size, offset:offset + crop_size].copy()


def split_by_date(records: Sequence[PatientRecord], boundaries: Tuple[date, date]):
    """train: date <= b1, val: b1 < date <= b2, test: later"""
    first, second = boundaries
    if first > second:
        raise ContractError(f"split boundaries out of order: {first} > {second}")
    train: List[PatientRecord] = []
    val: List[PatientRecord] = []
    test: List[PatientRecord] = []
    for record in records:
        if record.admission_date <= first:
            train.append(record)
        elif record.admission_date <= second:
            val.append(record)
        else:
            test.append(record)
    logger.info(f"Split {len(records)} records into train={len(train)} val={len(val)} test={len(test)}")
    return train, val, test
