#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Geometric preprocessing for mcaesthetics.

Images are numpy arrays shaped (height, width) or (height, width, channels),
either uint8 or floating point. Every operation is pure; random crops draw
from a generator local to the call.
"""

from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from config import config
from exceptions import (BadCropError, BadImageError, BadShapeError, EmptyImageError,
                        ImageTooSmallError, InsufficientSeparationError)
from logging_config import StructuredLogger
from models import CropSpec

logger = StructuredLogger(__name__)


# --- Image I/O ---

def load_image(path: Union[str, Path]) -> np.ndarray:
    """Decode an image file into an RGB uint8 array.

    Raises:
        BadImageError: If the file is missing or cannot be decoded
    """
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, UnidentifiedImageError, ValueError) as e:
        raise BadImageError(f"Cannot read image {path}: {e}") from e


def save_image(image: np.ndarray, path: Union[str, Path]) -> Path:
    """Write a uint8 plane (grayscale or RGB) as PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    array = np.asarray(image)
    if array.ndim == 3 and array.shape[2] == 1:
        array = array[:, :, 0]
    Image.fromarray(array.astype(np.uint8)).save(path, format="PNG")
    return path


# --- Helpers ---

def image_size(image: np.ndarray) -> Tuple[int, int]:
    """Return (width, height)."""
    return int(image.shape[1]), int(image.shape[0])


def _check_image(image: np.ndarray) -> None:
    if image.ndim not in (2, 3) or image.shape[0] < 1 or image.shape[1] < 1:
        raise EmptyImageError(f"Image has no area (shape {image.shape})")


def _resize_channel(channel: np.ndarray, width: int, height: int) -> np.ndarray:
    channel = np.ascontiguousarray(channel)
    if channel.dtype == np.uint8:
        resized = Image.fromarray(channel).resize((width, height), Image.Resampling.BILINEAR)
        return np.asarray(resized, dtype=np.uint8)
    resized = Image.fromarray(channel.astype(np.float32)).resize((width, height), Image.Resampling.BILINEAR)
    return np.asarray(resized, dtype=np.float32)


def stretch_resize(image: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize to exactly width x height, ignoring the aspect ratio."""
    _check_image(image)
    if image_size(image) == (width, height):
        return image.copy()
    if image.ndim == 2:
        return _resize_channel(image, width, height)
    channels = [_resize_channel(image[:, :, c], width, height) for c in range(image.shape[2])]
    return np.stack(channels, axis=2)


def _scale_shorter_side(image: np.ndarray, target_w: int, target_h: int) -> np.ndarray:
    w, h = image_size(image)
    scale = max(target_w / w, target_h / h)
    new_w = max(target_w, int(round(w * scale)))
    new_h = max(target_h, int(round(h * scale)))
    return stretch_resize(image, new_w, new_h)


# --- Operations ---

def resize_to(image: np.ndarray, target_w: Optional[int] = None,
              target_h: Optional[int] = None, mode: Optional[str] = None) -> np.ndarray:
    """Resize to the network input size.

    In "aspect" mode the shorter side is scaled to the target and the longer
    axis is center-cropped; "stretch" mode resizes anisotropically.

    Raises:
        EmptyImageError: For zero-area input
    """
    target_w = config.IMAGE_SIZE if target_w is None else target_w
    target_h = config.IMAGE_SIZE if target_h is None else target_h
    mode = (config.RESIZE_MODE if mode is None else mode).lower()
    _check_image(image)
    if mode == "stretch":
        return stretch_resize(image, target_w, target_h)

    scaled = _scale_shorter_side(image, target_w, target_h)
    w, h = image_size(scaled)
    spec = CropSpec((w - target_w) // 2, (h - target_h) // 2, target_w, target_h)
    return apply_crop(scaled, spec)


def upscale_to_min(image: np.ndarray, size: Optional[int] = None) -> np.ndarray:
    """Scale up (aspect preserved) so both sides are at least size; larger images are untouched."""
    size = config.IMAGE_SIZE if size is None else size
    _check_image(image)
    w, h = image_size(image)
    if w >= size and h >= size:
        return image
    return _scale_shorter_side(image, size, size)


def pad_to_square(image: np.ndarray, value: Optional[float] = None,
                  return_offsets: bool = False):
    """Zero-pad the shorter axis so the image becomes S x S, S = max(w, h).

    Content is centered; an odd difference puts the extra pixel bottom/right.

    Returns:
        The padded image, or (padded image, (offset_x, offset_y)) when
        return_offsets is set.
    """
    value = config.PAD_VALUE if value is None else value
    _check_image(image)
    w, h = image_size(image)
    side = max(w, h)
    off_x, off_y = (side - w) // 2, (side - h) // 2
    shape = (side, side) + image.shape[2:]
    padded = np.full(shape, value, dtype=image.dtype)
    padded[off_y:off_y + h, off_x:off_x + w] = image
    if return_offsets:
        return padded, (off_x, off_y)
    return padded


def center_crop(image: np.ndarray, size: Optional[int] = None) -> Tuple[np.ndarray, CropSpec]:
    """Crop the central size x size window.

    Raises:
        ImageTooSmallError: If either side is shorter than size
    """
    size = config.IMAGE_SIZE if size is None else size
    _check_image(image)
    w, h = image_size(image)
    if w < size or h < size:
        raise ImageTooSmallError(f"Image {w}x{h} is smaller than the {size}x{size} crop")
    spec = CropSpec((w - size) // 2, (h - size) // 2, size, size)
    return apply_crop(image, spec), spec


def separation_ok(a: CropSpec, b: CropSpec, min_sep: int) -> bool:
    """Chebyshev distance between crop centres is at least min_sep."""
    (ax, ay), (bx, by) = a.doubled_center, b.doubled_center
    return max(abs(ax - bx), abs(ay - by)) >= 2 * min_sep


def place_random_crops(width: int, height: int, size: Optional[int] = None, k: Optional[int] = None,
                       min_sep: Optional[int] = None, seed: int = 0,
                       max_attempts: Optional[int] = None) -> List[CropSpec]:
    """Rejection-sample k crops on a width x height image.

    Candidates are uniform over valid top-left positions. A candidate is kept
    when it is separated from the center crop and from every crop kept so far.

    Raises:
        ImageTooSmallError: If the image is smaller than the crop
        InsufficientSeparationError: When fewer than k crops fit in max_attempts;
            the placed crops travel on the exception
    """
    size = config.IMAGE_SIZE if size is None else size
    k = config.RANDOM_CROP_COUNT if k is None else k
    min_sep = config.RANDOM_CROP_MIN_SEP if min_sep is None else min_sep
    max_attempts = config.RANDOM_CROP_MAX_ATTEMPTS if max_attempts is None else max_attempts
    if width < size or height < size:
        raise ImageTooSmallError(f"Image {width}x{height} is smaller than the {size}x{size} crop")

    rng = np.random.default_rng(seed)
    center = CropSpec((width - size) // 2, (height - size) // 2, size, size)
    placed: List[CropSpec] = []
    attempts = 0
    while len(placed) < k and attempts < max_attempts:
        attempts += 1
        x = int(rng.integers(0, width - size + 1))
        y = int(rng.integers(0, height - size + 1))
        candidate = CropSpec(x, y, size, size)
        if all(separation_ok(candidate, other, min_sep) for other in [center, *placed]):
            placed.append(candidate)

    if len(placed) < k:
        logger.debug("Random crops infeasible", width=width, height=height, placed=len(placed),
                     requested=k, attempts=attempts)
        raise InsufficientSeparationError(
            f"Only {len(placed)} of {k} crops placed on {width}x{height} after {attempts} attempts",
            crops=placed,
        )
    return placed


def random_crops(image: np.ndarray, size: Optional[int] = None, k: Optional[int] = None,
                 min_sep: Optional[int] = None, seed: int = 0,
                 max_attempts: Optional[int] = None) -> List[CropSpec]:
    """Separation-constrained random crops of an image; see place_random_crops."""
    _check_image(image)
    w, h = image_size(image)
    return place_random_crops(w, h, size=size, k=k, min_sep=min_sep, seed=seed,
                              max_attempts=max_attempts)


def apply_crop(image: np.ndarray, spec: CropSpec) -> np.ndarray:
    """Copy the pixels under spec.

    Raises:
        BadCropError: If spec leaves the image
    """
    _check_image(image)
    w, h = image_size(image)
    if not spec.fits(w, h):
        raise BadCropError(f"Crop {spec.as_tuple()} does not fit a {w}x{h} image")
    return image[spec.y:spec.y + spec.h, spec.x:spec.x + spec.w].copy()


def normalize_pixels(image: np.ndarray, mean: Optional[List[float]] = None,
                     std: Optional[List[float]] = None) -> torch.Tensor:
    """Convert an IMAGE_SIZE square plane to a standardized 3 x S x S float tensor.

    uint8 input is scaled by 1/255; float input is taken as already in [0, 1].
    Single-channel input is replicated to three channels.

    Raises:
        BadShapeError: If the plane is not IMAGE_SIZE x IMAGE_SIZE with 1 or 3 channels
    """
    size = config.IMAGE_SIZE
    mean = np.asarray(config.PIXEL_MEAN if mean is None else mean, dtype=np.float32)
    std = np.asarray(config.PIXEL_STD if std is None else std, dtype=np.float32)
    array = np.asarray(image)
    if array.ndim == 2:
        array = array[:, :, None]
    if array.ndim != 3 or array.shape[:2] != (size, size) or array.shape[2] not in (1, 3):
        raise BadShapeError(f"Expected a {size}x{size} plane with 1 or 3 channels, got {array.shape}")

    if array.dtype == np.uint8:
        scaled = array.astype(np.float32) / 255.0
    else:
        scaled = array.astype(np.float32)
    if scaled.shape[2] == 1:
        scaled = np.repeat(scaled, 3, axis=2)
    standardized = (scaled - mean) / std
    return torch.from_numpy(np.ascontiguousarray(standardized.transpose(2, 0, 1)))


def to_uint8_plane(plane: np.ndarray) -> np.ndarray:
    """Linear quantization of a [0, 1] plane to 8 bits."""
    return np.clip(np.round(np.asarray(plane, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
