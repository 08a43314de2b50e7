#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Static saliency maps for mcaesthetics.

Two methods produce a [0, 1] plane with the source image's spatial size:
spectral residual (log-amplitude spectrum minus its local average) and
fine-grained center-surround differences computed on an integral image.
"""

from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from config import config
from exceptions import EmptyImageError
from logging_config import StructuredLogger

logger = StructuredLogger(__name__)

# Rec.601 luma weights, per mille
_LUMA_WEIGHTS = (299, 587, 114)


def luminance(image: np.ndarray) -> np.ndarray:
    """Single-plane intensity.

    Integer input yields exact int64 values scaled by 1000 (weights 299/587/114);
    float input yields float64 with weights 0.299/0.587/0.114.

    Raises:
        EmptyImageError: For zero-area input
    """
    array = np.asarray(image)
    if array.ndim not in (2, 3) or array.shape[0] < 1 or array.shape[1] < 1:
        raise EmptyImageError(f"Image has no area (shape {array.shape})")
    if array.ndim == 3 and array.shape[2] == 1:
        array = array[:, :, 0]

    integral = np.issubdtype(array.dtype, np.integer) or array.dtype == np.bool_
    if array.ndim == 2:
        return array.astype(np.int64) if integral else array.astype(np.float64)

    rgb = array[:, :, :3]
    if integral:
        r, g, b = (rgb[:, :, c].astype(np.int64) for c in range(3))
        return _LUMA_WEIGHTS[0] * r + _LUMA_WEIGHTS[1] * g + _LUMA_WEIGHTS[2] * b
    rgb = rgb.astype(np.float64)
    return (_LUMA_WEIGHTS[0] * rgb[:, :, 0] + _LUMA_WEIGHTS[1] * rgb[:, :, 1]
            + _LUMA_WEIGHTS[2] * rgb[:, :, 2]) / 1000.0


def _normalize(plane: np.ndarray, tolerance: float) -> np.ndarray:
    low, high = float(plane.min()), float(plane.max())
    if high - low < tolerance:
        return np.zeros(plane.shape, dtype=np.float64)
    return np.clip((plane - low) / (high - low), 0.0, 1.0)


def _is_flat(plane: np.ndarray, tolerance: float) -> bool:
    return float(plane.max()) - float(plane.min()) < tolerance


def _zoom_to(plane: np.ndarray, height: int, width: int) -> np.ndarray:
    """Linear resampling to an exact shape."""
    if plane.shape == (height, width):
        return plane.copy()
    factors = (height / plane.shape[0], width / plane.shape[1])
    zoomed = ndimage.zoom(plane, factors, order=1, mode="nearest", grid_mode=False)
    if zoomed.shape != (height, width):
        # zoom rounds its output shape; pad or trim the odd row/column
        fixed = np.zeros((height, width), dtype=zoomed.dtype)
        hh, ww = min(height, zoomed.shape[0]), min(width, zoomed.shape[1])
        fixed[:hh, :ww] = zoomed[:hh, :ww]
        if hh < height:
            fixed[hh:, :ww] = zoomed[hh - 1:hh, :ww]
        if ww < width:
            fixed[:, ww:] = fixed[:, ww - 1:ww]
        zoomed = fixed
    return zoomed


# --- Spectral residual ---

def _floor_amplitude(amplitude: np.ndarray, fraction: float) -> np.ndarray:
    nonzero = amplitude[amplitude > 0]
    if fraction <= 0 or nonzero.size == 0:
        return amplitude
    return np.maximum(amplitude, fraction * float(np.median(nonzero)))


def spectral_residual(image: np.ndarray, working_width: Optional[int] = None,
                      epsilon: Optional[float] = None, box: Optional[int] = None,
                      sigma: Optional[float] = None, amplitude_floor: Optional[float] = None) -> np.ndarray:
    """Spectral residual saliency.

    The luminance is resampled to the working width, its log-amplitude
    spectrum has its local box average removed, and the residual is
    recombined with the original phase. The squared magnitude of the inverse
    transform is smoothed, normalized and resampled back to the source size.

    Hard-edged synthetic shapes can have exact-zero spectrum bins (a box whose
    width divides the working size zeroes whole Nyquist rows). Their log would
    dominate the residual, so amplitudes are lifted to amplitude_floor times
    the median non-zero amplitude first; 0 disables the floor.
    """
    working_width = config.SALIENCY_WORKING_WIDTH if working_width is None else working_width
    epsilon = config.SALIENCY_EPSILON if epsilon is None else epsilon
    box = config.SALIENCY_SPECTRUM_BOX if box is None else box
    sigma = config.SALIENCY_GAUSSIAN_SIGMA if sigma is None else sigma
    amplitude_floor = config.SALIENCY_AMPLITUDE_FLOOR if amplitude_floor is None else amplitude_floor
    tolerance = config.SALIENCY_FLAT_TOLERANCE

    lum = luminance(image).astype(np.float64)
    height, width = lum.shape
    if _is_flat(lum, tolerance):
        return np.zeros((height, width), dtype=np.float64)

    work_h = max(1, int(round(height * working_width / width)))
    small = _zoom_to(lum, work_h, working_width)

    spectrum = np.fft.fft2(small)
    amplitude = _floor_amplitude(np.abs(spectrum), amplitude_floor)
    log_amplitude = np.log(amplitude + epsilon)
    phase = np.angle(spectrum)
    residual = log_amplitude - ndimage.uniform_filter(log_amplitude, size=box, mode="wrap")
    reconstructed = np.fft.ifft2(np.exp(residual + 1j * phase))
    saliency = np.abs(reconstructed) ** 2
    saliency = ndimage.gaussian_filter(saliency, sigma=sigma, mode="reflect")
    saliency = _normalize(saliency, tolerance)

    return _normalize(_zoom_to(saliency, height, width), tolerance)


# --- Fine-grained ---

def _integral_image(plane: np.ndarray) -> np.ndarray:
    ii = np.zeros((plane.shape[0] + 1, plane.shape[1] + 1), dtype=plane.dtype)
    ii[1:, 1:] = plane.cumsum(axis=0).cumsum(axis=1)
    return ii


def _window_sums(ii: np.ndarray, half: int) -> Tuple[np.ndarray, np.ndarray]:
    """Sum and area of the (2*half+1)^2 window around every pixel, clipped at the borders."""
    height, width = ii.shape[0] - 1, ii.shape[1] - 1
    ys, xs = np.arange(height), np.arange(width)
    y0, y1 = np.clip(ys - half, 0, height), np.clip(ys + half + 1, 0, height)
    x0, x1 = np.clip(xs - half, 0, width), np.clip(xs + half + 1, 0, width)
    sums = (ii[np.ix_(y1, x1)] - ii[np.ix_(y0, x1)]
            - ii[np.ix_(y1, x0)] + ii[np.ix_(y0, x0)])
    area = np.outer(y1 - y0, x1 - x0)
    return sums, area


def fine_grained_components(image: np.ndarray,
                            scales: Optional[Sequence[int]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Unnormalized on-center and off-center maps summed over the surround scales.

    For integer input the differences are formed as center*area - window sum in
    int64, so inverting the image swaps the two components exactly.
    """
    scales = config.SALIENCY_FINE_SCALES if scales is None else scales
    lum = luminance(image)
    ii = _integral_image(lum)
    limit = max(lum.shape)

    on = np.zeros(lum.shape, dtype=np.float64)
    off = np.zeros(lum.shape, dtype=np.float64)
    for scale in scales:
        half = min(int(scale), limit)
        sums, area = _window_sums(ii, half)
        diff = lum * area - sums
        on += np.maximum(diff, 0) / area
        off += np.maximum(-diff, 0) / area
    return on, off


def fine_grained(image: np.ndarray, scales: Optional[Sequence[int]] = None) -> np.ndarray:
    """Fine-grained saliency: sum of on and off components, min-max normalized."""
    on, off = fine_grained_components(image, scales=scales)
    return _normalize(on + off, config.SALIENCY_FLAT_TOLERANCE)
