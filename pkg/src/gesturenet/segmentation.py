"""Depth-map hand segmentation.

The closest valid pixel is assumed to lie on the hand. Everything within
``depth_alpha`` of it is kept, the mask is dilated with a 3x3 square, holes
are filled, and the connected component containing the closest pixel is
resized to the 50x50 network input.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

INPUT_SIZE = 50
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class SegmentationError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


@dataclass(frozen=True)
class SegmentationParams:
    depth_alpha: int = 3
    dilation_size: int = 3

    def __post_init__(self):
        if self.depth_alpha < 0:
            raise ValueError("depth_alpha must be non-negative")
        if self.dilation_size < 1:
            raise ValueError("dilation_size must be positive")


def closest_pixel(depth):
    """Row-major first pixel holding the minimum non-zero depth, and that depth."""
    depth = np.asarray(depth)
    valid = depth > 0
    if not valid.any():
        raise SegmentationError("threshold", "depth map has no valid (non-zero) pixels")
    m = depth[valid].min()
    flat = np.flatnonzero((depth == m).ravel())[0]
    return np.unravel_index(flat, depth.shape), int(m)


def threshold_depth(depth, params=SegmentationParams()):
    """Mask of pixels with ``0 < d <= m + depth_alpha``; returns ``(mask, m)``."""
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise SegmentationError("threshold", f"depth map must be 2-D, got shape {depth.shape}")
    _, m = closest_pixel(depth)
    mask = (depth > 0) & (depth <= m + params.depth_alpha)
    return mask.astype(np.uint8), m


def dilate(mask, size=3):
    """Binary dilation with a ``size`` x ``size`` square; outside the frame counts as 0."""
    square = np.ones((size, size), dtype=bool)
    return ndimage.binary_dilation(np.asarray(mask, bool), structure=square).astype(np.uint8)


def fill_holes(mask):
    """Set background not 4-connected to the frame border to foreground."""
    return ndimage.binary_fill_holes(np.asarray(mask, bool)).astype(np.uint8)


def largest_component_containing(mask, seed):
    """Keep the 8-connected foreground component that contains ``seed``.

    If the seed is background the largest component is kept instead and a
    warning is logged.
    """
    labels, count = ndimage.label(np.asarray(mask, bool), structure=EIGHT_CONNECTED)
    if count == 0:
        raise SegmentationError("component", "mask is empty after morphology")
    keep = labels[tuple(seed)]
    if keep == 0:
        log.warning("seed pixel %s is background; keeping the largest component", tuple(seed))
        sizes = np.bincount(labels.ravel())[1:]
        keep = int(np.argmax(sizes)) + 1
    return (labels == keep).astype(np.uint8)


def _axis_weights(n_in, n_out):
    w = np.zeros((n_out, n_in))
    if n_in >= n_out:
        # box average: each output cell averages the source span it covers
        scale = n_in / n_out
        for i in range(n_out):
            lo, hi = i * scale, (i + 1) * scale
            for j in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in)):
                w[i, j] = min(hi, j + 1) - max(lo, j)
        w /= scale
    else:
        # bilinear, pixel-centre aligned
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = pos - lo
        w[np.arange(n_out), lo] += 1 - frac
        w[np.arange(n_out), hi] += frac
    return w


def resize_mask(mask, size=INPUT_SIZE):
    """Resample to ``size`` x ``size`` and re-binarize at 0.5."""
    mask = np.asarray(mask, np.float64)
    if mask.ndim != 2 or min(mask.shape) < 1:
        raise SegmentationError("resize", f"cannot resize mask of shape {mask.shape}")
    if mask.shape == (size, size):
        return (mask > 0).astype(np.uint8)
    rows = _axis_weights(mask.shape[0], size)
    cols = _axis_weights(mask.shape[1], size)
    return (rows @ mask @ cols.T >= 0.5 - 1e-9).astype(np.uint8)


def segment_full_resolution(depth, params=SegmentationParams()):
    """Hand mask at the depth map's own resolution (before resizing)."""
    depth = np.asarray(depth)
    mask, _ = threshold_depth(depth, params)
    seed, _ = closest_pixel(depth)
    mask = dilate(mask, params.dilation_size)
    mask = fill_holes(mask)
    return largest_component_containing(mask, seed)


def segment_hand(depth, params=SegmentationParams()):
    return resize_mask(segment_full_resolution(depth, params))
