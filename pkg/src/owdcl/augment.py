"""Positive-pair generation: horizontal flip followed by a small random rotation.

Images are 2-D float arrays ``(height, width)`` with values in [0, 1].
"""

from __future__ import annotations

import numpy as np

from .errors import AngleOutOfRange

MAX_ROTATION = 45.0
PAIR_ROTATION = 30.0


def as_raster(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"raster must be a non-empty 2-D array, got shape {arr.shape}")
    return arr


def hflip(img) -> np.ndarray:
    return as_raster(img)[:, ::-1].copy()


def _bilinear_zero(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample ``img`` at fractional coordinates; neighbours outside the frame read as 0."""
    h, w = img.shape
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = rows - r0
    fc = cols - c0
    out = np.zeros(rows.shape, dtype=np.float64)
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr = r0 + dr
            cc = c0 + dc
            inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            vals = np.zeros(rows.shape, dtype=np.float64)
            vals[inside] = img[rr[inside], cc[inside]]
            out += wr * wc * vals
    return out


def rotate(img, degrees: float) -> np.ndarray:
    """Rotate about the image centre by ``degrees`` (counter-clockwise), bilinear, zero fill."""
    degrees = float(degrees)
    if not 0.0 <= degrees <= MAX_ROTATION:
        raise AngleOutOfRange(f"rotation {degrees} outside [0, {MAX_ROTATION}] degrees")
    return rotate_any(img, degrees)


def rotate_any(img, degrees: float) -> np.ndarray:
    """:func:`rotate` without the angle range check."""
    img = as_raster(img)
    if degrees == 0.0:
        return img.copy()
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(degrees)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    # inverse map: rotate output coordinates by -theta to find the source location
    src_x = cos_t * dx - sin_t * dy + cx
    src_y = sin_t * dx + cos_t * dy + cy
    return np.clip(_bilinear_zero(img, src_y, src_x), 0.0, 1.0)


def make_pair(img, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """``(img, rotate(hflip(img), U[0, 30]))`` with the angle drawn from ``rng``."""
    img = as_raster(img)
    angle = rng.uniform(0.0, PAIR_ROTATION)
    return img, rotate(hflip(img), angle)


def make_pairs(images: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Batch version of :func:`make_pair`; one angle per sample, drawn in stream order."""
    images = np.asarray(images, dtype=np.float64)
    views = np.empty_like(images)
    for i, img in enumerate(images):
        views[i] = make_pair(img, rng)[1]
    return images, views
