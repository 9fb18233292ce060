"""Image-space helpers shared by attribution, evaluation and mitigation."""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import gaussian_filter1d


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur over the last two axes.

    Kernel radius is ``ceil(3 * sigma)`` with half-sample reflect padding.
    ``sigma == 0`` returns an unmodified copy.
    """
    if sigma < 0:
        raise ValueError(f"gaussian_blur: sigma must be >= 0, got {sigma}")
    image = np.asarray(image, dtype=np.float64)
    if sigma == 0:
        return image.copy()
    radius = max(1, math.ceil(3.0 * sigma))
    out = gaussian_filter1d(image, sigma, axis=-1, mode="reflect", radius=radius)
    return gaussian_filter1d(out, sigma, axis=-2, mode="reflect", radius=radius)


def _bilinear_axis(src: int, dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # align_corners=False: source coordinate of output pixel centre, clamped at 0
    scale = src / dst
    pos = (np.arange(dst) + 0.5) * scale - 0.5
    pos = np.clip(pos, 0.0, None)
    lo = np.minimum(np.floor(pos).astype(int), src - 1)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    return lo, hi, frac


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of the last two axes (align-corners-false convention)."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[-2:]
    if (h, w) == (height, width):
        return image.copy()
    r0, r1, rf = _bilinear_axis(h, height)
    c0, c1, cf = _bilinear_axis(w, width)
    rows = image[..., r0, :] * (1 - rf)[:, None] + image[..., r1, :] * rf[:, None]
    return rows[..., c0] * (1 - cf) + rows[..., c1] * cf
