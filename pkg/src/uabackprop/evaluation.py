"""Blurring test (URR / MURR / AUC-URR) and patch-swap anomaly detection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imaging import gaussian_blur
from .nn import EnsemblePosterior
from .uq import uncertainty_of

Box = tuple[int, int, int, int]  # row, col, height, width

MIN_UNCERTAINTY = 1e-12


class NotUncertainError(ValueError):
    """The input carries (numerically) zero uncertainty; URR is undefined."""


def uncertainty_batch(ens: EnsemblePosterior, images: np.ndarray, kind: str = "epistemic") -> np.ndarray:
    return uncertainty_of(ens.predict_proba(np.asarray(images, dtype=np.float64)), kind)


def sigma_grid(lo: float = 0.0, hi: float = 20.0, step: float = 0.2) -> np.ndarray:
    if step <= 0 or hi < lo:
        raise ValueError(f"empty sigma range [{lo}, {hi}] step {step}")
    count = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return np.round(lo + step * np.arange(count), 10)


def select_sigma(ens: EnsemblePosterior, x: np.ndarray, sigmas: Sequence[float] | None = None,
                 kind: str = "epistemic") -> float:
    """Blur level minimizing the uncertainty of the fully blurred image; ties -> smallest."""
    sigmas = sigma_grid() if sigmas is None else np.asarray(sigmas, dtype=np.float64)
    if len(sigmas) == 0:
        raise ValueError("select_sigma: empty sigma range")
    blurred = np.stack([gaussian_blur(x, s) for s in sigmas])
    u = uncertainty_batch(ens, blurred, kind)
    return float(sigmas[int(np.argmin(u))])


def pixel_ranking(values: np.ndarray) -> np.ndarray:
    """Flat pixel indices by descending attribution; ties in row-major order."""
    return np.argsort(-np.asarray(values, dtype=np.float64).ravel(), kind="stable")


@dataclass
class BlurCurve:
    urr: np.ndarray
    sigma: float
    base_uncertainty: float
    uncertainties: np.ndarray


@dataclass(frozen=True)
class BlurSummary:
    murr: float
    auc_urr: float


def blur_test(ens: EnsemblePosterior, values: np.ndarray, x: np.ndarray, budget: int,
              kind: str = "epistemic", sigma: float | None = None, sigmas: Sequence[float] | None = None) -> BlurCurve:
    """Blur the top-``budget`` pixels one at a time and track the uncertainty reduction.

    Blurred pixel values come from a single copy of ``x`` blurred at ``sigma``
    (searched per image when not given), composited across all channels.
    URR(t) is the running maximum of 1 - U(x_t)/U(x), starting from 0.
    """
    x = np.asarray(x, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    h, w = x.shape[-2:]
    if values.shape != (h, w):
        raise ValueError(f"map shape {values.shape} does not match image {(h, w)}")
    if not 0 <= budget <= h * w:
        raise ValueError(f"budget {budget} outside [0, {h * w}]")
    base = float(uncertainty_batch(ens, x[None], kind)[0])
    if base <= MIN_UNCERTAINTY:
        raise NotUncertainError("input not uncertain")
    if sigma is None:
        sigma = select_sigma(ens, x, sigmas, kind)
    if budget == 0:
        return BlurCurve(np.zeros(0), sigma, base, np.zeros(0))
    blurred = gaussian_blur(x, sigma)
    order = pixel_ranking(values)[:budget]
    steps = np.empty((budget,) + x.shape)
    cur = x.copy()
    for t, flat in enumerate(order):
        r, c = divmod(int(flat), w)
        cur[..., r, c] = blurred[..., r, c]
        steps[t] = cur
    u = uncertainty_batch(ens, steps, kind)
    urr = np.maximum.accumulate(np.maximum(1.0 - u / base, 0.0))
    return BlurCurve(urr, sigma, base, u)


def summarize(urr: np.ndarray) -> BlurSummary:
    """MURR = max URR; AUC-URR = mean of 1 - URR(t)/MURR (1.0 if MURR == 0)."""
    urr = np.asarray(urr, dtype=np.float64)
    if urr.size == 0:
        return BlurSummary(0.0, 1.0)
    murr = float(urr.max())
    if murr <= 0:
        return BlurSummary(0.0, 1.0)
    return BlurSummary(murr, float(np.mean(1.0 - urr / murr)))


def aggregate(summaries: Iterable[BlurSummary]) -> BlurSummary:
    """Median MURR and median AUC-URR over an image set."""
    items = list(summaries)
    if not items:
        return BlurSummary(float("nan"), float("nan"))
    return BlurSummary(float(np.median([s.murr for s in items])), float(np.median([s.auc_urr for s in items])))


def budget_pixels(fraction: float, height: int, width: int) -> int:
    return max(1, int(round(fraction * height * width)))


def top_uncertain(ens: EnsemblePosterior, images: np.ndarray, count: int, kind: str = "epistemic") -> np.ndarray:
    """Indices of the ``count`` most uncertain images (stable on ties)."""
    u = uncertainty_batch(ens, images, kind)
    return np.argsort(-u, kind="stable")[:count]


# -- anomaly detection -----------------------------------------------------


def _check_box(box: Box, h: int, w: int) -> None:
    r, c, bh, bw = box
    if bh < 0 or bw < 0 or r < 0 or c < 0 or r + bh > h or c + bw > w:
        raise ValueError(f"box {box} outside image bounds {(h, w)}")


def make_anomaly(x: np.ndarray, source: np.ndarray, box: Box) -> tuple[np.ndarray, Box]:
    """Copy of ``x`` whose ``box`` region is replaced by the same region of ``source``."""
    x = np.asarray(x, dtype=np.float64)
    source = np.asarray(source, dtype=np.float64)
    if x.shape != source.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {source.shape}")
    _check_box(box, *x.shape[-2:])
    r, c, bh, bw = box
    out = x.copy()
    out[..., r : r + bh, c : c + bw] = source[..., r : r + bh, c : c + bw]
    return out, tuple(int(v) for v in box)


def patch_swap_set(images: np.ndarray, labels: np.ndarray, box_size: int, seed: int) -> tuple[np.ndarray, list[Box]]:
    """Swap a random square patch of every image with the same region of an image of another class."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    h, w = images.shape[-2:]
    if not 1 <= box_size <= min(h, w):
        raise ValueError(f"box size {box_size} does not fit {h}x{w} images")
    rng = np.random.default_rng([seed, 7])
    out, boxes = [], []
    for k in range(len(images)):
        others = np.flatnonzero(labels != labels[k])
        if len(others) == 0:
            raise ValueError("patch swap needs images of at least two classes")
        src = int(rng.choice(others))
        r = int(rng.integers(0, h - box_size + 1))
        c = int(rng.integers(0, w - box_size + 1))
        img, box = make_anomaly(images[k], images[src], (r, c, box_size, box_size))
        out.append(img)
        boxes.append(box)
    return np.stack(out), boxes


def detect_box(values: np.ndarray, size: tuple[int, int]) -> Box:
    """Window of ``size`` with the highest mean attribution; ties -> smallest (row, col)."""
    values = np.asarray(values, dtype=np.float64)
    bh, bw = size
    if bh > values.shape[0] or bw > values.shape[1] or bh < 1 or bw < 1:
        raise ValueError(f"box size {size} does not fit map {values.shape}")
    sums = sliding_window_view(values, (bh, bw)).sum(axis=(-2, -1))
    r, c = np.unravel_index(int(np.argmax(sums)), sums.shape)
    return int(r), int(c), bh, bw


def iou(a: Box, b: Box) -> float:
    ar, ac, ah, aw = a
    br, bc, bh, bw = b
    ih = max(0, min(ar + ah, br + bh) - max(ar, br))
    iw = max(0, min(ac + aw, bc + bw) - max(ac, bc))
    inter = ih * iw
    union = ah * aw + bh * bw - inter
    return inter / union if union > 0 else 0.0


@dataclass(frozen=True)
class AnomalyResult:
    truth: Box
    predicted: Box
    iou: float

    @property
    def hit(self) -> bool:
        return self.iou > 0.5


def ada(results: Sequence[AnomalyResult]) -> float:
    """Fraction of images whose predicted box has IoU > 0.5."""
    if not results:
        return float("nan")
    return sum(r.hit for r in results) / len(results)
