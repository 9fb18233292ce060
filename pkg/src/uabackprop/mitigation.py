"""Attention-based uncertainty mitigation.

An attribution map is pixel-softmax normalized to M and turned into the
attention A = (1 - M) * M, which peaks at 0.25 where M = 0.5. Retraining
multiplies either the input or the last conv feature maps by 1 + alpha * A.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import resize_bilinear
from .nn import ArchSpec, Network, TrainConfig, build_network, train


@dataclass
class AttentionMap:
    values: np.ndarray
    source: str = "ua"
    alpha: float = 0.2


def normalize_map(values: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Elementwise softmax over all pixels of a 2-D map."""
    v = np.asarray(values, dtype=np.float64) / temperature
    e = np.exp(v - v.max())
    return e / e.sum()


def build_attention(values: np.ndarray, source: str = "ua", alpha: float = 0.2, temperature: float = 1.0) -> AttentionMap:
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("attribution map has non-finite entries")
    m = normalize_map(values, temperature)
    return AttentionMap((1.0 - m) * m, source, alpha)


def downsample(att: AttentionMap, height: int, width: int) -> AttentionMap:
    return AttentionMap(resize_bilinear(att.values, height, width), att.source, att.alpha)


def retrain_with_attention(
    arch: ArchSpec,
    images: np.ndarray,
    labels: np.ndarray,
    attention: np.ndarray | None,
    alpha: float,
    cfg: TrainConfig,
    placement: str = "latent",
    history: list | None = None,
) -> Network:
    """Train a fresh network (seed ``cfg.seed``) on attention-modulated inputs or features.

    ``attention`` holds one pre-generated (H, W) map per training image.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    if attention is not None:
        attention = np.asarray(attention, dtype=np.float64)
        if len(attention) != len(images):
            raise ValueError(f"missing attention maps: {len(attention)} maps for {len(images)} images")
    net = build_network(arch, cfg.seed)
    return train(net, images, labels, cfg, attention=attention, alpha=alpha, placement=placement, history=history)


def accuracy(net: Network, images: np.ndarray, labels: np.ndarray, attention: np.ndarray | None = None,
             alpha: float = 0.0, placement: str = "latent") -> float:
    pred = net.predict_logits(images, attention=attention, alpha=alpha, placement=placement).argmax(axis=1)
    return float(np.mean(pred == np.asarray(labels)))


def nll(net: Network, images: np.ndarray, labels: np.ndarray, attention: np.ndarray | None = None,
        alpha: float = 0.0, placement: str = "latent") -> float:
    p = net.predict_proba(images, attention=attention, alpha=alpha, placement=placement)
    picked = p[np.arange(len(labels)), np.asarray(labels)]
    return float(-np.mean(np.log(np.clip(picked, 1e-30, 1.0))))
