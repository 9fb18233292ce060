"""Entropy decomposition of ensemble predictive uncertainty (in nats)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROB_FLOOR = 1e-30


@dataclass(frozen=True)
class UncertaintyTriple:
    u_total: float
    u_aleatoric: float
    u_epistemic: float

    def get(self, kind: str) -> float:
        try:
            return {"total": self.u_total, "aleatoric": self.u_aleatoric, "epistemic": self.u_epistemic}[kind]
        except KeyError:
            raise ValueError(f"unknown uncertainty kind {kind!r}") from None


KINDS = ("epistemic", "aleatoric", "total")


def plogp(p: np.ndarray) -> np.ndarray:
    """Elementwise -p ln p with 0 ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    return -p * np.log(np.clip(p, PROB_FLOOR, 1.0))


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("entropy: probability vector has negative entries")
    return float(plogp(p).sum())


def check_samples(samples, atol: float = 1e-9) -> np.ndarray:
    """Validate an (S, C) array of probability vectors."""
    try:
        g = np.asarray(samples, dtype=np.float64)
    except ValueError:
        raise ValueError("probability samples have inconsistent vector lengths") from None
    if g.ndim != 2 or g.shape[0] < 1 or g.shape[1] < 1:
        raise ValueError(f"expected (S, C) probability samples, got shape {g.shape}")
    if np.any(g < 0) or not np.all(np.isfinite(g)):
        raise ValueError("probability samples must be finite and non-negative")
    if np.any(np.abs(g.sum(axis=1) - 1.0) > atol):
        raise ValueError("each probability vector must sum to 1")
    return g


def decompose(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized decomposition over leading batch axes.

    ``probs`` has shape (S, ..., C); returns (total, aleatoric, epistemic)
    arrays shaped like the middle axes.
    """
    probs = np.asarray(probs, dtype=np.float64)
    total = plogp(probs.mean(axis=0)).sum(axis=-1)
    aleatoric = plogp(probs).sum(axis=-1).mean(axis=0)
    return total, aleatoric, total - aleatoric


def uncertainty_of(probs: np.ndarray, kind: str) -> np.ndarray:
    total, aleatoric, epistemic = decompose(probs)
    if kind not in KINDS:
        raise ValueError(f"unknown uncertainty kind {kind!r}")
    return {"total": total, "aleatoric": aleatoric, "epistemic": epistemic}[kind]


def quantify(samples) -> UncertaintyTriple:
    g = check_samples(samples)
    total, aleatoric, epistemic = decompose(g)
    return UncertaintyTriple(float(total), float(aleatoric), float(epistemic))
