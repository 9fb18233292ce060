from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

BACKENDS = ("fullgrad", "grad", "inputgrad", "ig")


@dataclass
class MethodConfig:
    """Hyperparameters for every attribution method.

    ``tau1`` sharpens the logit coefficients, ``tau2`` the per-logit saliency
    maps. ``normalize=False`` switches UA-Backprop to its no-normalization
    ablation (raw signed Jacobian, no pixel softmax); its maps may be
    negative and do not satisfy completeness.
    """

    tau1: float = 0.08
    tau2: float = 0.3
    backend: str = "fullgrad"
    normalize: bool = True
    smooth_k: int = 50
    smooth_sigma: float = 0.1
    ig_steps: int = 100
    ig_reference: str = "white"
    blur_ig_steps: int = 100
    blur_ig_max_sigma: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if self.tau1 <= 0 or self.tau2 <= 0:
            raise ValueError(f"temperatures must be positive, got tau1={self.tau1} tau2={self.tau2}")
        if self.smooth_k < 1 or self.ig_steps < 1 or self.blur_ig_steps < 1:
            raise ValueError("sample and step counts must be >= 1")
        if self.smooth_sigma < 0 or self.blur_ig_max_sigma < 0:
            raise ValueError("noise and blur scales must be >= 0")
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}; choose from {BACKENDS}")
        if self.ig_reference not in ("white", "black"):
            raise ValueError(f"unknown IG reference {self.ig_reference!r}")

    @classmethod
    def for_channels(cls, channels: int, **overrides) -> "MethodConfig":
        """Default temperatures: grayscale (0.08, 0.3), color (0.55, 0.02)."""
        base = {"tau1": 0.08, "tau2": 0.3} if channels == 1 else {"tau1": 0.55, "tau2": 0.02}
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def reference_image(self, x: np.ndarray) -> np.ndarray:
        return np.ones_like(x) if self.ig_reference == "white" else np.zeros_like(x)


@dataclass
class AttributionMap:
    """Per-pixel (H, W) attribution of one uncertainty kind for one image."""

    values: np.ndarray
    kind: str
    method: str
    total_uncertainty: float | None = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"attribution map must be 2-D, got shape {self.values.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def completeness_gap(self) -> float:
        """|sum(M) - U|; NaN when the map carries no uncertainty value."""
        if self.total_uncertainty is None:
            return float("nan")
        return abs(float(self.values.sum()) - self.total_uncertainty)


@dataclass(frozen=True)
class SoftmaxAttribution:
    """Per-class shares U_{g_i} of each uncertainty kind, arrays of length C."""

    total: np.ndarray
    aleatoric: np.ndarray
    epistemic: np.ndarray

    def get(self, kind: str) -> np.ndarray:
        if kind not in ("total", "aleatoric", "epistemic"):
            raise ValueError(f"unknown uncertainty kind {kind!r}")
        return getattr(self, kind)
