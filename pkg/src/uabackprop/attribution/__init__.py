"""Uncertainty attribution methods; every method maps (ensemble, image, kind) to a 2-D map."""

from __future__ import annotations

import numpy as np

from ..nn import EnsemblePosterior
from .backprop import (
    attribute_logits,
    attribute_softmax,
    class_gradients,
    compose_map,
    psi,
    saliency_fullgrad,
    saliency_stack,
    softmax_coefficients,
    ua_backprop,
    ua_backprop_all,
    ua_variant,
)
from .baselines import (
    baseline_blur_ig,
    baseline_fullgrad,
    baseline_grad,
    baseline_ig,
    baseline_smoothgrad,
    random_map,
    uncertainty_graph,
)
from .mapio import MapFormatError, load_map, save_map, write_pgm
from .types import BACKENDS, AttributionMap, MethodConfig, SoftmaxAttribution

METHODS = ("ua", "ua-grad", "ua-inputgrad", "ua-ig", "ua-nonorm", "grad", "smoothgrad", "fullgrad", "ig", "blurig", "random")


def attribute(method: str, ens: EnsemblePosterior, x: np.ndarray, kind: str = "epistemic",
              cfg: MethodConfig | None = None, seed: int | None = None) -> AttributionMap:
    """Dispatch by CLI method name. ``seed`` drives the stochastic methods."""
    cfg = cfg or MethodConfig.for_channels(ens.input_shape[0])
    seed = cfg.seed if seed is None else seed
    if method == "ua":
        return ua_backprop(ens, x, kind, cfg)
    if method == "ua-nonorm":
        return ua_backprop(ens, x, kind, MethodConfig(**{**cfg.to_dict(), "normalize": False}))
    if method.startswith("ua-"):
        return ua_variant(ens, x, kind, method[3:], cfg)
    if method == "grad":
        return baseline_grad(ens, x, kind)
    if method == "smoothgrad":
        return baseline_smoothgrad(ens, x, kind, cfg.smooth_k, cfg.smooth_sigma, seed)
    if method == "fullgrad":
        return baseline_fullgrad(ens, x, kind, cfg.tau2)
    if method == "ig":
        return baseline_ig(ens, x, kind, cfg.ig_steps, cfg.ig_reference)
    if method == "blurig":
        return baseline_blur_ig(ens, x, kind, cfg.blur_ig_steps, cfg.blur_ig_max_sigma)
    if method == "random":
        h, w = ens.input_shape[1:]
        return random_map(h, w, seed, kind)
    raise ValueError(f"unknown attribution method {method!r}; choose from {METHODS}")


__all__ = [
    "AttributionMap", "MethodConfig", "SoftmaxAttribution", "BACKENDS", "METHODS", "MapFormatError",
    "attribute", "attribute_softmax", "softmax_coefficients", "attribute_logits", "psi", "compose_map",
    "class_gradients", "saliency_stack", "saliency_fullgrad", "ua_backprop", "ua_backprop_all", "ua_variant",
    "baseline_grad", "baseline_smoothgrad", "baseline_fullgrad", "baseline_ig", "baseline_blur_ig",
    "random_map", "uncertainty_graph", "save_map", "load_map", "write_pgm",
]
