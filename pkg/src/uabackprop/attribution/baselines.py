"""Gradient attribution baselines applied directly to an uncertainty score."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .. import tensor as T
from ..imaging import gaussian_blur
from ..nn import EnsemblePosterior
from ..tensor import Tensor
from ..uq import KINDS, PROB_FLOOR
from .backprop import bias_saliency, psi
from .types import AttributionMap


def _entropy_rows(p: Tensor) -> Tensor:
    return -T.sum(p * T.log(T.clamp_min(p, PROB_FLOOR)), axis=-1)


def uncertainty_graph(ens: EnsemblePosterior, xb: Tensor, kind: str, taps: list | None = None) -> Tensor:
    """Differentiable per-image uncertainty for a batch, shape (N,)."""
    if kind not in KINDS:
        raise ValueError(f"unknown uncertainty kind {kind!r}")
    probs = []
    for m in ens.members:
        member_taps = [] if taps is not None else None
        probs.append(T.softmax(m.forward(xb, taps=member_taps), axis=-1))
        if taps is not None:
            taps.append(member_taps)
    s = len(probs)
    mean_p = T.stack_sum(probs) * (1.0 / s)
    total = _entropy_rows(mean_p)
    if kind == "total":
        return total
    aleatoric = T.stack_sum([_entropy_rows(p) for p in probs]) * (1.0 / s)
    return aleatoric if kind == "aleatoric" else total - aleatoric


def uncertainty_input_grad(ens: EnsemblePosterior, batch: np.ndarray, kind: str) -> tuple[np.ndarray, np.ndarray]:
    """(dU/dx per image, U per image) for a batch of images."""
    xb = Tensor(np.asarray(batch, dtype=np.float64), requires_grad=True)
    u = uncertainty_graph(ens, xb, kind)
    T.backward(T.sum(u))
    return xb.grad, u.data


def _channel_abs_mean(a: np.ndarray) -> np.ndarray:
    return np.abs(a).mean(axis=-3)


def baseline_grad(ens: EnsemblePosterior, x: np.ndarray, kind: str = "epistemic") -> AttributionMap:
    x = np.asarray(x, dtype=np.float64)
    grad, u = uncertainty_input_grad(ens, x[None], kind)
    return AttributionMap(_channel_abs_mean(grad[0]), kind, "grad", float(u[0]))


def baseline_smoothgrad(
    ens: EnsemblePosterior, x: np.ndarray, kind: str = "epistemic", k: int = 50, sigma: float = 0.1, seed: int = 0
) -> AttributionMap:
    if k < 1:
        raise ValueError("smoothgrad needs k >= 1")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    noisy = x[None] + sigma * rng.standard_normal((k,) + x.shape)
    grad, _ = uncertainty_input_grad(ens, noisy, kind)
    _, u = uncertainty_input_grad(ens, x[None], kind)
    values = _channel_abs_mean(grad).mean(axis=0)
    return AttributionMap(values, kind, "smoothgrad", float(u[0]), {"k": k, "sigma": sigma, "seed": seed})


def baseline_fullgrad(ens: EnsemblePosterior, x: np.ndarray, kind: str = "epistemic", tau2: float = 0.3) -> AttributionMap:
    """FullGrad of U itself: input term plus bias terms of every member, then psi."""
    x = np.asarray(x, dtype=np.float64)
    xb = Tensor(x[None], requires_grad=True)
    taps: list = []
    u = uncertainty_graph(ens, xb, kind, taps=taps)
    T.backward(T.sum(u))
    bias = np.zeros((1,) + x.shape[-2:])
    for member, member_taps in zip(ens.members, taps):
        bias += bias_saliency([t.grad for t in member_taps], member.bias_arrays(), x.shape[-2:])
    raw = np.abs(xb.grad * x[None]) + bias[:, None]
    return AttributionMap(psi(raw, tau2)[0], kind, "fullgrad", float(u.data[0]), {"tau2": tau2})


def integrated_path(grad_fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, x0: np.ndarray, steps: int) -> np.ndarray:
    """(x - x0) * midpoint-rule average of grad_fn along the straight path x0 -> x."""
    if steps < 1:
        raise ValueError("integrated gradients needs steps >= 1")
    alphas = (np.arange(steps) + 0.5) / steps
    shape = (steps,) + (1,) * x.ndim
    path = x0[None] + alphas.reshape(shape) * (x - x0)[None]
    return (x - x0) * grad_fn(path).mean(axis=0)


def baseline_ig(
    ens: EnsemblePosterior, x: np.ndarray, kind: str = "epistemic", steps: int = 100, reference: str = "white"
) -> AttributionMap:
    x = np.asarray(x, dtype=np.float64)
    x0 = np.ones_like(x) if reference == "white" else np.zeros_like(x)
    attr = integrated_path(lambda b: uncertainty_input_grad(ens, b, kind)[0], x, x0, steps)
    _, u = uncertainty_input_grad(ens, x[None], kind)
    return AttributionMap(_channel_abs_mean(attr), kind, "ig", float(u[0]), {"steps": steps, "reference": reference})


def blur_path(grad_fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, steps: int, max_sigma: float) -> np.ndarray:
    """Accumulate grad . d(image) along blur levels max_sigma -> 0.

    Gradients are taken at the blur level midway between consecutive steps.
    """
    if steps < 1:
        raise ValueError("blur IG needs steps >= 1")
    sigmas = max_sigma * (1.0 - np.arange(steps + 1) / steps)
    if max_sigma == 0:
        return np.zeros_like(x)
    levels = np.stack([gaussian_blur(x, s) for s in sigmas])
    mids = np.stack([gaussian_blur(x, 0.5 * (a + b)) for a, b in zip(sigmas[:-1], sigmas[1:])])
    grads = grad_fn(mids)
    return (grads * np.diff(levels, axis=0)).sum(axis=0)


def baseline_blur_ig(
    ens: EnsemblePosterior, x: np.ndarray, kind: str = "epistemic", steps: int = 100, max_sigma: float = 20.0
) -> AttributionMap:
    x = np.asarray(x, dtype=np.float64)
    attr = blur_path(lambda b: uncertainty_input_grad(ens, b, kind)[0], x, steps, max_sigma)
    _, u = uncertainty_input_grad(ens, x[None], kind)
    return AttributionMap(_channel_abs_mean(attr), kind, "blurig", float(u[0]), {"steps": steps, "max_sigma": max_sigma})


def random_map(height: int, width: int, seed: int = 0, kind: str = "epistemic") -> AttributionMap:
    """I.i.d. U[0, 1] control map."""
    rng = np.random.default_rng(seed)
    return AttributionMap(rng.uniform(0.0, 1.0, size=(height, width)), kind, "random", None, {"seed": seed})

