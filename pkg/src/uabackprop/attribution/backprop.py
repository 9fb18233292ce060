"""UA-Backprop: uncertainty -> softmax probabilities -> logits -> pixels.

Stage 1 splits each uncertainty into per-class shares of the ensemble-mean
probabilities. Stage 2 routes every share to the logits of each member through
a temperature softmax of the normalized softmax Jacobian; columns of the
routing matrix sum to one, so nothing is lost. Stage 3 spreads each logit's
share over pixels with a normalized saliency map of that logit. Because every
stage conserves mass, the final map sums to the uncertainty being explained.
"""

from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..imaging import resize_bilinear
from ..nn import EnsemblePosterior, Network, predict_members
from ..tensor import Tensor
from ..uq import KINDS, PROB_FLOOR, check_samples, plogp, quantify
from .types import AttributionMap, MethodConfig, SoftmaxAttribution


def attribute_softmax(samples) -> SoftmaxAttribution:
    g = check_samples(samples)
    total = plogp(g.mean(axis=0))
    aleatoric = plogp(g).mean(axis=0)
    return SoftmaxAttribution(total=total, aleatoric=aleatoric, epistemic=total - aleatoric)


def softmax_coefficients(g, tau1: float, normalize: bool = True) -> np.ndarray:
    """Routing matrix c with c[i, j] = share of g_j's attribution sent to z_i.

    Column j is softmax_i(dg_j/dz_i / (g_j * tau1)). Probabilities are floored
    at 1e-30 before forming the Jacobian so vanishing g_j stays finite. With
    ``normalize=False`` the raw (signed) Jacobian dg_j/dz_i is returned.
    """
    if tau1 <= 0:
        raise ValueError(f"tau1 must be positive, got {tau1}")
    g = np.maximum(np.asarray(g, dtype=np.float64), PROB_FLOOR)
    jac = T.softmax_jacobian(g)  # jac[j, i] = dg_j / dz_i
    if not normalize:
        return jac.T.copy()
    scores = jac / (g[:, None] * tau1)
    scores -= scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    return (e / e.sum(axis=1, keepdims=True)).T


def attribute_logits(shares: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """U_{z_i^s} = sum_j c^s[i, j] U_{g_j}; coeffs (S, C, C) or (C, C)."""
    shares = np.asarray(shares, dtype=np.float64)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape[-1] != shares.shape[-1] or coeffs.shape[-2] != shares.shape[-1]:
        raise T.ShapeError("attribute_logits", shares.shape, coeffs.shape)
    return coeffs @ shares


def psi(raw: np.ndarray, tau2: float, normalize: bool = True) -> np.ndarray:
    """Channel-average (..., Cin, H, W) then pixel softmax with temperature tau2."""
    avg = np.asarray(raw, dtype=np.float64).mean(axis=-3)
    if not normalize:
        return avg
    lead, (h, w) = avg.shape[:-2], avg.shape[-2:]
    flat = avg.reshape(lead + (h * w,)) / tau2
    flat = flat - flat.max(axis=-1, keepdims=True)
    e = np.exp(flat)
    return (e / e.sum(axis=-1, keepdims=True)).reshape(avg.shape)


def compose_map(logit_shares: np.ndarray, stack: np.ndarray) -> np.ndarray:
    """M = (1/S) sum_s sum_i U_{z_i^s} M_i^s."""
    logit_shares = np.asarray(logit_shares, dtype=np.float64)
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 4 or stack.shape[:2] != logit_shares.shape:
        raise T.ShapeError("compose_map", logit_shares.shape, stack.shape)
    return np.einsum("sc,schw->hw", logit_shares, stack) / logit_shares.shape[0]


# ---------------------------------------------------------------------------
# z -> x saliency
# ---------------------------------------------------------------------------


def class_gradients(net: Network, x: np.ndarray, taps: bool = False):
    """Gradients of every logit z_i w.r.t. the input (and bias sites).

    Runs one batched forward/backward pass with one copy of ``x`` per class.
    Returns input gradients (C, Cin, H, W) and, if ``taps``, the gradients of
    each conv/dense bias-added output, batch axis indexed by class.
    """
    c = net.num_classes
    xb = Tensor(np.repeat(np.asarray(x, dtype=np.float64)[None], c, axis=0), requires_grad=True)
    tap_list: list | None = [] if taps else None
    z = net.forward(xb, taps=tap_list)
    idx = np.arange(c)
    T.backward(T.sum(z[idx, idx]))
    if not taps:
        return xb.grad, None
    return xb.grad, [t.grad for t in tap_list]


def bias_saliency(tap_grads: list[np.ndarray], biases: list[np.ndarray], hw: tuple[int, int]) -> np.ndarray:
    """Sum over layers of |dz/dh_l * b_l|, channel-summed and resized to (H, W).

    Conv layers contribute a spatial map (gradient at each position of the
    bias-added feature map times that channel's bias), bilinearly upsampled.
    Dense layers have no spatial extent; their total is broadcast uniformly.
    Leading axis of each gradient is the batch (class or sample) axis.
    """
    h, w = hw
    n = tap_grads[0].shape[0]
    out = np.zeros((n, h, w))
    for g, b in zip(tap_grads, biases):
        if g.ndim == 4:
            layer_map = np.abs(g * b[None, :, None, None]).sum(axis=1)
            out += resize_bilinear(layer_map, h, w)
        else:
            out += np.abs(g * b[None, :]).sum(axis=1)[:, None, None]
    return out


def _member_raw(net: Network, x: np.ndarray, cfg: MethodConfig) -> np.ndarray:
    """Unnormalized saliency of every logit, shape (C, Cin, H, W)."""
    x = np.asarray(x, dtype=np.float64)
    if cfg.backend == "fullgrad":
        gx, tap_grads = class_gradients(net, x, taps=True)
        bias = bias_saliency(tap_grads, net.bias_arrays(), x.shape[-2:])
        return np.abs(gx * x[None]) + bias[:, None, :, :]
    if cfg.backend == "grad":
        gx, _ = class_gradients(net, x)
        return gx
    if cfg.backend == "inputgrad":
        gx, _ = class_gradients(net, x)
        return gx * x[None]
    if cfg.backend == "ig":
        return _member_ig(net, x, cfg)
    raise ValueError(f"unknown backend {cfg.backend!r}")


def _member_ig(net: Network, x: np.ndarray, cfg: MethodConfig) -> np.ndarray:
    c, steps = net.num_classes, cfg.ig_steps
    x0 = cfg.reference_image(x)
    alphas = (np.arange(steps) + 0.5) / steps
    path = x0[None] + alphas[:, None, None, None] * (x - x0)[None]  # (steps, Cin, H, W)
    batch = np.repeat(path, c, axis=0)  # row k*c + i : step k, class i
    xb = Tensor(batch, requires_grad=True)
    z = net.forward(xb)
    rows = np.arange(steps * c)
    T.backward(T.sum(z[rows, rows % c]))
    grads = xb.grad.reshape((steps, c) + x.shape).mean(axis=0)
    return (x - x0)[None] * grads


def saliency_stack(ens: EnsemblePosterior, x: np.ndarray, cfg: MethodConfig) -> np.ndarray:
    """Normalized maps M_i^s(x) for every member and class, shape (S, C, H, W)."""
    return np.stack([psi(_member_raw(m, x, cfg), cfg.tau2, cfg.normalize) for m in ens.members])


def saliency_fullgrad(net: Network, x: np.ndarray, class_index: int, tau2: float) -> np.ndarray:
    """Normalized FullGrad map of one logit of one network, shape (H, W)."""
    if not 0 <= class_index < net.num_classes:
        raise IndexError(f"class {class_index} out of range for {net.num_classes} classes")
    cfg = MethodConfig(tau2=tau2, backend="fullgrad")
    return psi(_member_raw(net, x, cfg)[class_index], tau2)


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


def _method_tag(cfg: MethodConfig) -> str:
    tag = "ua" if cfg.backend == "fullgrad" else f"ua-{cfg.backend}"
    return tag if cfg.normalize else tag + "-nonorm"


def ua_backprop_all(ens: EnsemblePosterior, x: np.ndarray, cfg: MethodConfig | None = None) -> dict[str, AttributionMap]:
    """Maps for all three uncertainty kinds; the saliency stack is shared."""
    cfg = cfg or MethodConfig.for_channels(ens.input_shape[0])
    x = np.asarray(x, dtype=np.float64)
    g = predict_members(ens, x)
    shares = attribute_softmax(g)
    coeffs = np.stack([softmax_coefficients(gs, cfg.tau1, cfg.normalize) for gs in g])
    stack = saliency_stack(ens, x, cfg)
    triple = quantify(g)
    out = {}
    for kind in KINDS:
        logit_shares = attribute_logits(shares.get(kind), coeffs)
        values = compose_map(logit_shares, stack)
        if cfg.normalize:
            values = np.maximum(values, 0.0)
        out[kind] = AttributionMap(values, kind, _method_tag(cfg), triple.get(kind), cfg.to_dict())
    return out


def ua_backprop(ens: EnsemblePosterior, x: np.ndarray, kind: str = "epistemic", cfg: MethodConfig | None = None) -> AttributionMap:
    if kind not in KINDS:
        raise ValueError(f"unknown uncertainty kind {kind!r}")
    return ua_backprop_all(ens, x, cfg)[kind]


def ua_variant(ens: EnsemblePosterior, x: np.ndarray, kind: str, backend: str, cfg: MethodConfig | None = None) -> AttributionMap:
    """UA-Backprop with a different z -> x backend ("grad", "inputgrad", "ig")."""
    base = (cfg or MethodConfig.for_channels(ens.input_shape[0])).to_dict()
    base["backend"] = backend
    return ua_backprop(ens, x, kind, MethodConfig(**base))
