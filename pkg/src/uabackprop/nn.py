"""Small CNN/MLP classifiers, SGD training and deep ensembles.

Parameters live as plain float64 arrays on the :class:`Network`. Every forward
pass wraps them in fresh :class:`~uabackprop.tensor.Tensor` objects, so
gradient bookkeeping never touches shared state and a trained network can be
used by several attribution jobs at once.
"""

from __future__ import annotations

import copy
import io
import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .imaging import resize_bilinear
from .tensor import Tensor

logger = logging.getLogger(__name__)

__all__ = [
    "ArchSpec",
    "Network",
    "EnsemblePosterior",
    "TrainConfig",
    "ModelFormatError",
    "reference_arch",
    "mlp_arch",
    "build_network",
    "train",
    "train_ensemble",
    "predict_members",
    "grad_wrt_input",
    "grads_wrt_biases",
    "save_model",
    "load_model",
    "dumps_model",
    "loads_model",
]


# ---------------------------------------------------------------------------
# Architecture
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ArchSpec:
    """Input shape (C, H, W), class count and an ordered list of layer dicts.

    Layer dicts: ``{"type": "conv2d", "out": 8, "kernel": 3, "stride": 1,
    "padding": 1}``, ``{"type": "dense", "out": 32}``, ``{"type": "relu"}``,
    ``{"type": "maxpool", "kernel": 2}``, ``{"type": "flatten"}``,
    ``{"type": "dropout"}``. The final dense layer is appended implicitly and
    emits ``num_classes`` logits.
    """

    input_shape: tuple[int, int, int]
    num_classes: int
    layers: tuple[dict, ...]

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [dict(layer) for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(tuple(d["input_shape"]), int(d["num_classes"]), tuple(dict(x) for x in d["layers"]))


def reference_arch(input_shape=(1, 16, 16), num_classes: int = 4, width: int = 8, hidden: int = 32) -> ArchSpec:
    """conv-relu-pool-conv-relu-pool-flatten-dense-relu-dense."""
    layers = (
        {"type": "conv2d", "out": width, "kernel": 3, "stride": 1, "padding": 1},
        {"type": "relu"},
        {"type": "maxpool", "kernel": 2},
        {"type": "conv2d", "out": width, "kernel": 3, "stride": 1, "padding": 1},
        {"type": "relu"},
        {"type": "maxpool", "kernel": 2},
        {"type": "flatten"},
        {"type": "dense", "out": hidden},
        {"type": "relu"},
    )
    return ArchSpec(tuple(input_shape), num_classes, layers)


def mlp_arch(input_shape=(1, 4, 4), num_classes: int = 3, hidden: Sequence[int] = (8,)) -> ArchSpec:
    layers: list[dict] = [{"type": "flatten"}]
    for h in hidden:
        layers += [{"type": "dense", "out": int(h)}, {"type": "relu"}]
    return ArchSpec(tuple(input_shape), num_classes, tuple(layers))


class _Layer:
    kind = "layer"
    n_params = 0

    def forward(self, x: Tensor, params: Sequence[Tensor], ctx: "_Ctx") -> Tensor:
        raise NotImplementedError


class Conv2d(_Layer):
    kind = "conv2d"
    n_params = 2

    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0):
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride, self.padding = stride, padding

    def param_shapes(self):
        return [(self.out_ch, self.in_ch, self.kernel, self.kernel), (self.out_ch,)]

    def fan_in(self) -> int:
        return self.in_ch * self.kernel * self.kernel

    def out_shape(self, shape):
        c, h, w = shape
        k, s, p = self.kernel, self.stride, self.padding
        return (self.out_ch, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)

    def forward(self, x, params, ctx):
        w, b = params
        out = T.add_bias(T.conv2d(x, w, stride=self.stride, padding=self.padding), b)
        if ctx.taps is not None:
            ctx.taps.append(out)
        return out


class Dense(_Layer):
    kind = "dense"
    n_params = 2

    def __init__(self, in_features, out_features):
        self.in_features, self.out_features = in_features, out_features

    def param_shapes(self):
        return [(self.in_features, self.out_features), (self.out_features,)]

    def fan_in(self) -> int:
        return self.in_features

    def out_shape(self, shape):
        return (self.out_features,)

    def forward(self, x, params, ctx):
        w, b = params
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise T.ShapeError("dense", x.shape, (self.in_features, self.out_features))
        out = T.add_bias(T.matmul(x, w), b)
        if ctx.taps is not None:
            ctx.taps.append(out)
        return out


class ReLU(_Layer):
    kind = "relu"

    def out_shape(self, shape):
        return shape

    def forward(self, x, params, ctx):
        return T.relu(x)


class MaxPool2d(_Layer):
    kind = "maxpool"

    def __init__(self, kernel=2):
        self.kernel = kernel

    def out_shape(self, shape):
        c, h, w = shape
        return (c, h // self.kernel, w // self.kernel)

    def forward(self, x, params, ctx):
        return T.maxpool2d(x, self.kernel)


class Flatten(_Layer):
    kind = "flatten"

    def out_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, params, ctx):
        return T.flatten(x)


class Dropout(_Layer):
    """Inverted dropout; identity unless the forward pass is in training mode."""

    kind = "dropout"

    def out_shape(self, shape):
        return shape

    def forward(self, x, params, ctx):
        if not ctx.train or ctx.dropout <= 0.0:
            return x
        keep = 1.0 - ctx.dropout
        mask = (ctx.rng.random(x.shape) < keep) / keep
        return x * mask


@dataclass
class _Ctx:
    train: bool = False
    dropout: float = 0.0
    rng: np.random.Generator | None = None
    taps: list | None = None


class Network:
    """Feed-forward classifier emitting ``num_classes`` pre-softmax logits.

    ``params`` is a flat list of arrays; each conv/dense layer owns a weight
    followed by a bias. ``attention_after`` is the layer index whose output
    receives latent-space attention (the activation after the last conv).
    """

    def __init__(self, arch: ArchSpec, layers: list[_Layer], params: list[np.ndarray], seed: int | None = None):
        self.arch = arch
        self.layers = layers
        self.params = params
        self.seed = seed
        self._slices: list[slice] = []
        i = 0
        for layer in layers:
            self._slices.append(slice(i, i + layer.n_params))
            i += layer.n_params
        if i != len(params):
            raise ValueError(f"network expects {i} parameter arrays, got {len(params)}")
        self.attention_after = self._find_attention_site()

    @property
    def num_classes(self) -> int:
        return self.arch.num_classes

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.arch.input_shape)

    def _find_attention_site(self) -> int | None:
        convs = [k for k, layer in enumerate(self.layers) if isinstance(layer, Conv2d)]
        if not convs:
            return None
        k = convs[-1]
        if k + 1 < len(self.layers) and isinstance(self.layers[k + 1], ReLU):
            k += 1
        return k

    def bias_layers(self) -> list[int]:
        return [k for k, layer in enumerate(self.layers) if isinstance(layer, (Conv2d, Dense))]

    def bias_arrays(self) -> list[np.ndarray]:
        return [self.params[self._slices[k]][1] for k in self.bias_layers()]

    def param_tensors(self, requires_grad: bool = False) -> list[Tensor]:
        return [Tensor(p, requires_grad=requires_grad) for p in self.params]

    def copy(self) -> "Network":
        return Network(self.arch, copy.deepcopy(self.layers), [p.copy() for p in self.params], self.seed)

    def forward(
        self,
        x: Tensor,
        params: Sequence[Tensor] | None = None,
        *,
        train: bool = False,
        dropout: float = 0.0,
        rng: np.random.Generator | None = None,
        taps: list | None = None,
        attention: np.ndarray | None = None,
        alpha: float = 0.0,
        placement: str = "latent",
    ) -> Tensor:
        """Logits for a batch ``x`` of shape (N, C, H, W).

        ``taps``, when a list, receives the bias-added output of every
        conv/dense layer in order. ``attention`` is an (N, H, W) map applied
        as the multiplier ``1 + alpha * A`` either to the input or to the
        feature maps after the last conv activation (resampled bilinearly).
        """
        if tuple(x.shape[1:]) != self.input_shape:
            raise T.ShapeError("forward", x.shape, (None,) + self.input_shape)
        if params is None:
            params = self.param_tensors()
        ctx = _Ctx(train=train, dropout=dropout, rng=rng, taps=taps)
        if attention is not None and placement not in ("latent", "input"):
            raise ValueError(f"unknown attention placement {placement!r}")
        if attention is not None and placement == "input":
            x = x * _attention_multiplier(attention, x.shape[-2:], alpha)
        for k, layer in enumerate(self.layers):
            x = layer.forward(x, params[self._slices[k]], ctx)
            if attention is not None and placement == "latent" and k == self.attention_after:
                x = x * _attention_multiplier(attention, x.shape[-2:], alpha)
        return x

    def predict_logits(self, x: np.ndarray, batch_size: int = 512, **kwargs) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        att = kwargs.pop("attention", None)
        outs = []
        for start in range(0, len(x), batch_size):
            sl = slice(start, start + batch_size)
            a = None if att is None else att[sl]
            outs.append(self.forward(Tensor(x[sl]), attention=a, **kwargs).data)
        if not outs:
            return np.zeros((0, self.num_classes))
        return np.concatenate(outs, axis=0)

    def predict_proba(self, x: np.ndarray, **kwargs) -> np.ndarray:
        return T._softmax_np(self.predict_logits(x, **kwargs), axis=-1)


def _attention_multiplier(attention: np.ndarray, hw: tuple[int, int], alpha: float) -> np.ndarray:
    att = np.asarray(attention, dtype=np.float64)
    if att.shape[-2:] != tuple(hw):
        att = resize_bilinear(att, hw[0], hw[1])
    return 1.0 + alpha * att[:, None, :, :]


def _make_layers(arch: ArchSpec) -> list[_Layer]:
    shape = tuple(arch.input_shape)
    layers: list[_Layer] = []
    for spec in arch.layers:
        kind = spec["type"]
        if kind == "conv2d":
            layer = Conv2d(shape[0], int(spec["out"]), int(spec["kernel"]), int(spec.get("stride", 1)), int(spec.get("padding", 0)))
        elif kind == "dense":
            if len(shape) != 1:
                raise ValueError("dense layer requires a flattened input; add a flatten layer")
            layer = Dense(shape[0], int(spec["out"]))
        elif kind == "relu":
            layer = ReLU()
        elif kind == "maxpool":
            layer = MaxPool2d(int(spec.get("kernel", 2)))
        elif kind == "flatten":
            layer = Flatten()
        elif kind == "dropout":
            layer = Dropout()
        else:
            raise ValueError(f"unknown layer type {kind!r}")
        shape = layer.out_shape(shape)
        if min(shape) <= 0:
            raise ValueError(f"layer {kind} collapses the feature map to {shape}")
        layers.append(layer)
    if len(shape) != 1:
        layers.append(Flatten())
        shape = (int(np.prod(shape)),)
    layers.append(Dense(shape[0], arch.num_classes))
    return layers


def build_network(arch: ArchSpec, seed: int) -> Network:
    """Fresh network with uniform Kaiming (fan-in) initialization."""
    layers = _make_layers(arch)
    rng = np.random.default_rng([seed, 0])
    params: list[np.ndarray] = []
    for layer in layers:
        if layer.n_params == 0:
            continue
        wshape, bshape = layer.param_shapes()
        fan_in = layer.fan_in()
        wb = np.sqrt(6.0 / fan_in)
        bb = 1.0 / np.sqrt(fan_in)
        params.append(rng.uniform(-wb, wb, size=wshape))
        params.append(rng.uniform(-bb, bb, size=bshape))
    return Network(arch, layers, params, seed=seed)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    dropout: float = 0.0
    milestones: tuple[int, ...] = ()
    gamma: float = 0.1

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.lr < 0 or self.momentum < 0 or self.gamma <= 0:
            raise ValueError("learning rate, momentum and decay must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.gamma ** sum(1 for m in self.milestones if epoch >= m)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


def _check_data(images: np.ndarray, labels: np.ndarray, num_classes: int) -> None:
    if len(images) == 0:
        raise ValueError("train: empty dataset")
    if len(images) != len(labels):
        raise ValueError(f"train: {len(images)} images but {len(labels)} labels")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"train: label out of range [0, {num_classes})")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    logp = T.log_softmax(logits, axis=-1)
    picked = logp[np.arange(len(labels)), labels]
    return -T.mean(picked)


def train(
    net: Network,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    *,
    attention: np.ndarray | None = None,
    alpha: float = 0.0,
    placement: str = "latent",
    history: list | None = None,
) -> Network:
    """Minibatch SGD with momentum on mean cross-entropy; returns a trained copy.

    ``history``, when given, receives the loss of every step.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _check_data(images, labels, net.num_classes)
    if attention is not None and len(attention) != len(images):
        raise ValueError(f"train: {len(images)} images but {len(attention)} attention maps")
    net = net.copy()
    rng = np.random.default_rng([cfg.seed, 1])
    velocity = [np.zeros_like(p) for p in net.params]
    n = len(images)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            params = net.param_tensors(requires_grad=True)
            att = None if attention is None else attention[idx]
            logits = net.forward(
                Tensor(images[idx]), params, train=True, dropout=cfg.dropout, rng=rng,
                attention=att, alpha=alpha, placement=placement,
            )
            loss = cross_entropy(logits, labels[idx])
            T.backward(loss)
            if history is not None:
                history.append(float(loss.data))
            for p, t, v in zip(net.params, params, velocity):
                v *= cfg.momentum
                v += t.grad
                p -= lr * v
    return net


@dataclass
class EnsemblePosterior:
    """S networks of identical architecture standing in for posterior samples."""

    members: list[Network]
    seeds: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        arch = self.members[0].arch
        if any(m.arch != arch for m in self.members):
            raise ValueError("ensemble members must share an architecture")
        if not self.seeds:
            self.seeds = [m.seed if m.seed is not None else -1 for m in self.members]

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def arch(self) -> ArchSpec:
        return self.members[0].arch

    @property
    def num_classes(self) -> int:
        return self.arch.num_classes

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.arch.input_shape)

    def predict_proba(self, x: np.ndarray, **kwargs) -> np.ndarray:
        """Member probabilities for a batch, shape (S, N, C)."""
        return np.stack([m.predict_proba(x, **kwargs) for m in self.members])


def train_ensemble(
    arch: ArchSpec, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig, size: int, jobs: int = 1
) -> EnsemblePosterior:
    """Train ``size`` members with seeds ``cfg.seed + s``."""
    if size < 1:
        raise ValueError(f"ensemble size must be >= 1, got {size}")
    seeds = [cfg.seed + s for s in range(size)]

    def fit(seed: int) -> Network:
        member_cfg = TrainConfig(**{**cfg.to_dict(), "seed": seed})
        logger.info("training member seed=%d", seed)
        return train(build_network(arch, seed), images, labels, member_cfg)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            members = list(pool.map(fit, seeds))
    else:
        members = [fit(s) for s in seeds]
    return EnsemblePosterior(members, seeds)


def predict_members(ens: EnsemblePosterior, x: np.ndarray) -> np.ndarray:
    """Probability vectors g^s for one image, shape (S, C)."""
    x = np.asarray(x, dtype=np.float64)
    if tuple(x.shape) != ens.input_shape:
        raise T.ShapeError("predict_members", x.shape, ens.input_shape)
    return ens.predict_proba(x[None])[:, 0, :]


# ---------------------------------------------------------------------------
# Gradients of single logits
# ---------------------------------------------------------------------------


def _check_selector(net: Network, selector: int) -> None:
    if not 0 <= selector < net.num_classes:
        raise IndexError(f"output index {selector} out of range for {net.num_classes} classes")


def grad_wrt_input(net: Network, x: np.ndarray, selector: int) -> np.ndarray:
    """d z_selector / d x for a single image x of shape (C, H, W)."""
    _check_selector(net, selector)
    xt = Tensor(np.asarray(x, dtype=np.float64)[None], requires_grad=True)
    z = net.forward(xt)
    T.backward(z[0, selector])
    return xt.grad[0]


def grads_wrt_biases(net: Network, x: np.ndarray, selector: int) -> list[np.ndarray]:
    """d z_selector / d b_l for every conv/dense bias, each shaped like b_l."""
    _check_selector(net, selector)
    params = net.param_tensors(requires_grad=True)
    z = net.forward(Tensor(np.asarray(x, dtype=np.float64)[None]), params)
    T.backward(z[0, selector])
    return [params[net._slices[k]][1].grad for k in net.bias_layers()]


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------

MAGIC = b"UABPMDL\n"
FORMAT_MAJOR = 1
FORMAT_MINOR = 0
_PREFIX = struct.Struct("<8sHHQ")


class ModelFormatError(ValueError):
    """Malformed, truncated or incompatible model file."""


def dumps_model(obj: Network | EnsemblePosterior) -> bytes:
    if isinstance(obj, Network):
        kind, members, seeds = "network", [obj], [obj.seed if obj.seed is not None else -1]
    elif isinstance(obj, EnsemblePosterior):
        kind, members, seeds = "ensemble", obj.members, list(obj.seeds)
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")
    header = {
        "kind": kind,
        "arch": members[0].arch.to_dict(),
        "seeds": [int(s) for s in seeds],
        "members": len(members),
        "blocks": [list(p.shape) for p in members[0].params],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_PREFIX.pack(MAGIC, FORMAT_MAJOR, FORMAT_MINOR, len(hbytes)))
    buf.write(hbytes)
    for m in members:
        for p in m.params:
            buf.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return buf.getvalue()


def loads_model(blob: bytes) -> Network | EnsemblePosterior:
    if len(blob) < _PREFIX.size:
        raise ModelFormatError("truncated model file: missing header")
    magic, major, minor, hlen = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}; not a model file")
    if major != FORMAT_MAJOR:
        raise ModelFormatError(f"unsupported model format version {major}.{minor}")
    pos = _PREFIX.size
    if len(blob) < pos + hlen:
        raise ModelFormatError("truncated model file: incomplete header")
    try:
        header = json.loads(blob[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"corrupted model header: {exc}") from None
    pos += hlen
    try:
        arch = ArchSpec.from_dict(header["arch"])
        shapes = [tuple(int(d) for d in s) for s in header["blocks"]]
        count = int(header["members"])
        kind = header["kind"]
        seeds = [int(s) for s in header["seeds"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"incomplete model header: {exc!r}") from None
    if kind not in ("network", "ensemble") or len(seeds) != count or count < 1:
        raise ModelFormatError(f"inconsistent model header: kind={kind!r} members={count} seeds={len(seeds)}")
    nfloats = sum(int(np.prod(s)) for s in shapes)
    if len(blob) != pos + 8 * nfloats * count:
        raise ModelFormatError(
            f"model payload has {len(blob) - pos} bytes, expected {8 * nfloats * count}"
        )
    flat = np.frombuffer(blob, dtype="<f8", offset=pos).astype(np.float64)
    members = []
    off = 0
    for seed in seeds:
        params = []
        for s in shapes:
            k = int(np.prod(s))
            params.append(flat[off : off + k].reshape(s).copy())
            off += k
        members.append(Network(arch, _make_layers(arch), params, seed=None if seed < 0 else seed))
    if kind == "network":
        return members[0]
    return EnsemblePosterior(members, seeds)


def save_model(obj: Network | EnsemblePosterior, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps_model(obj))
    tmp.replace(path)


def load_model(path: str | Path) -> Network | EnsemblePosterior:
    return loads_model(Path(path).read_bytes())
