"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation on a tensor that requires gradients records its inputs and a
local gradient rule on the output. :func:`backward` linearizes the recorded
graph into a :class:`Tape` (topological order), replays it in reverse and then
releases the graph, so each backward pass starts from zeroed accumulators.

Gradients are kept on every tensor reached by the replay, not only on leaves;
FullGrad-style saliency reads them off intermediate bias-site activations.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "GradientError",
    "tensor",
    "backward",
    "matmul",
    "conv2d",
    "add_bias",
    "relu",
    "maxpool2d",
    "flatten",
    "reshape",
    "exp",
    "log",
    "clamp_min",
    "sum",
    "mean",
    "softmax",
    "log_softmax",
    "softmax_jacobian",
]

_builtin_sum = sum


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""

    def __init__(self, op: str, *shapes: tuple, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        shown = " vs ".join(str(s) for s in self.shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GradientError(RuntimeError):
    """Raised for invalid backward passes (non-scalar or detached roots)."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- basic info -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __rtruediv__(self, other):
        return mul(_wrap(other), reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method-style ops -------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self) -> "Tensor":
        return relu(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def softmax(self, axis: int = -1) -> "Tensor":
        return softmax(self, axis=axis)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, parents: tuple[Tensor, ...], rule, op: str) -> Tensor:
    out = Tensor(out_data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = rule
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape, detail="not broadcastable") from None


# -- elementwise ----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape

    def rule(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record(a.data + b.data, (a, b), rule, "add")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def rule(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(ad * bd, (a, b), rule, "mul")


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _record(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,), "log")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); the gradient is passed only where a > floor."""
    ad = a.data
    keep = ad > floor
    return _record(np.where(keep, ad, floor), (a,), lambda g: (g * keep,), "clamp_min")


def relu(a: Tensor) -> Tensor:
    ad = a.data
    mask = ad > 0
    return _record(ad * mask, (a,), lambda g: (g * mask,), "relu")


# -- reductions and shape ---------------------------------------------------
def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), rule, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    src = a.shape
    return _record(out, (a,), lambda g: (g.reshape(src),), "reshape")


def flatten(a: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    return reshape(a, (a.shape[0], -1))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape

    def rule(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _record(a.data[index], (a,), rule, "getitem")


# -- linear algebra -----------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def rule(g):
        return g @ bd.T, ad.T @ g

    return _record(ad @ bd, (a, b), rule, "matmul")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias along axis 1 of an (N, C, ...) tensor."""
    if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
        raise ShapeError("add_bias", x.shape, b.shape)
    expand = (1, -1) + (1,) * (x.ndim - 2)
    reduce_axes = (0,) + tuple(range(2, x.ndim))

    def rule(g):
        return g, g.sum(axis=reduce_axes)

    return _record(x.data + b.data.reshape(expand), (x, b), rule, "add_bias")


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, x: (N, C, H, W), w: (O, C, kh, kw), no bias."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} padding={padding}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    hp, wp = h + 2 * padding, wd + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError("conv2d", x.shape, w.shape, detail="kernel larger than padded input")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def rule(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (g2.T @ cols).reshape(w.shape)
        gcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros((n, c, hp, wp))
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        return gx, gw

    return _record(np.ascontiguousarray(out), (x, w), rule, "conv2d")


def maxpool2d(x: Tensor, kernel: int = 2) -> Tensor:
    """Non-overlapping max pooling (stride == kernel); trailing rows/cols that do
    not fill a window are dropped. Ties go to the first element in row-major order."""
    if x.ndim != 4:
        raise ShapeError("maxpool2d", x.shape, (kernel, kernel), detail="expected (N, C, H, W)")
    n, c, h, w = x.shape
    ho, wo = h // kernel, w // kernel
    if ho == 0 or wo == 0:
        raise ShapeError("maxpool2d", x.shape, (kernel, kernel), detail="window larger than input")
    cropped = x.data[:, :, : ho * kernel, : wo * kernel]
    blocks = cropped.reshape(n, c, ho, kernel, wo, kernel).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def rule(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gblocks = gflat.reshape(n, c, ho, wo, kernel, kernel).transpose(0, 1, 2, 4, 3, 5)
        gx = np.zeros((n, c, h, w))
        gx[:, :, : ho * kernel, : wo * kernel] = gblocks.reshape(n, c, ho * kernel, wo * kernel)
        return (gx,)

    return _record(out, (x,), rule, "maxpool2d")


# -- softmax family -----------------------------------------------------
def _softmax_np(z: np.ndarray, axis: int) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(z: Tensor, axis: int = -1) -> Tensor:
    out = _softmax_np(z.data, axis)

    def rule(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (z,), rule, "softmax")


def log_softmax(z: Tensor, axis: int = -1) -> Tensor:
    shifted = z.data - z.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    prob = np.exp(out)

    def rule(g):
        return (g - prob * g.sum(axis=axis, keepdims=True),)

    return _record(out, (z,), rule, "log_softmax")


def softmax_jacobian(g: np.ndarray) -> np.ndarray:
    """J[j, i] = d g_j / d z_i for probabilities g = softmax(z)."""
    g = np.asarray(g, dtype=np.float64)
    return np.diag(g) - np.outer(g, g)


# -- reverse sweep ----------------------------------------------------------
class Tape:
    """Topologically ordered record of the operations leading to a root."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, root: Tensor) -> None:
        for node in self.nodes:
            node.grad = None
        root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if not parent.requires_grad or g is None:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
        for node in self.nodes:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)

    def clear(self) -> None:
        for node in self.nodes:
            node._parents = ()
            node._backward = None
        self.nodes = []


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every grad-requiring tensor that ``root`` depends on.

    The recorded graph is released afterwards; a second call on the same root
    only sees the root itself.
    """
    if root.size != 1:
        raise GradientError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise GradientError("backward: root is detached from any grad-requiring input")
    tape = Tape.from_root(root)
    tape.replay(root)
    tape.clear()


def stack_sum(tensors: Iterable[Tensor]) -> Tensor:
    """Sum a sequence of same-shape tensors."""
    items = list(tensors)
    if not items:
        raise ValueError("stack_sum: empty sequence")
    return _builtin_sum(items[1:], items[0])
