"""Datasets: IDX (MNIST container) loading, npz storage and synthetic shapes."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class DatasetError(ValueError):
    """Malformed dataset file or inconsistent dataset contents."""


@dataclass
class LabeledDataset:
    """images: (N, C, H, W) floats in [0, 1]; labels: (N,) ints.

    ``boxes`` optionally records one ground-truth problematic region per
    image as (row, col, height, width); rows of -1 mean no region.
    """

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    boxes: np.ndarray | None = None
    num_classes: int | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) == 0:
            raise DatasetError("dataset is empty")
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.min() < 0 or self.images.max() > 1:
            raise DatasetError("pixel values must lie in [0, 1]")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DatasetError("label out of range")
        if self.boxes is not None:
            self.boxes = np.asarray(self.boxes, dtype=np.int64).reshape(len(self.images), 4)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index)
        boxes = None if self.boxes is None else self.boxes[index]
        return LabeledDataset(self.images[index], self.labels[index], self.split, boxes, self.num_classes)


# -- IDX ----------------------------------------------------------------------


def _read_idx(blob: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise DatasetError(f"truncated IDX {what} header")
    got = struct.unpack(">I", blob[:4])[0]
    if got != magic:
        raise DatasetError(f"bad IDX magic 0x{got:08x} for {what}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    count = int(np.prod(dims))
    if len(blob) != header + count:
        raise DatasetError(f"IDX {what} payload has {len(blob) - header} bytes, expected {count}")
    return np.frombuffer(blob, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path: str | Path, labels_path: str | Path, split: str = "train") -> LabeledDataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    images = _read_idx(Path(images_path).read_bytes(), IDX_IMAGES, 3, "images")
    labels = _read_idx(Path(labels_path).read_bytes(), IDX_LABELS, 1, "labels")
    if len(images) != len(labels):
        raise DatasetError(f"IDX image count {len(images)} does not match label count {len(labels)}")
    return LabeledDataset(images[:, None].astype(np.float64) / 255.0, labels.astype(np.int64), split)


def write_idx(images_u8: np.ndarray, labels: np.ndarray, images_path: str | Path, labels_path: str | Path) -> None:
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    n, h, w = images_u8.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES, n, h, w) + images_u8.tobytes())
    lab = np.asarray(labels, dtype=np.uint8)
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS, len(lab)) + lab.tobytes())


# -- npz ------------------------------------------------------------------------

NPZ_VERSION = 1


def save_dataset(ds: LabeledDataset, path: str | Path) -> None:
    path = Path(path)
    extra = {} if ds.boxes is None else {"boxes": ds.boxes}
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, images=ds.images, labels=ds.labels, split=np.array(ds.split),
             num_classes=np.array(ds.num_classes), version=np.array(NPZ_VERSION), **extra)
    tmp.replace(path)


def load_dataset(path: str | Path) -> LabeledDataset:
    with np.load(path) as z:
        version = int(z["version"]) if "version" in z else -1
        if version != NPZ_VERSION:
            raise DatasetError(f"{path}: unsupported dataset version {version}")
        boxes = z["boxes"] if "boxes" in z else None
        return LabeledDataset(z["images"], z["labels"], str(z["split"]), boxes, int(z["num_classes"]))


# -- synthetic shapes ---------------------------------------------------------

SHAPES = ("hbar", "vbar", "square", "cross", "diag", "disc")


@dataclass
class SyntheticSpec:
    """Recipe for a K-class shape dataset.

    With ``occluder > 0`` every image gets a bright ``occluder`` x ``occluder``
    square at a random position away from the border; its box is recorded.
    """

    n: int = 400
    classes: int = 4
    size: int = 16
    noise: float = 0.05
    occluder: int = 0
    occluder_value: float = 1.0
    split: str = "train"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 2 <= self.classes <= len(SHAPES):
            raise ValueError(f"classes must be in [2, {len(SHAPES)}]")
        if self.n < 1 or self.size < 8:
            raise ValueError("need n >= 1 and size >= 8")


def _render(shape: str, size: int, rng: np.random.Generator) -> np.ndarray:
    img = np.zeros((size, size))
    c = size // 2
    r0 = c + rng.integers(-2, 3)
    c0 = c + rng.integers(-2, 3)
    half = int(rng.integers(size // 4, size // 3 + 1))
    thick = int(rng.integers(1, 3))
    val = rng.uniform(0.7, 1.0)
    lo_r, hi_r = max(r0 - half, 0), min(r0 + half, size - 1)
    lo_c, hi_c = max(c0 - half, 0), min(c0 + half, size - 1)
    if shape == "hbar":
        img[r0 : r0 + thick, lo_c : hi_c + 1] = val
    elif shape == "vbar":
        img[lo_r : hi_r + 1, c0 : c0 + thick] = val
    elif shape == "square":
        img[lo_r : hi_r + 1, lo_c : lo_c + thick] = val
        img[lo_r : hi_r + 1, hi_c - thick + 1 : hi_c + 1] = val
        img[lo_r : lo_r + thick, lo_c : hi_c + 1] = val
        img[hi_r - thick + 1 : hi_r + 1, lo_c : hi_c + 1] = val
    elif shape == "cross":
        img[r0 : r0 + thick, lo_c : hi_c + 1] = val
        img[lo_r : hi_r + 1, c0 : c0 + thick] = val
    elif shape == "diag":
        for k in range(-half, half + 1):
            r, q = r0 + k, c0 + k
            if 0 <= r < size:
                img[r, max(q, 0) : min(q + thick, size)] = val
    elif shape == "disc":
        yy, xx = np.mgrid[:size, :size]
        img[(yy - r0) ** 2 + (xx - c0) ** 2 <= (0.7 * half) ** 2] = val
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return img


def gen_synthetic(spec: SyntheticSpec, seed: int) -> LabeledDataset:
    """Deterministic, class-balanced (counts differ by at most one) shape images."""
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(spec.n) % spec.classes)
    s = spec.size
    images = np.empty((spec.n, 1, s, s))
    boxes = np.full((spec.n, 4), -1, dtype=np.int64) if spec.occluder > 0 else None
    for k, y in enumerate(labels):
        img = _render(SHAPES[y], s, rng)
        img = img + spec.noise * rng.standard_normal((s, s))
        if spec.occluder > 0:
            o = spec.occluder
            r = int(rng.integers(2, s - o - 1))
            c = int(rng.integers(2, s - o - 1))
            img[r : r + o, c : c + o] = spec.occluder_value
            boxes[k] = (r, c, o, o)
        images[k, 0] = np.clip(img, 0.0, 1.0)
    return LabeledDataset(images, labels, spec.split, boxes, spec.classes)
