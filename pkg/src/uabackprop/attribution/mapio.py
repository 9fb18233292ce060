"""Attribution map files: float32 grid + JSON sidecar, and PGM heatmaps."""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .types import AttributionMap

GRID_MAGIC = b"UAMAP\x00"
GRID_MAJOR = 1
GRID_MINOR = 0
_GRID_PREFIX = struct.Struct("<6sHHII")


class MapFormatError(ValueError):
    """Malformed or incompatible map file."""


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_map(amap: AttributionMap, path: str | Path, *, attention: bool = False, alpha: float | None = None,
             config_hash: str | None = None) -> Path:
    """Write ``<path>`` (grid) and ``<path>.json`` (sidecar); returns the sidecar path."""
    path = Path(path)
    h, w = amap.shape
    blob = _GRID_PREFIX.pack(GRID_MAGIC, GRID_MAJOR, GRID_MINOR, h, w)
    blob += np.ascontiguousarray(amap.values, dtype="<f4").tobytes()
    _atomic_write(path, blob)
    sidecar = {
        "format": f"{GRID_MAJOR}.{GRID_MINOR}",
        "method": amap.method,
        "kind": amap.kind,
        "uncertainty": amap.total_uncertainty,
        "config_hash": config_hash,
        "attention": attention,
        "alpha": alpha,
        "shape": [h, w],
    }
    side = path.with_name(path.name + ".json")
    _atomic_write(side, (json.dumps(sidecar, sort_keys=True, indent=1) + "\n").encode())
    return side


def load_map(path: str | Path) -> tuple[AttributionMap, dict]:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _GRID_PREFIX.size:
        raise MapFormatError(f"{path}: truncated map header")
    magic, major, minor, h, w = _GRID_PREFIX.unpack_from(blob)
    if magic != GRID_MAGIC:
        raise MapFormatError(f"{path}: bad magic {magic!r}")
    if major != GRID_MAJOR:
        raise MapFormatError(f"{path}: unsupported map format version {major}.{minor}")
    if len(blob) != _GRID_PREFIX.size + 4 * h * w:
        raise MapFormatError(f"{path}: payload size does not match {h}x{w}")
    values = np.frombuffer(blob, dtype="<f4", offset=_GRID_PREFIX.size).reshape(h, w).astype(np.float64)
    side_path = path.with_name(path.name + ".json")
    meta = json.loads(side_path.read_text()) if side_path.exists() else {}
    amap = AttributionMap(values, meta.get("kind", "epistemic"), meta.get("method", "unknown"), meta.get("uncertainty"))
    return amap, meta


def heatmap_u8(values: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255; brighter means higher attribution."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.round(255.0 * (v - lo) / (hi - lo)).astype(np.uint8)


def write_pgm(values: np.ndarray, path: str | Path) -> None:
    img = heatmap_u8(values)
    h, w = img.shape
    _atomic_write(Path(path), f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise MapFormatError(f"{path}: not a binary PGM")
    w, h = (int(t) for t in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
