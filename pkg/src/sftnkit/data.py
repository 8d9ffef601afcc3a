"""Deterministic desk-scale datasets.

``gen_synth_vision`` draws 3x16x16 images of textured, coloured shapes; each
class is a (shape, colour, texture) triple chosen so that no single attribute
identifies the class.  ``load_idx`` reads real IDX image/label pairs and maps
them to the same geometry.
"""
from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .tensor import Tensor

IMAGE_SHAPE = (3, 16, 16)
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SFDS_MAGIC = b"SFDS"
SFDS_VERSION = 1


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if images.ndim != 4 or len(images) != len(labels):
            raise DatasetError(f"images {images.shape} and labels {labels.shape} disagree")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DatasetError(f"labels outside [0, {self.num_classes})")
        if not np.isfinite(images).all():
            raise DatasetError("images contain non-finite values")
        images.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def id(self) -> str:
        h = hashlib.sha256()
        h.update(struct.pack("<I", self.num_classes))
        h.update(struct.pack("<4I", *self.images.shape))
        h.update(self.images.astype("<f4").tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        return h.hexdigest()

    def subset(self, idx, **meta) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, {**self.meta, **meta})

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


# -- procedural generator -------------------------------------------------------

_COLORS = {
    "red": (0.85, 0.2, 0.15),
    "green": (0.2, 0.75, 0.25),
    "blue": (0.2, 0.3, 0.9),
    "yellow": (0.85, 0.8, 0.2),
    "magenta": (0.8, 0.25, 0.8),
    "cyan": (0.2, 0.8, 0.8),
}

# Latin-square style assignment: any two classes sharing one attribute differ in another.
CLASS_TABLES = {
    "primary": [
        ("disk", "red", "solid"), ("disk", "green", "hstripe"), ("disk", "blue", "vstripe"),
        ("square", "red", "hstripe"), ("square", "green", "vstripe"), ("square", "blue", "solid"),
        ("triangle", "red", "vstripe"), ("triangle", "green", "solid"), ("triangle", "blue", "hstripe"),
        ("disk", "red", "hstripe"),
    ],
    "transfer": [
        ("ring", "yellow", "solid"), ("ring", "magenta", "checker"), ("ring", "cyan", "dstripe"),
        ("cross", "yellow", "checker"), ("cross", "magenta", "dstripe"), ("cross", "cyan", "solid"),
        ("diamond", "yellow", "dstripe"), ("diamond", "magenta", "solid"), ("diamond", "cyan", "checker"),
        ("ring", "yellow", "checker"),
    ],
}
_TASK_CODE = {"primary": 1, "transfer": 2}

_YY, _XX = np.mgrid[0:16, 0:16].astype(np.float64) + 0.5


def _shape_mask(kind: str, cx: float, cy: float, r: float, angle: float) -> np.ndarray:
    dx, dy = _XX - cx, _YY - cy
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    if kind == "disk":
        return (u * u + v * v <= r * r).astype(np.float64)
    if kind == "ring":
        d2 = u * u + v * v
        return ((d2 <= r * r) & (d2 >= (0.55 * r) ** 2)).astype(np.float64)
    if kind == "square":
        return (np.maximum(np.abs(u), np.abs(v)) <= 0.8 * r).astype(np.float64)
    if kind == "diamond":
        return (np.abs(u) + np.abs(v) <= 1.1 * r).astype(np.float64)
    if kind == "triangle":
        # upward triangle with apex at -r and base at +0.6r
        inside = (v <= 0.6 * r) & (v >= -r) & (np.abs(u) <= (v + r) * 0.62)
        return inside.astype(np.float64)
    if kind == "cross":
        w = 0.35 * r
        return (((np.abs(u) <= w) | (np.abs(v) <= w)) & (np.maximum(np.abs(u), np.abs(v)) <= r)).astype(np.float64)
    raise ValueError(kind)


def _texture(kind: str, period: float, phase: float) -> np.ndarray:
    if kind == "solid":
        return np.ones((16, 16))
    if kind == "hstripe":
        wave = np.sin(2 * np.pi * _YY / period + phase)
    elif kind == "vstripe":
        wave = np.sin(2 * np.pi * _XX / period + phase)
    elif kind == "dstripe":
        wave = np.sin(2 * np.pi * (_XX + _YY) / (period * 1.4) + phase)
    elif kind == "checker":
        wave = np.sin(2 * np.pi * _XX / period + phase) * np.sin(2 * np.pi * _YY / period + phase)
    else:
        raise ValueError(kind)
    return np.where(wave >= 0, 1.0, 0.3)


def _render(rng: np.random.Generator, shape: str, color: str, texture: str, difficulty: float) -> np.ndarray:
    # background: tinted gray with a random linear gradient
    bg_level = rng.uniform(0.15, 0.55)
    tint = rng.uniform(-0.1, 0.1, size=3)
    gx, gy = rng.uniform(-0.02, 0.02, size=2)
    bg = bg_level + gx * (_XX - 8) + gy * (_YY - 8)
    img = np.stack([bg + t for t in tint])

    # distractor blob of an arbitrary colour
    if rng.random() < 0.7:
        bx, by = rng.uniform(1, 15, size=2)
        br = rng.uniform(1.0, 2.2)
        blob = ((_XX - bx) ** 2 + (_YY - by) ** 2 <= br * br)
        bcol = rng.uniform(0.0, 1.0, size=3)
        img = np.where(blob[None], bcol[:, None, None], img)

    r = rng.uniform(4.0, 6.0)
    cx, cy = 8 + rng.uniform(-2.5, 2.5, size=2)
    angle = rng.uniform(-0.35, 0.35)
    mask = _shape_mask(shape, cx, cy, r, angle)
    tex = _texture(texture, rng.uniform(2.6, 3.6), rng.uniform(0, 2 * np.pi))
    base = np.asarray(_COLORS[color]) + rng.uniform(-0.15, 0.15, size=3) * difficulty
    brightness = rng.uniform(0.7, 1.1)
    fg = base[:, None, None] * tex[None] * brightness
    img = np.where(mask[None] > 0, fg, img)
    img = img + rng.normal(0.0, 0.08 * difficulty, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def gen_synth_vision(task: str = "primary", n: int = 3000, seed: int = 0, difficulty: float = 1.0) -> Dataset:
    """Procedural 10-class images; labels are assigned round-robin so classes stay balanced."""
    if task not in CLASS_TABLES:
        raise ValueError(f"unknown task {task!r}; expected one of {sorted(CLASS_TABLES)}")
    table = CLASS_TABLES[task]
    k = len(table)
    if n < k:
        raise ValueError(f"n must be at least the class count {k}, got {n}")
    rng = np.random.default_rng([int(seed), _TASK_CODE[task]])
    labels = np.arange(n) % k
    images = np.empty((n, *IMAGE_SHAPE), dtype=np.float32)
    for i, y in enumerate(labels):
        images[i] = _render(rng, *table[y], difficulty)
    meta = {"generator": "synth-vision", "task": task, "n": n, "seed": int(seed), "difficulty": difficulty}
    return Dataset(images, labels, k, meta)


def split_train_test(ds: Dataset, test_fraction: float = 1 / 6) -> tuple[Dataset, Dataset]:
    """Stratified split: the trailing ``test_fraction`` of each class goes to test (5:1 by default)."""
    train_idx, test_idx = [], []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        n_test = int(round(len(idx) * test_fraction))
        train_idx.append(idx[: len(idx) - n_test])
        test_idx.append(idx[len(idx) - n_test:])
    tr, te = np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(test_idx))
    parent = ds.id
    return ds.subset(tr, split="train", parent=parent), ds.subset(te, split="test", parent=parent)


# -- batching --------------------------------------------------------------------

def batch_indices(n: int, batch_size: int, shuffle_seed: int, epoch: int) -> list[np.ndarray]:
    """Permutation of ``range(n)`` that depends only on (seed, epoch), cut into batches."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    perm = np.random.default_rng([int(shuffle_seed), int(epoch), 0x5F7]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def batches(ds: Dataset, batch_size: int, shuffle_seed: int, epoch: int,
            dtype=np.float32) -> Iterator[tuple[Tensor, np.ndarray]]:
    for idx in batch_indices(len(ds), batch_size, shuffle_seed, epoch):
        yield Tensor(ds.images[idx].astype(dtype, copy=False)), ds.labels[idx]


def iterate(ds: Dataset, batch_size: int = 500, dtype=np.float32) -> Iterator[tuple[Tensor, np.ndarray]]:
    """Sequential, unshuffled minibatches for evaluation."""
    for i in range(0, len(ds), batch_size):
        yield Tensor(ds.images[i:i + batch_size].astype(dtype, copy=False)), ds.labels[i:i + batch_size]


# -- IDX ------------------------------------------------------------------------------

def _bilinear_matrix(src: int, dst: int) -> np.ndarray:
    """Row-stochastic interpolation matrix with half-pixel centres (edge-clamped)."""
    m = np.zeros((dst, src))
    scale = src / dst
    for i in range(dst):
        x = (i + 0.5) * scale - 0.5
        x = min(max(x, 0.0), src - 1)
        lo = int(np.floor(x))
        hi = min(lo + 1, src - 1)
        t = x - lo
        m[i, lo] += 1.0 - t
        m[i, hi] += t
    return m


def resize_bilinear(images: np.ndarray, size: int = 16) -> np.ndarray:
    """Resize (n, H, W) grayscale arrays to (n, size, size)."""
    rows = _bilinear_matrix(images.shape[1], size)
    cols = _bilinear_matrix(images.shape[2], size)
    return np.einsum("ih,nhw,jw->nij", rows, images, cols)


def _read_idx(path, expected_magic: int, what: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise DatasetError(f"{what} file {path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DatasetError(f"{what} file {path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetError(f"{what} file {path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    payload = raw[header:]
    if len(payload) < count:
        raise DatasetError(f"{what} file {path}: truncated payload ({len(payload)} of {count} bytes)")
    return np.frombuffer(payload[:count], dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10, size: int = 16) -> Dataset:
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, "images")
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, "labels")
    if len(images) == 0 or len(labels) == 0:
        raise DatasetError("IDX files declare an empty dataset")
    if len(images) != len(labels):
        raise DatasetError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    gray = resize_bilinear(images.astype(np.float64) / 255.0, size)
    rgb = np.repeat(gray[:, None], 3, axis=1)
    meta = {"generator": "idx", "images": os.fspath(images_path), "labels": os.fspath(labels_path)}
    return Dataset(rgb.astype(np.float32), labels.astype(np.int64), num_classes, meta)


# -- SFDS export -------------------------------------------------------------------------

def save_sfds(ds: Dataset, path) -> None:
    """Self-describing binary: magic, version, n, K, C, H, W, int32 labels, float32 images."""
    n, c, h, w = ds.images.shape
    with open(path, "wb") as f:
        f.write(SFDS_MAGIC)
        f.write(struct.pack("<6I", SFDS_VERSION, n, ds.num_classes, c, h, w))
        f.write(ds.labels.astype("<i4").tobytes())
        f.write(ds.images.astype("<f4").tobytes())


def load_sfds(path) -> Dataset:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != SFDS_MAGIC:
        raise DatasetError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 28:
        raise DatasetError(f"{path}: truncated header")
    version, n, k, c, h, w = struct.unpack("<6I", raw[4:28])
    if version != SFDS_VERSION:
        raise DatasetError(f"{path}: unsupported version {version}")
    need = 28 + 4 * n + 4 * n * c * h * w
    if len(raw) != need:
        raise DatasetError(f"{path}: expected {need} bytes, found {len(raw)}")
    labels = np.frombuffer(raw[28:28 + 4 * n], dtype="<i4").astype(np.int64)
    images = np.frombuffer(raw[28 + 4 * n:], dtype="<f4").reshape(n, c, h, w)
    return Dataset(images, labels, k, {"generator": "sfds", "path": os.fspath(path)})
