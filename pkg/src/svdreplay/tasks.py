"""Datasets and the task streams built from them.

Images are stored flattened in (height, width, channel) order with values in
[0, 1]. Two protocols turn one labelled dataset into a sequence of ten
domain-incremental tasks: rotation by a fixed list of angles, and class
splitting into pairs whose labels are collapsed to their parity.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import sparse

from .nn import Batch

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
ROTATION_ANGLES = (0, 20, 40, 60, 80, 100, 120, 140, 160, 180)
CLASS_PAIRS = ((0, 1), (2, 3), (4, 5), (6, 7), (8, 9), (0, 3), (2, 5), (4, 7), (6, 9), (8, 1))
DEFAULT_VAL_FRACTION = 1 / 6


class IdxFormatError(ValueError):
    """An IDX file does not follow the expected layout."""


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (n, P) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64
    height: int
    width: int
    channels: int = 1
    num_classes: int = 10

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 2 or labels.shape != (images.shape[0],):
            raise ValueError(f"images {images.shape} and labels {labels.shape} do not match")
        if images.shape[1] != self.height * self.width * self.channels:
            raise ValueError(
                f"{images.shape[1]} pixels per image, expected "
                f"{self.height}x{self.width}x{self.channels}"
            )
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def num_pixels(self) -> int:
        return self.images.shape[1]

    def subset(self, index) -> "Dataset":
        return self.replace(images=self.images[index], labels=self.labels[index])

    def replace(self, **changes) -> "Dataset":
        fields = dict(
            images=self.images,
            labels=self.labels,
            height=self.height,
            width=self.width,
            channels=self.channels,
            num_classes=self.num_classes,
        )
        fields.update(changes)
        return Dataset(**fields)

    def batch(self) -> Batch:
        return Batch(self.images, self.labels)


class Task:
    """One task of a sequence.

    ``train`` is rebuilt on every access so only the task being trained has
    to be resident; ``val`` is built once and cached because every later
    evaluation needs it.
    """

    def __init__(self, task_id: int, make_train: Callable[[], Dataset],
                 make_val: Callable[[], Dataset], description: str = ""):
        self.task_id = task_id
        self._make_train = make_train
        self._make_val = make_val
        self.description = description

    @property
    def train(self) -> Dataset:
        return self._make_train()

    @cached_property
    def val(self) -> Dataset:
        return self._make_val()

    def __repr__(self) -> str:
        return f"Task({self.task_id}, {self.description!r})"


@dataclass
class TaskSequence:
    tasks: list
    num_classes: int
    protocol: str

    def __len__(self) -> int:
        return len(self.tasks)

    def __getitem__(self, i) -> Task:
        return self.tasks[i]

    def __iter__(self):
        return iter(self.tasks)


def _read_header(blob: bytes, path, magic: int, ndims: int):
    need = 4 + 4 * ndims
    if len(blob) < 4:
        raise IdxFormatError(f"{path}: header truncated at offset {len(blob)} (needs {need} bytes)")
    found = struct.unpack_from(">I", blob, 0)[0]
    if found != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{found:08x} at offset 0, expected 0x{magic:08x}")
    if len(blob) < need:
        raise IdxFormatError(f"{path}: header truncated at offset {len(blob)} (needs {need} bytes)")
    dims = struct.unpack_from(f">{ndims}I", blob, 4)
    payload = math.prod(dims)
    if len(blob) != need + payload:
        raise IdxFormatError(
            f"{path}: payload should end at offset {need + payload}, file ends at {len(blob)}"
        )
    return dims, need


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label file pair; pixel bytes are scaled by 1/255."""
    img_blob = Path(images_path).read_bytes()
    lab_blob = Path(labels_path).read_bytes()
    (n, rows, cols), img_off = _read_header(img_blob, images_path, IMAGE_MAGIC, 3)
    (n_labels,), lab_off = _read_header(lab_blob, labels_path, LABEL_MAGIC, 1)
    if n != n_labels:
        raise IdxFormatError(
            f"{images_path} holds {n} images but {labels_path} holds {n_labels} labels (offset 4)"
        )
    pixels = np.frombuffer(img_blob, dtype=np.uint8, offset=img_off).reshape(n, rows * cols)
    labels = np.frombuffer(lab_blob, dtype=np.uint8, offset=lab_off).astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if n else 1
    return Dataset(pixels / 255.0, labels, rows, cols, 1, num_classes)


def save_idx(ds: Dataset, images_path, labels_path) -> None:
    """Write a single-channel dataset as IDX; pixels are rounded to bytes."""
    if ds.channels != 1:
        raise ValueError("IDX output supports single-channel images only")
    pixels = np.clip(np.rint(ds.images * 255.0), 0, 255).astype(np.uint8)
    Path(images_path).write_bytes(
        struct.pack(">IIII", IMAGE_MAGIC, len(ds), ds.height, ds.width) + pixels.tobytes()
    )
    Path(labels_path).write_bytes(
        struct.pack(">II", LABEL_MAGIC, len(ds)) + ds.labels.astype(np.uint8).tobytes()
    )


def rotation_matrix(size: int, degrees: float) -> sparse.csr_matrix:
    """Sparse (size², size²) bilinear interpolation matrix of a clockwise rotation.

    Row ``i`` holds the weights of the source pixels that make output pixel
    ``i``; locations outside the image contribute zero.
    """
    theta = np.deg2rad(degrees)
    cos, sin = np.cos(theta), np.sin(theta)
    centre = (size - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(size) - centre, np.arange(size) - centre, indexing="ij")
    # inverse map: output pixel -> source location (row axis points down)
    src_x = xx * cos + yy * sin + centre
    src_y = -xx * sin + yy * cos + centre
    for coord in (src_x, src_y):
        near = np.rint(coord)
        snap = np.abs(coord - near) < 1e-9
        coord[snap] = near[snap]
    x0 = np.floor(src_x).astype(np.int64).ravel()
    y0 = np.floor(src_y).astype(np.int64).ravel()
    fx = src_x.ravel() - x0
    fy = src_y.ravel() - y0
    out = np.arange(size * size)

    rows, cols, vals = [], [], []
    for dy, dx, w in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                      (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yi, xi = y0 + dy, x0 + dx
        keep = (yi >= 0) & (yi < size) & (xi >= 0) & (xi < size) & (w != 0)
        rows.append(out[keep])
        cols.append(yi[keep] * size + xi[keep])
        vals.append(w[keep])
    n = size * size
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )


def rotate_dataset(ds: Dataset, degrees: float) -> Dataset:
    """Rotate every image clockwise about its centre (bilinear, zero fill)."""
    if ds.height != ds.width:
        raise ValueError(f"rotation needs square images, got {ds.height}x{ds.width}")
    if ds.channels not in (1, 3):
        raise ValueError(f"unsupported channel count {ds.channels}")
    rot = rotation_matrix(ds.height, degrees)
    if ds.channels > 1:
        rot = sparse.kron(rot, sparse.identity(ds.channels), format="csr")
    # (rot @ images.T).T without materializing the transpose twice
    return ds.replace(images=np.ascontiguousarray((rot @ ds.images.T).T))


def split_indices(n: int, val_fraction: float, seed: int):
    """Disjoint sorted (train, val) index arrays covering ``range(n)``."""
    if not 0 < val_fraction < 1:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * val_fraction))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def build_rotation_tasks(ds: Dataset, val_fraction: float = DEFAULT_VAL_FRACTION,
                         split_seed: int = 0, angles=ROTATION_ANGLES) -> TaskSequence:
    """Ten tasks, each the whole dataset rotated by one of ``angles``.

    The train/validation split is drawn once and reused for every angle.
    """
    if ds.num_classes != 10:
        raise ValueError(f"rotation protocol expects 10 classes, got {ds.num_classes}")
    train_idx, val_idx = split_indices(len(ds), val_fraction, split_seed)
    train, val = ds.subset(train_idx), ds.subset(val_idx)

    def maker(part, angle):
        return lambda: part if angle == 0 else rotate_dataset(part, angle)

    tasks = [
        Task(k, maker(train, a), maker(val, a), f"rotated {a} degrees")
        for k, a in enumerate(angles)
    ]
    return TaskSequence(tasks, num_classes=10, protocol="rotation")


def build_class_split_tasks(ds: Dataset, val_fraction: float = DEFAULT_VAL_FRACTION,
                            split_seed: int = 0, pairs=CLASS_PAIRS) -> TaskSequence:
    """Ten two-class tasks; labels become 0 for even and 1 for odd classes."""
    if ds.num_classes != 10:
        raise ValueError(f"class-split protocol expects 10 classes, got {ds.num_classes}")
    counts = np.bincount(ds.labels, minlength=10)
    if np.any(counts == 0):
        raise ValueError(f"classes {np.flatnonzero(counts == 0).tolist()} have no samples")
    train_idx, val_idx = split_indices(len(ds), val_fraction, split_seed)

    def maker(index, pair):
        def build():
            part = ds.subset(index[np.isin(ds.labels[index], pair)])
            return part.replace(labels=part.labels % 2, num_classes=2)
        return build

    tasks = [
        Task(k, maker(train_idx, pair), maker(val_idx, pair), f"classes {pair[0]} and {pair[1]}")
        for k, pair in enumerate(pairs)
    ]
    return TaskSequence(tasks, num_classes=2, protocol="class_split")


def synthetic_dataset(seed: int, n: int, num_pixels: int, num_classes: int,
                      spread: float = 0.05) -> Dataset:
    """Gaussian blobs around random class centres in [0.2, 0.8]^P, clipped to [0, 1].

    Labels cycle through the classes before shuffling, so class sizes differ
    by at most one. Square pixel counts give square single-channel images.
    """
    rng = np.random.default_rng(seed)
    centres = rng.uniform(0.2, 0.8, size=(num_classes, num_pixels))
    labels = rng.permutation(np.arange(n) % num_classes)
    images = np.clip(centres[labels] + spread * rng.standard_normal((n, num_pixels)), 0.0, 1.0)
    side = math.isqrt(num_pixels)
    h, w = (side, side) if side * side == num_pixels else (1, num_pixels)
    return Dataset(images, labels, h, w, 1, num_classes)
