"""Lightweight SVD generators: fitting, sampling, memory accounting and storage.

A generator for one (task, class) cell keeps only the truncated left singular
vectors ``u`` of the class data plus the mean and covariance of the truncated
right singular vectors, both scaled by the singular values. Samples are
``u @ z`` with ``z`` drawn from the stored multivariate normal.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .linalg import as_matrix, cholesky_psd, complete_basis, draw_with_factor, truncated_svd

logger = logging.getLogger(__name__)

MAGIC = b"SVDG"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")
_KEY = struct.Struct("<II")


class StoreFormatError(ValueError):
    """A generator store file is malformed."""


@dataclass
class GeneratorRecord:
    task: int
    label: int
    u: np.ndarray  # (P, r)
    mean: np.ndarray  # (r,)
    cov: np.ndarray  # (r, r)

    @property
    def rank(self) -> int:
        return self.u.shape[1]

    @property
    def num_pixels(self) -> int:
        return self.u.shape[0]

    @property
    def stored_entries(self) -> int:
        p, r = self.u.shape
        return p * r + r * r + r

    def same_as(self, other: "GeneratorRecord") -> bool:
        """Bit-exact equality of every field."""
        return (
            self.task == other.task
            and self.label == other.label
            and all(
                a.shape == b.shape and a.tobytes() == b.tobytes()
                for a, b in ((self.u, other.u), (self.mean, other.mean), (self.cov, other.cov))
            )
        )


@dataclass
class GeneratorStore:
    """All generator records of a run, keyed by ``(task, class)``."""

    rank: int
    num_pixels: int
    records: dict = field(default_factory=dict)
    _factors: dict = field(default_factory=dict, repr=False, compare=False)
    _stacked: tuple | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, key) -> bool:
        return tuple(key) in self.records

    def __getitem__(self, key) -> GeneratorRecord:
        try:
            return self.records[tuple(key)]
        except KeyError:
            task, label = key
            raise KeyError(f"no generator for task {task}, class {label}") from None

    def keys(self):
        return sorted(self.records)

    def insert(self, record: GeneratorRecord) -> None:
        if record.u.shape != (self.num_pixels, self.rank):
            raise ValueError(
                f"record u has shape {record.u.shape}, store expects {(self.num_pixels, self.rank)}"
            )
        key = (int(record.task), int(record.label))
        self.records[key] = record
        self._factors.pop(key, None)
        self._stacked = None

    def factor(self, key) -> np.ndarray:
        key = tuple(key)
        if key not in self._factors:
            self._factors[key] = cholesky_psd(self[key].cov)
        return self._factors[key]

    def stored_entries(self) -> int:
        return len(self.records) * (self.num_pixels * self.rank + self.rank**2 + self.rank)

    def nbytes(self) -> int:
        """Size of the serialized store in bytes."""
        return _HEADER.size + len(self.records) * _KEY.size + 8 * self.stored_entries()

    def same_as(self, other: "GeneratorStore") -> bool:
        return (
            self.rank == other.rank
            and self.num_pixels == other.num_pixels
            and self.keys() == other.keys()
            and all(self.records[k].same_as(other.records[k]) for k in self.keys())
        )

    def draw(self, task: int, label: int, count: int, rng: np.random.Generator) -> np.ndarray:
        return generate_batch(self, task, label, count, rng)

    def sample_cells(self, tasks, labels, rng: np.random.Generator) -> np.ndarray:
        """One generated sample per ``(tasks[i], labels[i])`` pair, as rows."""
        keys = self.keys()
        if self._stacked is None:
            self._stacked = (
                {k: i for i, k in enumerate(keys)},
                np.stack([self.records[k].u for k in keys]),
                np.stack([self.records[k].mean for k in keys]),
                np.stack([self.factor(k) for k in keys]),
            )
        index, us, means, factors = self._stacked
        try:
            idx = np.array([index[(int(t), int(c))] for t, c in zip(tasks, labels)], dtype=np.intp)
        except KeyError as exc:
            raise KeyError(f"no generator for (task, class) {exc.args[0]}") from None
        z = rng.standard_normal((len(idx), self.rank))
        coeffs = means[idx] + np.einsum("nij,nj->ni", factors[idx], z)
        return np.einsum("npr,nr->np", us[idx], coeffs)


def fit_record(data, task: int, label: int, rank: int) -> GeneratorRecord:
    """Fit the generator of one (task, class) cell from its data columns.

    ``data`` is P x m with one flattened image per column. If the class has
    fewer samples than ``rank`` the fit uses rank ``min(rank, m, P)`` and the
    record is padded with components of zero mean and zero covariance.
    """
    data = as_matrix(data, "data")
    num_pixels, m = data.shape
    if m == 0 or num_pixels == 0:
        raise ValueError("cannot fit a generator to empty data")
    if rank < 1:
        raise ValueError(f"rank must be positive, got {rank}")
    eff = min(rank, m, num_pixels)
    if eff < rank:
        logger.warning(
            "task %s class %s: %d samples, fitting rank %d instead of %d", task, label, m, eff, rank
        )

    f = truncated_svd(data, eff)
    vh = f.vt
    # Shifted two-pass moments: constant rows give exactly zero covariance.
    shift = vh[:, :1]
    dev = vh - shift
    dev_mean = dev.mean(axis=1)
    centred = dev - dev_mean[:, None]
    mean_vh = shift[:, 0] + dev_mean
    cov_vh = (centred @ centred.T) / m

    mean = f.s * mean_vh
    cov = f.s[:, None] * cov_vh * f.s[None, :]
    cov = 0.5 * (cov + cov.T)

    if eff < rank:
        if rank > num_pixels:
            raise ValueError(f"rank {rank} exceeds the number of pixels {num_pixels}")
        u = complete_basis(f.u, rank)
        mean = np.concatenate([mean, np.zeros(rank - eff)])
        padded = np.zeros((rank, rank))
        padded[:eff, :eff] = cov
        cov = padded
    else:
        u = f.u
    return GeneratorRecord(task=int(task), label=int(label), u=u, mean=mean, cov=cov)


def store_generator(data, task: int, label: int, rank: int, store: GeneratorStore) -> GeneratorRecord:
    """Fit a generator for ``(task, label)`` and insert it, replacing any earlier one."""
    record = fit_record(data, task, label, rank)
    store.insert(record)
    return record


def generate_batch(store: GeneratorStore, task: int, label: int, count: int, rng) -> np.ndarray:
    record = store[(task, label)]
    coeffs = draw_with_factor(record.mean, store.factor((task, label)), rng, count)
    return coeffs @ record.u.T


def generate_sample(store: GeneratorStore, task: int, label: int, rng):
    """Return ``(sample, label)`` with ``sample`` a flattened synthetic image."""
    return generate_batch(store, task, label, 1, rng)[0], label


def compression_factor(num_pixels: int, samples: int, classes: int, rank: int) -> float:
    """Raw-sample memory divided by generator memory for one task."""
    for name, value in (("P", num_pixels), ("s", samples), ("c", classes), ("r", rank)):
        if value <= 0:
            raise ValueError(f"{name} must be positive, got {value}")
    return (num_pixels * samples) / (classes * (num_pixels * rank + rank * rank + rank))


def memory_equivalent_samples(samples: int, factor: float) -> int:
    """Raw samples per task that fit in the generator's memory, rounded up."""
    if factor <= 0:
        raise ValueError(f"compression factor must be positive, got {factor}")
    return math.ceil(samples / factor)


def save_store(store: GeneratorStore, path) -> None:
    parts = [_HEADER.pack(MAGIC, VERSION, len(store), store.num_pixels, store.rank)]
    for key in store.keys():
        rec = store.records[key]
        parts.append(_KEY.pack(*key))
        for arr in (rec.u, rec.mean, rec.cov):
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    blob = b"".join(parts)
    if len(blob) != store.nbytes():
        raise AssertionError("serialized size does not match the memory accounting")
    Path(path).write_bytes(blob)


def load_store(path) -> GeneratorStore:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise StoreFormatError(f"{path}: file has {len(blob)} bytes, header needs {_HEADER.size}")
    magic, version, count, num_pixels, rank = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise StoreFormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise StoreFormatError(f"{path}: unsupported version {version} at offset 4")
    per_record = _KEY.size + 8 * (num_pixels * rank + rank * rank + rank)
    store = GeneratorStore(rank=rank, num_pixels=num_pixels)
    offset = _HEADER.size
    for i in range(count):
        if offset + per_record > len(blob):
            raise StoreFormatError(
                f"{path}: record {i} of {count} truncated at offset {offset} "
                f"(needs {per_record} bytes, {len(blob) - offset} left)"
            )
        task, label = _KEY.unpack_from(blob, offset)
        values = np.frombuffer(blob, dtype="<f8", count=per_record // 8 - 1, offset=offset + _KEY.size)
        values = values.astype(np.float64)
        n_u = num_pixels * rank
        u = values[:n_u].reshape(num_pixels, rank)
        mean = values[n_u : n_u + rank]
        cov = values[n_u + rank :].reshape(rank, rank)
        if (task, label) in store:
            raise StoreFormatError(f"{path}: duplicate record ({task}, {label}) at offset {offset}")
        store.insert(GeneratorRecord(task=task, label=label, u=u, mean=mean, cov=cov))
        offset += per_record
    if offset != len(blob):
        raise StoreFormatError(f"{path}: {len(blob) - offset} trailing bytes at offset {offset}")
    return store
