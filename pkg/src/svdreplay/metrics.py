"""Evaluation metrics, significance testing and run-record files."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import astuple, dataclass, fields
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.special import betainc

from .nn import predict


@dataclass(frozen=True)
class RunRecord:
    run_id: str
    method: str
    dataset: str
    protocol: str
    architecture: str
    seed: int
    task_index: int
    epoch: int
    avg_val_acc: float
    per_task_acc: tuple
    wall_ms: float


FIELDS = tuple(f.name for f in fields(RunRecord))
_INTS = ("seed", "task_index", "epoch")
_REALS = ("avg_val_acc", "wall_ms")


def correct_count(params, dataset) -> int:
    if len(dataset) == 0:
        raise ValueError("empty validation set")
    return int(np.count_nonzero(predict(params, dataset.images) == dataset.labels))


def accuracy(params, dataset) -> float:
    return correct_count(params, dataset) / len(dataset)


def avg_validation_accuracy(params, validation_sets):
    """Mean accuracy over the validation sets of every task seen so far.

    Returns ``(A, per_task)``; the mean divides by the number of sets and is
    computed exactly over the hit counts before rounding once.
    """
    if len(validation_sets) == 0:
        raise ValueError("need at least one validation set")
    fractions = [Fraction(correct_count(params, ds), len(ds)) for ds in validation_sets]
    return float(sum(fractions) / len(fractions)), [float(f) for f in fractions]


def table_cell(records):
    """Mean and sample std across seeds of each seed's trace-averaged accuracy."""
    by_seed = {}
    for rec in records:
        by_seed.setdefault(rec.seed, []).append(rec.avg_val_acc)
    if not by_seed:
        raise ValueError("no records")
    lengths = {len(v) for v in by_seed.values()}
    if len(lengths) != 1:
        raise ValueError(f"seeds have traces of different lengths: {sorted(lengths)}")
    means = np.array([math.fsum(v) / len(v) for _, v in sorted(by_seed.items())])
    std = float(np.std(means, ddof=1)) if len(means) > 1 else 0.0
    return float(means.mean()), std


def seed_means(records) -> list:
    """Per-seed trace averages, ordered by seed."""
    by_seed = {}
    for rec in records:
        by_seed.setdefault(rec.seed, []).append(rec.avg_val_acc)
    return [math.fsum(v) / len(v) for _, v in sorted(by_seed.items())]


def welch_t_test(a, b) -> float:
    """Two-sided p-value of Welch's unequal-variance t-test."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least two values")
    va = a.var(ddof=1) / a.size
    vb = b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0.0:
        return 1.0 if diff == 0.0 else 0.0
    t = diff / math.sqrt(se2)
    df = se2**2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def _real(x: float) -> str:
    return format(float(x), ".17g")


def _cells(rec: RunRecord) -> list:
    out = []
    for name, value in zip(FIELDS, astuple(rec)):
        if name in _REALS:
            out.append(_real(value))
        elif name == "per_task_acc":
            out.append(";".join(_real(v) for v in value))
        else:
            out.append(str(value))
    return out


def emit(records, csv_path, json_path) -> None:
    """Write records as CSV (header included) and as a JSON array."""
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FIELDS)
        for rec in records:
            writer.writerow(_cells(rec))

    rows = []
    for rec in records:
        parts = []
        for name, value in zip(FIELDS, astuple(rec)):
            if name in _REALS:
                text = _real(value)
            elif name == "per_task_acc":
                text = "[" + ", ".join(_real(v) for v in value) + "]"
            elif name in _INTS:
                text = str(int(value))
            else:
                text = json.dumps(value)
            parts.append(f"{json.dumps(name)}: {text}")
        rows.append("  {" + ", ".join(parts) + "}")
    body = "[\n" + ",\n".join(rows) + "\n]\n" if rows else "[]\n"
    Path(json_path).write_text(body)


def _parse(row: dict) -> RunRecord:
    values = {}
    for name in FIELDS:
        text = row[name]
        if name in _INTS:
            values[name] = int(text)
        elif name in _REALS:
            values[name] = float(text)
        elif name == "per_task_acc":
            values[name] = tuple(float(v) for v in text.split(";")) if text else ()
        else:
            values[name] = text
    return RunRecord(**values)


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != FIELDS:
            raise ValueError(f"{path}: columns {reader.fieldnames} do not match {list(FIELDS)}")
        return [_parse(row) for row in reader]


def read_json(path) -> list:
    out = []
    for obj in json.loads(Path(path).read_text()):
        obj = dict(obj)
        obj["per_task_acc"] = tuple(obj["per_task_acc"])
        out.append(RunRecord(**obj))
    return out
