"""Training strategies: the SGD baseline plus A-GEM and ER backed by either
raw replay samples or SVD generators.

All five methods run through ``train_task``. The only thing that differs
between a raw and a generator variant is the object passed as ``source``,
which must provide ``sample_cells(tasks, labels, rng)`` and ``in``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .generator import GeneratorStore, store_generator
from .metrics import RunRecord, avg_validation_accuracy
from .nn import Batch, MlpParams, init_params, loss_and_grad, sgd_step
from .tasks import Dataset, TaskSequence

logger = logging.getLogger(__name__)

METHODS = ("sgd", "agem_raw", "agem_gen", "er_raw", "er_gen")
ARCHITECTURE = "mlp"


@dataclass(frozen=True)
class StrategyConfig:
    method: str
    samples_per_task: int | None = None
    rank: int | None = None
    reference_batch_size: int | None = None  # None means batch_size
    learning_rate: float = 0.1
    batch_size: int = 64
    epochs_per_task: int = 1
    seed: int = 0
    hidden_sizes: tuple = (200, 200)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {', '.join(METHODS)}")
        if self.uses_memory and (self.samples_per_task is None or self.samples_per_task < 1):
            raise ValueError(f"method {self.method} needs a positive samples_per_task")
        if self.uses_generator and (self.rank is None or self.rank < 1):
            raise ValueError(f"method {self.method} needs a positive rank")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs_per_task < 1:
            raise ValueError("batch_size and epochs_per_task must be at least 1")
        if self.reference_batch_size is not None and self.reference_batch_size < 0:
            raise ValueError("reference_batch_size must be non-negative")
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))

    @property
    def uses_memory(self) -> bool:
        return self.method != "sgd"

    @property
    def uses_generator(self) -> bool:
        return self.method.endswith("_gen")

    @property
    def family(self) -> str:
        return self.method.split("_")[0]

    @property
    def ref_size(self) -> int:
        return self.batch_size if self.reference_batch_size is None else self.reference_batch_size


@dataclass
class RngStreams:
    """Independent generators so that, e.g., drawing reference batches does
    not shift the minibatch order seen by another method with the same seed."""

    init_seed: int
    order: np.random.Generator
    reference: np.random.Generator
    memory: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "RngStreams":
        init, order, reference, memory = np.random.SeedSequence(seed).spawn(4)
        return cls(
            init_seed=int(init.generate_state(1)[0]),
            order=np.random.default_rng(order),
            reference=np.random.default_rng(reference),
            memory=np.random.default_rng(memory),
        )


@dataclass
class ReplayBuffer:
    """Raw samples kept per (task, class) cell."""

    cells: dict = field(default_factory=dict)
    _stacked: tuple | None = field(default=None, repr=False)

    def __contains__(self, key) -> bool:
        key = tuple(key)
        return key in self.cells and len(self.cells[key]) > 0

    def __len__(self) -> int:
        return len(self.cells)

    def insert(self, task: int, label: int, samples) -> None:
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim != 2:
            raise ValueError(f"samples must be 2-D (count, P), got {samples.shape}")
        self.cells[(int(task), int(label))] = samples
        self._stacked = None

    def keys(self):
        return sorted(self.cells)

    def task_size(self, task: int) -> int:
        return sum(len(v) for (t, _), v in self.cells.items() if t == task)

    def total_size(self) -> int:
        return sum(len(v) for v in self.cells.values())

    def draw(self, task: int, label: int, count: int, rng: np.random.Generator) -> np.ndarray:
        data = self.cells[(task, label)]
        return data[rng.integers(0, len(data), size=count)]

    def sample_cells(self, tasks, labels, rng: np.random.Generator) -> np.ndarray:
        """One stored sample per ``(tasks[i], labels[i])``, drawn with replacement."""
        if self._stacked is None:
            keys = [k for k in self.keys() if k in self]
            sizes = np.array([len(self.cells[k]) for k in keys], dtype=np.int64)
            offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
            self._stacked = (
                {k: i for i, k in enumerate(keys)},
                np.concatenate([self.cells[k] for k in keys]),
                offsets,
                sizes,
            )
        index, data, offsets, sizes = self._stacked
        try:
            cell = np.array([index[(int(t), int(c))] for t, c in zip(tasks, labels)], dtype=np.intp)
        except KeyError as exc:
            raise KeyError(f"no stored samples for (task, class) {exc.args[0]}") from None
        if cell.size == 0:
            return np.empty((0, data.shape[1]))
        return data[offsets[cell] + rng.integers(0, sizes[cell])]


def agem_project(g: np.ndarray, g_ref: np.ndarray) -> np.ndarray:
    """Project ``g`` so it does not conflict with ``g_ref``.

    A non-negative dot product returns ``g`` itself, untouched.
    """
    if g.shape != g_ref.shape:
        raise ValueError(f"gradient shapes differ: {g.shape} vs {g_ref.shape}")
    if float(g @ g_ref) >= 0.0:
        return g
    # rescaling g_ref leaves the projection unchanged and keeps g_ref . g_ref from underflowing
    r = g_ref / np.max(np.abs(g_ref))
    return g - (float(g @ r) / float(r @ r)) * r


def assemble_reference_batch(source, n: int, seen_tasks: int, num_classes: int,
                             rng: np.random.Generator) -> Batch:
    """``n`` samples, each from a uniformly chosen earlier task and class.

    Cells missing from ``source`` get their class redrawn, at most
    ``num_classes`` times, before a LookupError is raised.
    """
    if seen_tasks < 1:
        raise ValueError("a reference batch needs at least one earlier task")
    tasks = rng.integers(0, seen_tasks, size=n)
    labels = rng.integers(0, num_classes, size=n)
    for attempt in range(num_classes + 1):
        missing = np.array([(int(t), int(c)) not in source for t, c in zip(tasks, labels)], dtype=bool)
        if not missing.any():
            break
        if attempt == num_classes:
            t, c = int(tasks[missing][0]), int(labels[missing][0])
            raise LookupError(f"no memory for task {t}, class {c} after {num_classes} redraws")
        labels[missing] = rng.integers(0, num_classes, size=int(missing.sum()))
    inputs = source.sample_cells(tasks, labels, rng)
    return Batch(inputs.reshape(n, -1), labels)


def train_task(params: MlpParams, task_data: Dataset, source, config: StrategyConfig,
               streams: RngStreams, task_index: int, num_classes: int,
               after_epoch: Callable[[MlpParams, int], None] | None = None) -> MlpParams:
    """Train one task for ``config.epochs_per_task`` epochs.

    Memory is consulted only from the second task on and only when the
    reference batch size is positive; otherwise every step is a plain SGD step.
    """
    n = len(task_data)
    if n == 0:
        raise ValueError(f"task {task_index} has no training data")
    replay = config.uses_memory and task_index > 0 and config.ref_size > 0 and source is not None
    b = config.batch_size
    for epoch in range(config.epochs_per_task):
        order = streams.order.permutation(n)
        for start in range(0, n, b):
            idx = order[start : start + b]
            batch = Batch(task_data.images[idx], task_data.labels[idx])
            if not replay:
                _, grad = loss_and_grad(params, batch)
            else:
                ref = assemble_reference_batch(
                    source, config.ref_size, task_index, num_classes, streams.reference
                )
                if config.family == "agem":
                    _, grad = loss_and_grad(params, batch)
                    _, g_ref = loss_and_grad(params, ref)
                    grad = agem_project(grad, g_ref)
                else:
                    _, grad = loss_and_grad(params, Batch.concat(batch, ref))
            params = sgd_step(params, grad, config.learning_rate)
        if after_epoch is not None:
            after_epoch(params, epoch)
    return params


def train_task_agem(params, task_data, source, config, streams, task_index, num_classes,
                    after_epoch=None) -> MlpParams:
    if config.family not in ("agem", "sgd"):
        raise ValueError(f"method {config.method} is not an A-GEM method")
    return train_task(params, task_data, source, config, streams, task_index, num_classes, after_epoch)


def train_task_er(params, task_data, source, config, streams, task_index, num_classes,
                  after_epoch=None) -> MlpParams:
    if config.family not in ("er", "sgd"):
        raise ValueError(f"method {config.method} is not an ER method")
    return train_task(params, task_data, source, config, streams, task_index, num_classes, after_epoch)


def new_source(config: StrategyConfig, num_pixels: int):
    if not config.uses_memory:
        return None
    if config.uses_generator:
        return GeneratorStore(rank=config.rank, num_pixels=num_pixels)
    return ReplayBuffer()


def end_of_task_update(task_data: Dataset, task_index: int, config: StrategyConfig, source,
                       rng: np.random.Generator, num_classes: int):
    """Sample the task's memory and add it to ``source`` (returned for chaining)."""
    if source is None:
        return None
    s = config.samples_per_task
    if s > len(task_data):
        logger.warning("task %d has %d samples, storing all instead of %d",
                       task_index, len(task_data), s)
        s = len(task_data)
    chosen = rng.choice(len(task_data), size=s, replace=False)
    images, labels = task_data.images[chosen], task_data.labels[chosen]
    for label in range(num_classes):
        rows = images[labels == label]
        if len(rows) == 0:
            logger.warning("task %d class %d received no samples; no memory kept", task_index, label)
            continue
        if isinstance(source, GeneratorStore):
            store_generator(rows.T, task_index, label, config.rank, source)
        else:
            source.insert(task_index, label, rows)
    return source


@dataclass
class RunResult:
    records: list
    params: MlpParams
    source: object


def run_sequence(config: StrategyConfig, tasks: TaskSequence, *, run_id: str = "run",
                 dataset: str = "unknown", record_timing: bool = False) -> RunResult:
    """Train every task in order and evaluate after each epoch."""
    if len(tasks) == 0:
        raise ValueError("empty task sequence")
    streams = RngStreams.from_seed(config.seed)
    first_val = tasks[0].val
    dims = (first_val.num_pixels, *config.hidden_sizes, tasks.num_classes)
    params = init_params(streams.init_seed, dims)
    source = new_source(config, first_val.num_pixels)
    records = []
    clock = time.perf_counter()

    for k, task in enumerate(tasks):
        val_sets = [t.val for t in tasks.tasks[: k + 1]]

        def evaluate(p, epoch, k=k, val_sets=val_sets):
            acc, per_task = avg_validation_accuracy(p, val_sets)
            wall = (time.perf_counter() - clock) * 1000.0 if record_timing else 0.0
            records.append(RunRecord(
                run_id=run_id, method=config.method, dataset=dataset, protocol=tasks.protocol,
                architecture=ARCHITECTURE, seed=config.seed, task_index=k, epoch=epoch,
                avg_val_acc=acc, per_task_acc=tuple(per_task), wall_ms=wall,
            ))
            logger.info("%s seed %d task %d epoch %d: A=%.4f", config.method, config.seed, k, epoch, acc)

        train = task.train
        params = train_task(params, train, source, config, streams, k, tasks.num_classes, evaluate)
        source = end_of_task_update(train, k, config, source, streams.memory, tasks.num_classes)
        del train
    return RunResult(records=records, params=params, source=source)
