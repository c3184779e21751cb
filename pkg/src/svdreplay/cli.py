"""Command line entry point: run experiments, compare runs, dump generator images."""

from __future__ import annotations

import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import click
import numpy as np
import yaml

from .generator import load_store, save_store
from .metrics import emit, read_csv, seed_means, table_cell, welch_t_test
from .nn import save_params
from .strategies import StrategyConfig, run_sequence
from .tasks import (
    DEFAULT_VAL_FRACTION,
    build_class_split_tasks,
    build_rotation_tasks,
    load_idx,
    synthetic_dataset,
)

logger = logging.getLogger(__name__)

DATA_ENV = "SVDREPLAY_DATA"
PROTOCOLS = ("rotation", "class_split")
KNOWN_DATASETS = {
    "mnist": ("mnist/train-images-idx3-ubyte", "mnist/train-labels-idx1-ubyte"),
    "fashion": ("fashion/train-images-idx3-ubyte", "fashion/train-labels-idx1-ubyte"),
}
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


class ConfigError(ValueError):
    """The experiment configuration is invalid."""


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str
    protocol: str
    method: str
    output_dir: str
    images: str | None = None
    labels: str | None = None
    samples_per_task: int | None = None
    rank: int | None = None
    reference_batch_size: int | None = None
    learning_rate: float = 0.1
    batch_size: int = 64
    epochs_per_task: int = 1
    seeds: tuple = (0,)
    val_fraction: float = DEFAULT_VAL_FRACTION
    split_seed: int = 0
    hidden_sizes: tuple = (200, 200)
    limit: int | None = None
    synthetic_n: int = 600
    synthetic_pixels: int = 64
    synthetic_classes: int = 10
    record_timing: bool = False

    def strategy(self, seed: int) -> StrategyConfig:
        return StrategyConfig(
            method=self.method,
            samples_per_task=self.samples_per_task,
            rank=self.rank,
            reference_batch_size=self.reference_batch_size,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs_per_task=self.epochs_per_task,
            seed=seed,
            hidden_sizes=self.hidden_sizes,
        )

    def to_mapping(self) -> dict:
        out = asdict(self)
        out["seeds"] = list(self.seeds)
        out["hidden_sizes"] = list(self.hidden_sizes)
        return out

    @property
    def label(self) -> str:
        return method_label(self.method, self.samples_per_task)


_REQUIRED = ("dataset", "protocol", "method", "output_dir")
_INT_KEYS = ("samples_per_task", "rank", "reference_batch_size", "batch_size", "epochs_per_task",
             "split_seed", "limit", "synthetic_n", "synthetic_pixels", "synthetic_classes")
_STR_KEYS = ("dataset", "protocol", "method", "output_dir", "images", "labels")
_REAL_KEYS = ("learning_rate", "val_fraction")


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def parse_config(raw) -> ExperimentConfig:
    """Validate a mapping (usually parsed YAML) into an ExperimentConfig."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping of keys to values")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(map(str, unknown))}")
    missing = [k for k in _REQUIRED if raw.get(k) is None]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")

    values = dict(raw)
    for key, v in raw.items():
        if v is None:
            continue
        if key in _INT_KEYS and not _is_int(v):
            raise ConfigError(f"{key} must be an integer, got {v!r}")
        if key in _STR_KEYS and not isinstance(v, str):
            raise ConfigError(f"{key} must be a string, got {v!r}")
        if key in _REAL_KEYS:
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                raise ConfigError(f"{key} must be a number, got {v!r}")
            values[key] = float(v)
        if key == "record_timing" and not isinstance(v, bool):
            raise ConfigError(f"record_timing must be true or false, got {v!r}")
        if key in ("seeds", "hidden_sizes"):
            if not isinstance(v, list) or not v or not all(_is_int(x) for x in v):
                raise ConfigError(f"{key} must be a non-empty list of integers")
            values[key] = tuple(v)

    if values["protocol"] not in PROTOCOLS:
        raise ConfigError(f"protocol must be one of {', '.join(PROTOCOLS)}")
    if len(set(values.get("seeds", (0,)))) != len(values.get("seeds", (0,))):
        raise ConfigError("seeds must be distinct")
    if "val_fraction" in values and not 0 < values["val_fraction"] < 1:
        raise ConfigError("val_fraction must lie strictly between 0 and 1")
    if values.get("limit") is not None and values["limit"] < 2:
        raise ConfigError("limit must be at least 2")
    if values["dataset"] != "synthetic" and values["dataset"] not in KNOWN_DATASETS:
        if not (values.get("images") and values.get("labels")):
            raise ConfigError(
                f"dataset {values['dataset']!r} needs explicit images and labels paths"
            )
    cfg = ExperimentConfig(**values)
    try:
        cfg.strategy(cfg.seeds[0])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    return parse_config(raw)


def data_root() -> Path:
    return Path(os.environ.get(DATA_ENV, "."))


def dataset_paths(cfg: ExperimentConfig):
    if cfg.dataset == "synthetic":
        return None
    images, labels = cfg.images, cfg.labels
    if images is None or labels is None:
        images, labels = KNOWN_DATASETS[cfg.dataset]
    root = data_root()
    return tuple(p if Path(p).is_absolute() else root / p for p in (Path(images), Path(labels)))


def load_dataset(cfg: ExperimentConfig):
    paths = dataset_paths(cfg)
    if paths is None:
        ds = synthetic_dataset(cfg.split_seed, cfg.synthetic_n, cfg.synthetic_pixels,
                               cfg.synthetic_classes)
    else:
        ds = load_idx(*paths, num_classes=10)
    if cfg.limit is not None:
        ds = ds.subset(slice(0, cfg.limit))
    return ds


def build_tasks(cfg: ExperimentConfig, ds):
    build = build_rotation_tasks if cfg.protocol == "rotation" else build_class_split_tasks
    return build(ds, val_fraction=cfg.val_fraction, split_seed=cfg.split_seed)


def method_label(method: str, samples: int | None) -> str:
    family, _, kind = method.partition("_")
    name = {"sgd": "SGD", "agem": "A-GEM", "er": "ER"}[family]
    if kind == "gen":
        return f"{name} gen"
    if kind == "raw":
        return f"{name} {samples}"
    return name


def write_summary(path, cfg: ExperimentConfig, records) -> tuple:
    mean, std = table_cell(records)
    per_seed = ";".join(format(m, ".17g") for m in seed_means(records))
    Path(path).write_text(
        "label,method,dataset,protocol,seeds,mean,std,seed_means\n"
        f"{cfg.label},{cfg.method},{cfg.dataset},{cfg.protocol},{len(cfg.seeds)},"
        f"{mean:.17g},{std:.17g},{per_seed}\n"
    )
    return mean, std


def execute(cfg: ExperimentConfig) -> tuple:
    """Run every seed of ``cfg`` and write all outputs; returns (mean, std)."""
    ds = load_dataset(cfg)
    tasks = build_tasks(cfg, ds)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_mapping(), sort_keys=True))
    records = []
    for seed in cfg.seeds:
        result = run_sequence(cfg.strategy(seed), tasks, run_id=f"{cfg.method}-seed{seed}",
                              dataset=cfg.dataset, record_timing=cfg.record_timing)
        records.extend(result.records)
        emit(records, out / "trace.csv", out / "trace.json")
        save_params(result.params, out / f"params_seed{seed}.mlpw")
        if cfg.method.endswith("_gen"):
            save_store(result.source, out / f"store_seed{seed}.svdg")
    return write_summary(out / "summary.csv", cfg, records)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool):
    """Continual learning with SVD generator replay."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.argument("config_path", type=click.Path(dir_okay=False))
def run(config_path):
    """Run the experiment described by CONFIG_PATH (YAML)."""
    try:
        cfg = load_config(config_path)
        paths = dataset_paths(cfg)
        if paths is not None:
            for p in paths:
                if not p.is_file():
                    raise ConfigError(f"dataset file not found: {p} (set {DATA_ENV})")
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    try:
        mean, std = execute(cfg)
    except Exception as exc:  # noqa: BLE001 - every failure maps to exit code 1
        logger.debug("run failed", exc_info=True)
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        sys.exit(EXIT_RUNTIME)
    click.echo(f"{cfg.label} {cfg.dataset} {cfg.protocol}: {mean:.3f} ± {std:.3f}")


@dataclass
class CompareRow:
    label: str
    directory: str
    mean: float
    std: float
    values: list
    reference: bool = False
    bold: bool = False


def _load_run(directory, reference: bool) -> tuple:
    directory = Path(directory)
    cfg = load_config(directory / "config.yaml")
    records = read_csv(directory / "trace.csv")
    if not records:
        raise ValueError(f"{directory}: empty trace")
    mean, std = table_cell(records)
    row = CompareRow(cfg.label, str(directory), mean, std, seed_means(records), reference)
    return cfg, row


def _p_value(a, b) -> float:
    if len(a) < 2 or len(b) < 2:
        return 1.0 if np.mean(a) == np.mean(b) else 0.0
    return welch_t_test(a, b)


def compare_runs(dirs, reference_dirs=(), alpha: float = 0.01) -> list:
    """Rows for every run; the best non-reference run and every run not
    significantly below it (Welch p >= alpha) are marked bold."""
    loaded = [_load_run(d, False) for d in dirs] + [_load_run(d, True) for d in reference_dirs]
    if len(loaded) < 2:
        raise ValueError("need at least two runs to compare")
    settings = {(c.dataset, c.protocol) for c, _ in loaded}
    if len(settings) != 1:
        raise ValueError(f"runs mix datasets/protocols: {sorted(settings)}")
    rows = [r for _, r in loaded]
    candidates = [r for r in rows if not r.reference]
    if candidates:
        best = max(candidates, key=lambda r: r.mean)
        for r in candidates:
            r.bold = r is best or _p_value(best.values, r.values) >= alpha
    return rows


def format_table(rows) -> str:
    width = max(len(r.label) for r in rows)
    lines = []
    for r in rows:
        cell = f"{r.mean:.3f} ± {r.std:.3f}"
        if r.bold:
            cell = f"**{cell}**"
        elif r.reference:
            cell = f"({cell})"
        lines.append(f"{r.label:<{width}}  {cell}")
    return "\n".join(lines)


@main.command()
@click.argument("dirs", nargs=-1, type=click.Path(file_okay=False, exists=True))
@click.option("--reference", "reference_dirs", multiple=True,
              type=click.Path(file_okay=False, exists=True),
              help="Upper-bound run shown in parentheses and never marked.")
@click.option("--alpha", default=0.01, show_default=True, help="Welch t-test threshold.")
def compare(dirs, reference_dirs, alpha):
    """Tabulate completed runs and mark the significantly best ones in bold."""
    try:
        rows = compare_runs(dirs, reference_dirs, alpha)
    except (ValueError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_RUNTIME)
    click.echo(format_table(rows))


def image_shape(num_pixels: int, channels: int | None = None) -> tuple:
    options = (channels,) if channels else (1, 3)
    for c in options:
        if c not in (1, 3):
            raise ValueError(f"unsupported channel count {c}")
        side = math.isqrt(num_pixels // c)
        if num_pixels % c == 0 and side * side * c == num_pixels:
            return side, side, c
    raise ValueError(f"{num_pixels} pixels do not form a square grayscale or RGB image")


def _to_bytes(tile: np.ndarray) -> np.ndarray:
    lo, hi = tile.min(), tile.max()
    if hi <= lo:
        return np.zeros(tile.shape, dtype=np.uint8)
    return np.rint((tile - lo) * (255.0 / (hi - lo))).astype(np.uint8)


def render_grid(components: np.ndarray, samples: np.ndarray, shape: tuple) -> np.ndarray:
    """Two rows of tiles (components, then samples), each min-max scaled."""
    h, w, c = shape
    cols = max(len(components), len(samples))
    grid = np.zeros((2 * h, cols * w, c), dtype=np.uint8)
    for row, tiles in enumerate((components, samples)):
        for i, tile in enumerate(tiles):
            grid[row * h : (row + 1) * h, i * w : (i + 1) * w] = _to_bytes(tile).reshape(h, w, c)
    return grid


def write_pnm(path, grid: np.ndarray) -> None:
    h, w, c = grid.shape
    magic = {1: b"P5", 3: b"P6"}[c]
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + grid.tobytes())


@main.command("inspect-generator")
@click.argument("store_path", type=click.Path(dir_okay=False, exists=True))
@click.option("--task", type=int, required=True)
@click.option("--class", "label", type=int, required=True)
@click.option("--count", type=int, default=8, show_default=True, help="Samples to draw.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True,
              help="Output .pgm (grayscale) or .ppm (RGB).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--channels", type=click.Choice(["1", "3"]), default=None,
              help="Override the channel count inferred from the pixel count.")
def inspect_generator(store_path, task, label, count, out_path, seed, channels):
    """Dump a generator's components and some of its samples as an image grid."""
    try:
        store = load_store(store_path)
        record = store[(task, label)]
        shape = image_shape(store.num_pixels, int(channels) if channels else None)
        samples = store.draw(task, label, count, np.random.default_rng(seed))
        grid = render_grid(record.u.T, samples, shape)
        write_pnm(out_path, grid)
    except (KeyError, ValueError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        click.echo(f"error: {msg}", err=True)
        sys.exit(EXIT_RUNTIME)
    click.echo(f"wrote {out_path} ({record.rank} components, {count} samples)")
