"""A small ReLU multilayer perceptron trained with plain SGD.

Parameters live in one flat float64 vector; ``MlpParams.layers`` exposes
per-layer ``(W, b)`` views into it, with ``W`` shaped ``(fan_in, fan_out)``.
Gradients use the same flat layout, which is what A-GEM projects.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .linalg import NumericError

MAGIC = b"MLPW"
VERSION = 1


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray  # (b, P)
    labels: np.ndarray  # (b,) int

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2 or labels.shape != (inputs.shape[0],):
            raise ValueError(f"inputs {inputs.shape} and labels {labels.shape} do not match")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @staticmethod
    def concat(*batches: "Batch") -> "Batch":
        return Batch(
            np.concatenate([b.inputs for b in batches]),
            np.concatenate([b.labels for b in batches]),
        )


def layout(dims):
    """``(offset, fan_in, fan_out)`` for every layer of the flat vector."""
    out, offset = [], 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        out.append((offset, fan_in, fan_out))
        offset += fan_in * fan_out + fan_out
    return out


def param_count(dims) -> int:
    return sum(i * o + o for i, o in zip(dims[:-1], dims[1:]))


class MlpParams:
    def __init__(self, dims, flat=None):
        self.dims = tuple(int(d) for d in dims)
        if len(self.dims) < 2 or min(self.dims) < 1:
            raise ValueError(f"invalid layer sizes {dims}")
        size = param_count(self.dims)
        if flat is None:
            flat = np.zeros(size)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (size,):
            raise ValueError(f"expected {size} parameters, got shape {flat.shape}")
        self.flat = flat

    @property
    def size(self) -> int:
        return self.flat.shape[0]

    @property
    def layers(self):
        return unflatten(self.flat, self.dims)

    def copy(self) -> "MlpParams":
        return MlpParams(self.dims, self.flat.copy())

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, MlpParams)
            and self.dims == other.dims
            and self.flat.tobytes() == other.flat.tobytes()
        )

    def __repr__(self) -> str:
        return f"MlpParams(dims={self.dims})"


def unflatten(flat: np.ndarray, dims):
    layers = []
    for offset, fan_in, fan_out in layout(dims):
        w = flat[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
        b = flat[offset + fan_in * fan_out : offset + fan_in * fan_out + fan_out]
        layers.append((w, b))
    return layers


def flatten(layers) -> np.ndarray:
    return np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in layers])


def init_params(seed: int, dims) -> MlpParams:
    """Glorot-uniform weights and zero biases, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params = MlpParams(dims)
    for w, _ in params.layers:
        limit = np.sqrt(6.0 / (w.shape[0] + w.shape[1]))
        w[...] = rng.uniform(-limit, limit, size=w.shape)
    return params


def _check_inputs(params: MlpParams, inputs: np.ndarray) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != params.dims[0]:
        raise ValueError(f"inputs of shape {inputs.shape} do not fit a {params.dims[0]}-input network")
    return inputs


def forward(params: MlpParams, inputs) -> np.ndarray:
    h = _check_inputs(params, inputs)
    layers = params.layers
    for w, b in layers[:-1]:
        h = np.maximum(h @ w + b, 0.0)
    w, b = layers[-1]
    return h @ w + b


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss_and_grad(params: MlpParams, batch: Batch):
    """Mean softmax cross-entropy over ``batch`` and its exact gradient."""
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    x = _check_inputs(params, batch.inputs)
    y = batch.labels
    if y.min() < 0 or y.max() >= params.dims[-1]:
        raise ValueError(f"labels must lie in [0, {params.dims[-1]})")

    layers = params.layers
    acts = [x]
    for w, b in layers[:-1]:
        acts.append(np.maximum(acts[-1] @ w + b, 0.0))
    w, b = layers[-1]
    logp = log_softmax(acts[-1] @ w + b)
    rows = np.arange(n)
    loss = -logp[rows, y].mean()

    delta = np.exp(logp)
    delta[rows, y] -= 1.0
    delta /= n
    grad = np.empty_like(params.flat)
    for i in range(len(layers) - 1, -1, -1):
        offset, fan_in, fan_out = layout(params.dims)[i]
        w = layers[i][0]
        grad[offset : offset + fan_in * fan_out] = (acts[i].T @ delta).ravel()
        grad[offset + fan_in * fan_out : offset + fan_in * fan_out + fan_out] = delta.sum(axis=0)
        if i:
            delta = (delta @ w.T) * (acts[i] > 0)
    return float(loss), grad


def sgd_step(params: MlpParams, grad: np.ndarray, eta: float) -> MlpParams:
    if eta <= 0:
        raise ValueError(f"learning rate must be positive, got {eta}")
    if not np.all(np.isfinite(grad)):
        raise NumericError("gradient contains NaN or Inf")
    return MlpParams(params.dims, params.flat - eta * grad)


def predict(params: MlpParams, inputs, chunk: int = 8192) -> np.ndarray:
    """Argmax class per row; ties go to the lowest class index."""
    inputs = _check_inputs(params, inputs)
    out = np.empty(inputs.shape[0], dtype=np.int64)
    for start in range(0, inputs.shape[0], chunk):
        out[start : start + chunk] = forward(params, inputs[start : start + chunk]).argmax(axis=1)
    return out


def save_params(params: MlpParams, path) -> None:
    header = struct.pack("<4sII", MAGIC, VERSION, len(params.dims))
    dims = struct.pack(f"<{len(params.dims)}I", *params.dims)
    Path(path).write_bytes(header + dims + params.flat.astype("<f8").tobytes())


def load_params(path) -> MlpParams:
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise ValueError(f"{path}: too short for an MLPW header")
    magic, version, ndims = struct.unpack_from("<4sII", blob, 0)
    if magic != MAGIC or version != VERSION:
        raise ValueError(f"{path}: not an MLPW v{VERSION} file")
    if len(blob) < 12 + 4 * ndims:
        raise ValueError(f"{path}: truncated layer sizes at offset 12")
    dims = struct.unpack_from(f"<{ndims}I", blob, 12)
    expected = 12 + 4 * ndims + 8 * param_count(dims)
    if len(blob) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(blob)}")
    flat = np.frombuffer(blob, dtype="<f8", offset=12 + 4 * ndims).astype(np.float64)
    return MlpParams(dims, flat)
