"""Multilayer perceptron classifier and its binary checkpoint format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from bamlab.numkit import InvalidInputError, forward

MAGIC = b"BAMCKPT1"


class CheckpointFormatError(ValueError):
    """The checkpoint file exists but cannot be decoded."""


@dataclass
class ModelParams:
    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    init_seed: int = 0

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def copy(self) -> "ModelParams":
        return ModelParams(self.layer_dims, [w.copy() for w in self.weights],
                           [b.copy() for b in self.biases], self.init_seed)

    def equals(self, other: "ModelParams") -> bool:
        return (self.layer_dims == other.layer_dims
                and all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())))


def init_model(layer_dims: Sequence[int], seed: int | np.random.Generator) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.

    ``seed`` may be an integer or an already-derived generator.
    """
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise InvalidInputError(f"need >= 2 positive layer dims, got {dims}")
    if isinstance(seed, np.random.Generator):
        rng, init_seed = seed, -1
    else:
        rng, init_seed = np.random.default_rng(seed), int(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ModelParams(dims, weights, biases, init_seed)


def predict_logits(model: ModelParams, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.layer_dims[0]:
        raise InvalidInputError(
            f"batch shape {x.shape} does not match input dim {model.layer_dims[0]}"
        )
    return forward(model, x)[1]


def predict_labels(model: ModelParams, batch) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(predict_logits(model, batch), axis=1)


def save_checkpoint(model: ModelParams, path) -> None:
    """Header: magic, n_dims, dims, init_seed (little-endian int64); then float64 payload."""
    dims = model.layer_dims
    header = MAGIC + struct.pack(f"<q{len(dims)}qq", len(dims), *dims, model.init_seed)
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in model.arrays())
    Path(path).write_bytes(header + payload)


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()  # OSError propagates as the I/O failure kind
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a BAMCKPT1 checkpoint")
    pos = len(MAGIC)
    (n_dims,) = struct.unpack_from("<q", raw, pos)
    pos += 8
    if not 2 <= n_dims <= 1024 or len(raw) < pos + 8 * (n_dims + 1):
        raise CheckpointFormatError(f"{path}: truncated or corrupt header")
    dims = struct.unpack_from(f"<{n_dims}q", raw, pos)
    pos += 8 * n_dims
    (init_seed,) = struct.unpack_from("<q", raw, pos)
    pos += 8
    if any(d <= 0 for d in dims):
        raise CheckpointFormatError(f"{path}: invalid layer dims {dims}")
    shapes = [(a, b) for a, b in zip(dims[:-1], dims[1:])] + [(b,) for b in dims[1:]]
    expected = sum(int(np.prod(s)) for s in shapes) * 8
    if len(raw) - pos != expected:
        raise CheckpointFormatError(
            f"{path}: payload is {len(raw) - pos} bytes, expected {expected}"
        )
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape))
        arrays.append(np.frombuffer(raw, dtype="<f8", count=count, offset=pos)
                      .astype(np.float64).reshape(shape))
        pos += count * 8
    n_layers = len(dims) - 1
    return ModelParams(tuple(dims), arrays[:n_layers], arrays[n_layers:], init_seed)
