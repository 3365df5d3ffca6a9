"""Dense numeric core: softmax cross-entropy, MLP backprop and SGD with momentum.

Matrices are plain ``numpy`` float64 arrays. Parameters of the feedforward
network live in :class:`bamlab.model.ModelParams`; this module only knows the
layout (``weights[k]`` of shape ``(fan_in, fan_out)``, ``biases[k]`` of shape
``(fan_out,)``, ReLU between layers, linear output head).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

if TYPE_CHECKING:
    from bamlab.model import ModelParams

PROB_CLAMP = 1e-300


class InvalidInputError(ValueError):
    """Raised on shape mismatches, bad indices or non-finite inputs."""


class NumericError(ArithmeticError):
    """Raised when training produces non-finite values."""


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise InvalidInputError(f"{what} contains non-finite values")


def softmax(logits) -> np.ndarray:
    """Row-wise softmax with max-subtraction. Accepts a vector or a matrix."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim not in (1, 2) or z.shape[-1] < 2:
        raise InvalidInputError(f"softmax needs at least 2 classes, got shape {z.shape}")
    _check_finite(z, "logits")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _check_labels(labels, n_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise InvalidInputError(f"label out of range [0, {n_classes})")
    return y.astype(np.int64)


def cross_entropy(probs, label) -> float | np.ndarray:
    """``-log(probs[label])`` with the probability clamped at 1e-300.

    For a matrix of probabilities and a label vector, returns the per-row losses.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = _check_labels(label, p.shape[-1])
    if p.ndim == 1:
        return float(-np.log(max(p[int(y)], PROB_CLAMP)))
    picked = p[np.arange(p.shape[0]), y]
    return -np.log(np.maximum(picked, PROB_CLAMP))


def ce_logit_gradient(logits, label) -> np.ndarray:
    """Gradient of ``cross_entropy(softmax(logits), label)`` w.r.t. the logits."""
    g = softmax(logits).copy()
    y = _check_labels(label, g.shape[-1])
    if g.ndim == 1:
        g[int(y)] -= 1.0
    else:
        g[np.arange(g.shape[0]), y] -= 1.0
    return g


@dataclass
class GradientSet:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]


def forward(model: "ModelParams", batch: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Returns the per-layer inputs (for backprop) and the output logits."""
    acts = [batch]
    h = batch
    last = len(model.weights) - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        # overflow surfaces as non-finite values that the callers check for
        with np.errstate(over="ignore", invalid="ignore"):
            h = h @ w + b
        if k < last:
            h = np.maximum(h, 0.0)
            acts.append(h)
    return acts, h


def forward_backward(
    model: "ModelParams",
    batch,
    labels,
    extra_logit_offset: Optional[np.ndarray] = None,
) -> tuple[float, GradientSet, Optional[np.ndarray]]:
    """Mean softmax cross-entropy of ``f(x) + offset`` and its exact gradients.

    Returns ``(loss, grads over the network parameters, grad over the offset)``;
    the offset gradient is ``None`` when no offset is given.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.layer_dims[0]:
        raise InvalidInputError(
            f"batch shape {x.shape} does not match input dim {model.layer_dims[0]}"
        )
    y = np.asarray(labels)
    if y.shape != (x.shape[0],):
        raise InvalidInputError(f"{y.shape[0] if y.ndim else 0} labels for {x.shape[0]} rows")
    n_classes = model.layer_dims[-1]
    y = _check_labels(y, n_classes)
    if extra_logit_offset is not None:
        offset = np.asarray(extra_logit_offset, dtype=np.float64)
        if offset.shape != (x.shape[0], n_classes):
            raise InvalidInputError(
                f"offset shape {offset.shape}, expected {(x.shape[0], n_classes)}"
            )

    acts, z = forward(model, x)
    if extra_logit_offset is not None:
        z = z + offset
    n = x.shape[0]
    p = softmax(z)
    loss = float(np.mean(cross_entropy(p, y)))

    # d(mean loss)/dz
    delta = p
    delta[np.arange(n), y] -= 1.0
    delta /= n
    offset_grad = delta.copy() if extra_logit_offset is not None else None

    n_layers = len(model.weights)
    gw: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    for k in range(n_layers - 1, -1, -1):
        gw[k] = acts[k].T @ delta
        gb[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ model.weights[k].T) * (acts[k] > 0)
    return loss, GradientSet(gw, gb), offset_grad


@dataclass
class OptimizerState:
    """SGD hyperparameters plus one velocity buffer per parameter array."""

    learning_rate: float
    momentum: float
    weight_decay: float
    velocity: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidInputError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidInputError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise InvalidInputError("weight_decay must be non-negative")

    @classmethod
    def for_arrays(cls, arrays: Sequence[np.ndarray], learning_rate: float,
                   momentum: float = 0.0, weight_decay: float = 0.0) -> "OptimizerState":
        return cls(learning_rate, momentum, weight_decay,
                   [np.zeros_like(a, dtype=np.float64) for a in arrays])


def sgd_update(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
               state: OptimizerState) -> None:
    """In-place ``v = m*v + (g + wd*p); p -= lr*v`` over matching arrays."""
    if len(params) != len(grads) or len(params) != len(state.velocity):
        raise InvalidInputError("parameter, gradient and velocity counts differ")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
    for p, g, v in zip(params, grads, state.velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise InvalidInputError(f"shape mismatch {p.shape} / {g.shape} / {v.shape}")
        step = g + state.weight_decay * p if state.weight_decay else g
        v *= state.momentum
        v += step
        p -= state.learning_rate * v


def sgd_step(model: "ModelParams", grads: GradientSet, state: OptimizerState) -> None:
    """One momentum-SGD step on the network parameters (mutates model and state)."""
    sgd_update(model.arrays(), grads.arrays(), state)


def sgd_update_rows(table: np.ndarray, velocity: np.ndarray, rows: np.ndarray,
                    grad_rows: np.ndarray, learning_rate: float, momentum: float,
                    weight_decay: float = 0.0) -> None:
    """Momentum SGD restricted to ``rows`` of a table; other rows keep value and velocity."""
    if not np.all(np.isfinite(grad_rows)):
        raise NumericError("non-finite gradient")
    step = grad_rows + weight_decay * table[rows] if weight_decay else grad_rows
    v = momentum * velocity[rows] + step
    velocity[rows] = v
    table[rows] -= learning_rate * v
