"""Shared plain-ERM epoch loop used by Stage 2 and the baselines."""

from __future__ import annotations

import numpy as np

from bamlab.data import TrainView
from bamlab.model import ModelParams
from bamlab.numkit import NumericError, OptimizerState, forward_backward, sgd_step
from bamlab.rng import substream


def epoch_order(seed: int, phase: str, epoch: int, n: int) -> np.ndarray:
    """Seeded shuffle of ``range(n)`` for one epoch of one training phase."""
    return substream(seed, "shuffle", phase, epoch).permutation(n)


def batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


def check_finite_model(model: ModelParams, context: str) -> None:
    for a in model.arrays():
        if not np.all(np.isfinite(a)):
            raise NumericError(f"{context}: parameters diverged to non-finite values")


def erm_epoch(model: ModelParams, view: TrainView, order: np.ndarray,
              opt: OptimizerState, batch_size: int, rows: np.ndarray | None = None) -> float:
    """One pass over ``order``; ``rows`` maps order positions to training rows
    (used for upsampled multisets). Returns the example-weighted mean loss."""
    total, count = 0.0, 0
    for b in batches(order, batch_size):
        idx = b if rows is None else rows[b]
        loss, grads, _ = forward_backward(model, view.features[idx], view.labels[idx])
        sgd_step(model, grads, opt)
        total += loss * len(idx)
        count += len(idx)
    return total / max(count, 1)


def train_erm(model: ModelParams, view: TrainView, epochs: int, *, seed: int, phase: str,
              lr: float, momentum: float, weight_decay: float, batch_size: int) -> list[float]:
    """Plain ERM for ``epochs`` epochs, mutating ``model``. Returns per-epoch losses."""
    opt = OptimizerState.for_arrays(model.arrays(), lr, momentum, weight_decay)
    losses = []
    for epoch in range(1, epochs + 1):
        losses.append(erm_epoch(model, view, epoch_order(seed, phase, epoch, len(view)),
                                opt, batch_size))
        check_finite_model(model, f"{phase} epoch {epoch}")
    return losses
