"""Stage 1: bias amplification with one learnable logit offset per training example.

The Stage-1 loss is the batch mean of ``CE(f(x_i) + lam * b_i, y_i)``; the
network parameters and the touched rows of the auxiliary bank ``B`` are
updated jointly.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from bamlab.config import RunConfig
from bamlab.data import ExampleSet, TrainView
from bamlab.model import ModelParams
from bamlab.numkit import (InvalidInputError, NumericError, OptimizerState, forward_backward,
                           sgd_step, sgd_update_rows)
from bamlab.training import batches, check_finite_model, epoch_order

STAGE1_PHASE = "stage1"


@dataclass
class AuxBank:
    values: np.ndarray
    lam: float
    velocity: np.ndarray = field(repr=False, default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.lam < 0:
            raise InvalidInputError("lambda must be >= 0")
        if self.velocity is None:
            self.velocity = np.zeros_like(self.values)

    @classmethod
    def zeros(cls, n_train: int, n_classes: int, lam: float) -> "AuxBank":
        return cls(np.zeros((n_train, n_classes)), float(lam))

    @property
    def n_train(self) -> int:
        return self.values.shape[0]


@dataclass
class GroupSeparation:
    group: int
    size: int
    true_class_logit: float
    other_class_logit: float
    mean_norm: float


@dataclass
class SeparationStats:
    groups: dict[int, GroupSeparation]
    missing_groups: list[int] = field(default_factory=list)


@dataclass
class Stage1Log:
    epoch: int
    train_loss: float
    separation: Optional[SeparationStats] = None


def stage1_batch(model: ModelParams, aux: AuxBank, batch_indices, view: TrainView,
                 theta_opt: OptimizerState, aux_lr: Optional[float] = None,
                 aux_momentum: Optional[float] = None) -> float:
    """One joint SGD step on the network and the batch rows of the aux bank.

    The bank uses the network's learning rate and momentum unless overridden,
    and never weight decay. Returns the batch loss (before the update).
    """
    idx = np.asarray(batch_indices, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise InvalidInputError("batch_indices must be a non-empty 1-d index array")
    if idx.min() < 0 or idx.max() >= aux.n_train or aux.n_train != len(view):
        raise InvalidInputError(f"batch index out of range [0, {aux.n_train})")
    offset = aux.lam * aux.values[idx]
    loss, grads, offset_grad = forward_backward(model, view.features[idx], view.labels[idx],
                                                offset)
    bank_grad = aux.lam * offset_grad
    # a row drawn twice in one batch receives the sum of its gradients
    rows, inverse = np.unique(idx, return_inverse=True)
    summed = np.zeros((len(rows), bank_grad.shape[1]))
    np.add.at(summed, inverse, bank_grad)
    sgd_step(model, grads, theta_opt)
    sgd_update_rows(aux.values, aux.velocity, rows, summed,
                    theta_opt.learning_rate if aux_lr is None else aux_lr,
                    theta_opt.momentum if aux_momentum is None else aux_momentum)
    return loss


def run_stage1(model: ModelParams, view: TrainView, config: RunConfig,
               analysis_groups: Optional[np.ndarray] = None):
    """Train for ``config.T`` epochs. Returns ``(biased model, bank, logs)``.

    The input model is not modified. ``analysis_groups`` is only used to record
    per-epoch separation statistics; training never reads it.
    """
    if config.T < 1:
        raise InvalidInputError("Stage 1 needs T >= 1")
    model = model.copy()
    aux = AuxBank.zeros(len(view), model.n_classes, config.lam)
    opt = OptimizerState.for_arrays(model.arrays(), config.lr, config.momentum,
                                    config.weight_decay_stage1)
    logs = []
    for epoch in range(1, config.T + 1):
        total = 0.0
        try:
            for b in batches(epoch_order(config.seed, STAGE1_PHASE, epoch, len(view)),
                             config.batch_size):
                total += stage1_batch(model, aux, b, view, opt) * len(b)
        except NumericError as exc:
            raise NumericError(f"stage 1 epoch {epoch}: {exc}") from exc
        check_finite_model(model, f"stage 1 epoch {epoch}")
        sep = (separation_stats(aux, view.labels, analysis_groups, warn=False)
               if analysis_groups is not None else None)
        logs.append(Stage1Log(epoch, total / len(view), sep))
    return model, aux, logs


def separation_stats(aux: AuxBank, labels, groups, warn: bool = True,
                     expected_groups=None) -> SeparationStats:
    """Per-group means of ``b_i[y_i]``, of ``b_i`` on the other classes, and of ``||b_i||``."""
    y = np.asarray(labels)
    g = np.asarray(groups)
    if len(y) != aux.n_train or len(g) != aux.n_train:
        raise InvalidInputError("labels/groups must align with the bank rows")
    b = aux.values
    C = b.shape[1]
    true = b[np.arange(len(y)), y]
    other = (b.sum(axis=1) - true) / (C - 1)
    norms = np.linalg.norm(b, axis=1)
    present = sorted(int(v) for v in np.unique(g) if v >= 0)
    expected = present if expected_groups is None else list(expected_groups)
    stats, missing = {}, []
    for grp in expected:
        mask = g == grp
        if not mask.any():
            missing.append(grp)
            continue
        stats[grp] = GroupSeparation(grp, int(mask.sum()), float(true[mask].mean()),
                                     float(other[mask].mean()), float(norms[mask].mean()))
    if missing and warn:
        warnings.warn(f"groups {missing} have no training examples; omitted", stacklevel=2)
    return SeparationStats(stats, missing)


def dump_aux_csv(aux: AuxBank, train: ExampleSet, path) -> None:
    """Columns: example_index, group_id, b_0 ... b_{C-1}."""
    groups = train.groups
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["example_index", "group_id"] + [f"b_{c}" for c in range(aux.values.shape[1])])
        for i in range(aux.n_train):
            w.writerow([int(train.index[i]), int(groups[i])]
                       + [repr(float(v)) for v in aux.values[i]])
