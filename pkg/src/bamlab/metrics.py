"""Group-aware evaluation: per-group/per-class accuracy, worst-group accuracy, ClassDiff."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from bamlab.numkit import InvalidInputError


class EmptyGroupError(InvalidInputError):
    def __init__(self, group: int, label: int, attribute: Optional[int] = None):
        what = f"group {group} (label={label}, attribute={attribute})" if attribute is not None \
            else f"class {label}"
        super().__init__(f"{what} has no examples; stratify the split")
        self.group = group


@dataclass
class GroupReport:
    group_accuracy: dict[int, float]
    class_accuracy: list[float]
    average_accuracy: float
    worst_group_accuracy: float
    class_diff: float
    group_sizes: dict[int, int]

    @property
    def has_groups(self) -> bool:
        return bool(self.group_accuracy)


def class_diff(class_accuracies) -> float:
    """Mean absolute difference over all unordered pairs of class accuracies."""
    acc = [float(a) for a in class_accuracies]
    if len(acc) < 2:
        raise InvalidInputError("class_diff needs at least two classes")
    pairs = list(itertools.combinations(acc, 2))
    return math.fsum(abs(a - b) for a, b in pairs) / len(pairs)


def group_report(predictions, labels, attributes=None, *, n_classes: int,
                 n_attributes: int = 2) -> GroupReport:
    """Exact per-group and per-class accuracies.

    ``attributes=None`` gives a class-only report (no group annotations); its
    worst-group accuracy is NaN.
    """
    pred = np.asarray(predictions)
    y = np.asarray(labels)
    if pred.shape != y.shape:
        raise InvalidInputError("predictions and labels differ in length")
    correct = pred == y

    class_acc = []
    for c in range(n_classes):
        mask = y == c
        if not mask.any():
            raise EmptyGroupError(-1, c)
        class_acc.append(float(correct[mask].mean()))

    group_acc: dict[int, float] = {}
    sizes: dict[int, int] = {}
    if attributes is not None:
        a = np.asarray(attributes)
        if a.shape != y.shape:
            raise InvalidInputError("attributes and labels differ in length")
        groups = y * n_attributes + a
        for c in range(n_classes):
            for att in range(n_attributes):
                g = c * n_attributes + att
                mask = groups == g
                if not mask.any():
                    raise EmptyGroupError(g, c, att)
                group_acc[g] = float(correct[mask].mean())
                sizes[g] = int(mask.sum())
    worst = min(group_acc.values()) if group_acc else float("nan")
    return GroupReport(group_acc, class_acc, float(correct.mean()), worst,
                       class_diff(class_acc), sizes)


def check_claim1(group_accuracies, group_sizes, epsilon: float) -> bool:
    """Check "all group accuracies within epsilon => ClassDiff <= epsilon".

    Both inputs are ``(C, A)``-shaped: row ``c`` holds the groups of class ``c``.
    Class accuracy is the size-weighted mean of its groups. Returns True when the
    premise fails (the implication holds vacuously).
    """
    acc = np.asarray(group_accuracies, dtype=np.float64)
    sizes = np.asarray(group_sizes, dtype=np.float64)
    if acc.max() - acc.min() > epsilon:
        return True
    class_acc = (acc * sizes).sum(axis=1) / sizes.sum(axis=1)
    return class_diff(class_acc) <= epsilon + 1e-12


def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks on ties; NaN if either series is constant."""
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape or xa.ndim != 1 or xa.size < 3:
        raise InvalidInputError("spearman needs two equal-length series of length >= 3")
    rx, ry = rankdata(xa), rankdata(ya)
    if np.ptp(rx) == 0 or np.ptp(ry) == 0:
        return float("nan")
    rx -= rx.mean()
    ry -= ry.mean()
    r = float((rx @ ry) / math.sqrt((rx @ rx) * (ry @ ry)))
    return max(-1.0, min(1.0, r))
