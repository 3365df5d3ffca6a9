"""Synthetic spurious-correlation datasets, group-stratified splits and CSV persistence.

Every example has a label ``y``, a spurious attribute ``a`` and the derived
group ``g = y * A + a``. Features are a class-informative *core* block followed
by an attribute-informative *spurious* block.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from bamlab.numkit import InvalidInputError
from bamlab.rng import substream

SPLITS = ("train", "validation", "test")
DEFAULT_FRACTIONS = (0.7, 0.15, 0.15)
UNKNOWN_ATTRIBUTE = -1


class DataWarning(UserWarning):
    pass


class CSVFormatError(ValueError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.line = line


@dataclass(frozen=True)
class Example:
    features: np.ndarray
    label: int
    attribute: int
    n_attributes: int

    @property
    def group(self) -> int:
        return self.label * self.n_attributes + self.attribute


@dataclass
class DatasetSpec:
    n_total: int = 10000
    n_classes: int = 2
    n_attributes: int = 2
    class_proportions: tuple[float, ...] = (0.5, 0.5)
    group_proportions: tuple[tuple[float, ...], ...] = ((0.9, 0.1), (0.1, 0.9))
    core_noise: float = 1.0
    spurious_noise: float = 0.1
    core_dim: int = 2
    spurious_dim: int = 2
    seed: int = 0
    kind: str = "blobs"

    def __post_init__(self):
        self.class_proportions = tuple(float(p) for p in self.class_proportions)
        self.group_proportions = tuple(tuple(float(p) for p in row) for row in self.group_proportions)
        self.validate()

    def validate(self) -> None:
        if self.n_total <= 0 or self.n_classes < 2 or self.n_attributes < 1:
            raise InvalidInputError("need n_total > 0, n_classes >= 2, n_attributes >= 1")
        if self.kind not in ("blobs", "patch"):
            raise InvalidInputError(f"unknown dataset kind {self.kind!r}")
        _check_proportions(self.class_proportions, self.n_classes, "class_proportions")
        if len(self.group_proportions) != self.n_classes:
            raise InvalidInputError("group_proportions needs one row per class")
        for c, row in enumerate(self.group_proportions):
            _check_proportions(row, self.n_attributes, f"group_proportions[{c}]")
        if self.core_noise <= 0 or self.spurious_noise <= 0:
            raise InvalidInputError("noise scales must be positive")
        if self.core_dim < 1 or self.spurious_dim < 0:
            raise InvalidInputError("core_dim must be >= 1 and spurious_dim >= 0")
        if self.kind == "blobs":
            if self.core_dim < self.n_classes:
                raise InvalidInputError("blobs need core_dim >= n_classes")
            if 0 < self.spurious_dim < self.n_attributes:
                raise InvalidInputError("blobs need spurious_dim >= n_attributes (or 0)")

    @property
    def n_features(self) -> int:
        return self.core_dim + self.spurious_dim

    def group_targets(self) -> np.ndarray:
        """Exact per-group counts (length C*A) by largest-remainder rounding."""
        probs = [pc * pg for pc, row in zip(self.class_proportions, self.group_proportions)
                 for pg in row]
        counts = largest_remainder(self.n_total, probs)
        for g, (p, k) in enumerate(zip(probs, counts)):
            if p > 0 and k == 0:
                warnings.warn(f"group {g} has proportion {p} but rounds to 0 examples",
                              DataWarning, stacklevel=3)
        return counts

    def to_dict(self) -> dict:
        return asdict(self)


def _check_proportions(p: Sequence[float], n: int, name: str) -> None:
    if len(p) != n:
        raise InvalidInputError(f"{name} needs {n} entries, got {len(p)}")
    if any(x < 0 for x in p) or abs(math.fsum(p) - 1.0) > 1e-9:
        raise InvalidInputError(f"{name} must be non-negative and sum to 1, got {p}")


def largest_remainder(total: int, proportions: Sequence[float]) -> np.ndarray:
    """Integer counts summing to ``total``; leftover units go to the largest
    fractional parts, ties to the lower index."""
    quotas = [total * p for p in proportions]
    counts = [math.floor(q) for q in quotas]
    leftover = total - sum(counts)
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return np.array(counts, dtype=np.int64)


@dataclass
class TrainView:
    """What training code may see: features and labels only."""

    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class ExampleSet:
    features: np.ndarray
    labels: np.ndarray
    attributes: np.ndarray
    index: np.ndarray
    n_classes: int
    n_attributes: int

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[Example]:
        for i in range(len(self)):
            yield Example(self.features[i], int(self.labels[i]), int(self.attributes[i]),
                          self.n_attributes)

    @property
    def groups(self) -> np.ndarray:
        g = self.labels * self.n_attributes + self.attributes
        return np.where(self.attributes < 0, -1, g)

    @property
    def has_attributes(self) -> bool:
        return bool(len(self)) and bool(np.all(self.attributes >= 0))

    def training_view(self) -> TrainView:
        return TrainView(self.features, self.labels)

    def subset(self, rows) -> "ExampleSet":
        rows = np.asarray(rows, dtype=np.int64)
        return ExampleSet(self.features[rows], self.labels[rows], self.attributes[rows],
                          self.index[rows], self.n_classes, self.n_attributes)

    def without_attributes(self) -> "ExampleSet":
        return ExampleSet(self.features, self.labels,
                          np.full_like(self.attributes, UNKNOWN_ATTRIBUTE), self.index,
                          self.n_classes, self.n_attributes)

    def equals(self, other: "ExampleSet") -> bool:
        return (self.n_classes == other.n_classes and self.n_attributes == other.n_attributes
                and all(np.array_equal(a, b) for a, b in
                        [(self.features, other.features), (self.labels, other.labels),
                         (self.attributes, other.attributes), (self.index, other.index)]))


@dataclass
class SplitDataset:
    train: ExampleSet
    validation: ExampleSet
    test: ExampleSet
    spec: Optional[DatasetSpec] = None
    flags: list[str] = field(default_factory=list)

    def __getitem__(self, name: str) -> ExampleSet:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)


def _unit_means(k: int, dim: int) -> np.ndarray:
    means = np.zeros((k, dim))
    means[np.arange(k), np.arange(k)] = 1.0
    return means


def _sign_patterns(k: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    if dim == 0:
        return np.zeros((k, 0))
    return rng.choice([-1.0, 1.0], size=(k, dim)) / math.sqrt(dim)


def _assemble(spec: DatasetSpec, core_means: np.ndarray, spur_means: np.ndarray,
              rng: np.random.Generator) -> ExampleSet:
    counts = spec.group_targets()
    A = spec.n_attributes
    labels = np.repeat(np.arange(spec.n_classes * A) // A, counts)
    attrs = np.repeat(np.arange(spec.n_classes * A) % A, counts)
    n = len(labels)
    core = core_means[labels] + spec.core_noise * rng.standard_normal((n, spec.core_dim))
    spur = spur_means[attrs] + spec.spurious_noise * rng.standard_normal((n, spec.spurious_dim))
    perm = rng.permutation(n)
    feats = np.concatenate([core, spur], axis=1)[perm]
    return ExampleSet(feats, labels[perm], attrs[perm], np.arange(n), spec.n_classes, A)


def gen_blobs(spec: DatasetSpec) -> ExampleSet:
    """Core block: class ``c`` centred on unit vector ``e_c``; spurious block:
    attribute ``a`` centred on ``e_a``; isotropic Gaussian noise on each block."""
    if spec.kind != "blobs":
        spec = DatasetSpec(**{**spec.to_dict(), "kind": "blobs"})
    rng = substream(spec.seed, "data")
    return _assemble(spec, _unit_means(spec.n_classes, spec.core_dim),
                     _unit_means(spec.n_attributes, spec.spurious_dim) if spec.spurious_dim
                     else np.zeros((spec.n_attributes, 0)), rng)


def gen_patch_composite(spec: DatasetSpec) -> ExampleSet:
    """Like :func:`gen_blobs`, but each block uses random unit-norm sign patterns
    as centres, so the two blocks can have arbitrary dimensionalities
    (``spurious_dim=0`` drops the shortcut entirely)."""
    if spec.kind != "patch":
        spec = DatasetSpec(**{**spec.to_dict(), "kind": "patch"})
    rng = substream(spec.seed, "data")
    core_means = _sign_patterns(spec.n_classes, spec.core_dim, rng)
    spur_means = _sign_patterns(spec.n_attributes, spec.spurious_dim, rng)
    return _assemble(spec, core_means, spur_means, rng)


def generate(spec: DatasetSpec) -> ExampleSet:
    return gen_blobs(spec) if spec.kind == "blobs" else gen_patch_composite(spec)


def split(examples: ExampleSet, fractions: Sequence[float] = DEFAULT_FRACTIONS,
          seed: int = 0) -> SplitDataset:
    """Group-stratified train/validation/test split with largest-remainder sizes."""
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(math.fsum(fractions) - 1) > 1e-9:
        raise InvalidInputError(f"fractions must be three positives summing to 1, got {fractions}")
    rng = substream(seed, "split")
    parts: list[list[np.ndarray]] = [[], [], []]
    flags = []
    groups = examples.groups
    for g in np.unique(groups):
        members = rng.permutation(np.flatnonzero(groups == g))
        if len(members) < 3:
            flags.append(f"group {g} has {len(members)} examples; placed entirely in train")
            warnings.warn(flags[-1], DataWarning, stacklevel=2)
            parts[0].append(members)
            continue
        sizes = largest_remainder(len(members), fractions)
        bounds = np.cumsum(sizes)[:-1]
        for k, chunk in enumerate(np.split(members, bounds)):
            parts[k].append(chunk)
    subsets = [examples.subset(np.sort(np.concatenate(p)) if p else np.array([], dtype=np.int64))
               for p in parts]
    return SplitDataset(*subsets, flags=flags)


def make_dataset(spec: DatasetSpec, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> SplitDataset:
    ds = split(generate(spec), fractions, spec.seed)
    ds.spec = spec
    return ds


# ---------------------------------------------------------------------------
# CSV persistence

def _header(n_features: int) -> list[str]:
    return ["example_index", "label", "attribute", "group"] + [f"f_{j}" for j in range(n_features)]


def write_split_csv(examples: ExampleSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_header(examples.features.shape[1]))
        groups = examples.groups
        for i in range(len(examples)):
            w.writerow([int(examples.index[i]), int(examples.labels[i]),
                        int(examples.attributes[i]), int(groups[i])]
                       + [repr(float(v)) for v in examples.features[i]])


def save_csv(ds: SplitDataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        write_split_csv(ds[name], d / f"{name}.csv")


def _read_split(path: Path, n_classes: Optional[int], n_attributes: Optional[int]):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CSVFormatError(path, 1, "empty file") from None
        n_feat = len(header) - 4
        if n_feat < 1 or header != _header(n_feat):
            raise CSVFormatError(path, 1, f"unexpected header {header[:5]}...")
        rows, feats = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise CSVFormatError(path, lineno, f"expected {len(header)} fields, got {len(row)}")
            try:
                ints = [int(v) for v in row[:4]]
                fv = [float(v) for v in row[4:]]
            except ValueError as exc:
                raise CSVFormatError(path, lineno, str(exc)) from None
            if not all(math.isfinite(v) for v in fv):
                raise CSVFormatError(path, lineno, "non-finite feature")
            rows.append(ints + [lineno])
            feats.append(fv)
    arr = np.array(rows, dtype=np.int64).reshape(-1, 5)
    return arr, np.array(feats, dtype=np.float64).reshape(-1, n_feat)


def load_csv(directory, spec: Optional[DatasetSpec] = None) -> SplitDataset:
    """Load ``train.csv``/``validation.csv``/``test.csv``.

    Class/attribute counts come from ``spec`` when given, otherwise they are
    inferred from the data. A withheld attribute is stored as -1 (group -1).
    """
    d = Path(directory)
    raw = {}
    for name in SPLITS:
        p = d / f"{name}.csv"
        if not p.exists():
            raise FileNotFoundError(f"missing split file {p}")
        raw[name] = (p, *_read_split(p, None, None))
    all_ints = np.concatenate([r[1] for r in raw.values()])
    C = spec.n_classes if spec else int(all_ints[:, 1].max()) + 1
    A = spec.n_attributes if spec else max(int(all_ints[:, 2].max()) + 1, 1)
    widths = {r[2].shape[1] for r in raw.values() if len(r[2])}
    if len(widths) > 1:
        raise CSVFormatError(d, 1, f"splits disagree on feature count: {sorted(widths)}")

    out = {}
    for name, (path, ints, feats) in raw.items():
        for idx, y, a, g, lineno in ints:
            if not 0 <= y < C:
                raise CSVFormatError(path, lineno, f"label {y} out of range")
            if a == UNKNOWN_ATTRIBUTE:
                if g != -1:
                    raise CSVFormatError(path, lineno, "withheld attribute needs group -1")
            elif not 0 <= a < A or g != y * A + a:
                raise CSVFormatError(path, lineno, f"group {g} inconsistent with (y={y}, a={a})")
        out[name] = ExampleSet(feats, ints[:, 1].copy(), ints[:, 2].copy(), ints[:, 0].copy(), C, A)
    return SplitDataset(out["train"], out["validation"], out["test"], spec)
