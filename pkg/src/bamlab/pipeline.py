"""Two-stage training: bias amplification, error set, upsampling, rebalanced training
and epoch selection. ERM and JTT are configurations of the same pipeline."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from bamlab.auxvar import AuxBank, Stage1Log, run_stage1
from bamlab.config import RunConfig
from bamlab.data import ExampleSet, SplitDataset, TrainView
from bamlab.metrics import group_report
from bamlab.model import ModelParams, init_model, predict_labels, predict_logits
from bamlab.numkit import InvalidInputError, NumericError, OptimizerState, cross_entropy, softmax
from bamlab.rng import substream
from bamlab.training import check_finite_model, epoch_order, erm_epoch

STAGE2_PHASE = "stage2"
EVAL_SPLITS = ("validation", "test")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage


@dataclass
class ErrorSet:
    indices: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class EpochRecord:
    epoch: int
    split: str
    class_accuracy: list[float]
    group_accuracy: dict[int, float]
    class_diff: float
    mean_loss: float
    worst_group_accuracy: float
    average_accuracy: float


@dataclass
class RunSummary:
    selected_epoch: int
    criterion: str
    test_group_accuracy: dict[int, float]
    test_average_accuracy: float
    test_worst_group_accuracy: float
    records: list[EpochRecord]
    error_set_size: int
    n_train: int
    config: RunConfig
    flags: list[str] = field(default_factory=list)

    def dumps(self) -> str:
        """Key/value header followed by the per-epoch CSV table."""
        out = io.StringIO()
        out.write("[summary]\n")
        out.write(f"selected_epoch = {self.selected_epoch}\n")
        out.write(f"criterion = {self.criterion}\n")
        out.write(f"test_average_accuracy = {self.test_average_accuracy!r}\n")
        out.write(f"test_worst_group_accuracy = {self.test_worst_group_accuracy!r}\n")
        for g, acc in sorted(self.test_group_accuracy.items()):
            out.write(f"test_group_{g}_accuracy = {acc!r}\n")
        out.write(f"error_set_size = {self.error_set_size}\n")
        out.write(f"n_train = {self.n_train}\n")
        out.write(f"flags = {'; '.join(self.flags)}\n")
        out.write("[config]\n")
        for k, v in self.config.to_dict().items():
            out.write(f"{k} = {v!r}\n")
        out.write("[epochs]\n")
        out.write(records_csv(self.records))
        return out.getvalue()

    def selected(self, split: str = "test") -> EpochRecord:
        return next(r for r in self.records if r.split == split and r.epoch == self.selected_epoch)


@dataclass
class RunArtifacts:
    summary: RunSummary
    biased_model: ModelParams
    final_model: ModelParams
    aux: Optional[AuxBank]
    error_set: ErrorSet
    stage1_logs: list[Stage1Log]


def records_csv(records: list[EpochRecord]) -> str:
    if not records:
        return ""
    n_classes = len(records[0].class_accuracy)
    group_ids = sorted({g for r in records for g in r.group_accuracy})
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["epoch", "split"] + [f"class_{c}_acc" for c in range(n_classes)]
               + [f"group_{g}_acc" for g in group_ids]
               + ["class_diff", "worst_group_acc", "mean_loss"])
    for r in records:
        w.writerow([r.epoch, r.split] + [repr(a) for a in r.class_accuracy]
                   + [repr(r.group_accuracy[g]) if g in r.group_accuracy else "" for g in group_ids]
                   + [repr(r.class_diff),
                      "" if math.isnan(r.worst_group_accuracy) else repr(r.worst_group_accuracy),
                      repr(r.mean_loss)])
    return out.getvalue()


def build_error_set(model: ModelParams, view: TrainView) -> ErrorSet:
    """Training rows the bare network (no auxiliary offsets) misclassifies."""
    if int(np.max(view.labels, initial=0)) >= model.n_classes:
        raise InvalidInputError("dataset has more classes than the model")
    return ErrorSet(np.flatnonzero(predict_labels(model, view.features) != view.labels))


def upsample(n_train: int, error_set: ErrorSet, mu: int) -> np.ndarray:
    """Sorted multiset of training rows: error-set rows ``mu`` times, the rest once."""
    if mu < 1 or int(mu) != mu:
        raise InvalidInputError("mu must be an integer >= 1")
    mult = np.ones(n_train, dtype=np.int64)
    mult[error_set.indices] = int(mu)
    return np.repeat(np.arange(n_train), mult)


def evaluate(model: ModelParams, examples: ExampleSet, epoch: int, split_name: str) -> EpochRecord:
    logits = predict_logits(model, examples.features)
    pred = np.argmax(logits, axis=1)
    attrs = examples.attributes if examples.has_attributes else None
    rep = group_report(pred, examples.labels, attrs, n_classes=examples.n_classes,
                       n_attributes=examples.n_attributes)
    loss = float(np.mean(cross_entropy(softmax(logits), examples.labels)))
    return EpochRecord(epoch, split_name, rep.class_accuracy, rep.group_accuracy,
                       rep.class_diff, loss, rep.worst_group_accuracy, rep.average_accuracy)


def run_stage2(init: ModelParams, multiset: np.ndarray, dataset: SplitDataset,
               config: RunConfig) -> tuple[ModelParams, list[EpochRecord]]:
    """ERM over the shuffled multiset; validation and test are evaluated before
    training (epoch 0) and after every epoch."""
    model = init.copy()
    view = dataset.train.training_view()
    opt = OptimizerState.for_arrays(model.arrays(), config.lr, config.momentum,
                                    config.weight_decay_stage2)
    records = [evaluate(model, dataset[s], 0, s) for s in EVAL_SPLITS]
    for epoch in range(1, config.stage2_epochs + 1):
        order = epoch_order(config.seed, STAGE2_PHASE, epoch, len(multiset))
        erm_epoch(model, view, order, opt, config.batch_size, rows=multiset)
        check_finite_model(model, f"stage 2 epoch {epoch}")
        records.extend(evaluate(model, dataset[s], epoch, s) for s in EVAL_SPLITS)
    return model, records


def _validation(records: list[EpochRecord]) -> list[EpochRecord]:
    val = sorted((r for r in records if r.split == "validation"), key=lambda r: r.epoch)
    if not val:
        raise InvalidInputError("no validation records to select from")
    return val


def candidate_records(records: list[EpochRecord]) -> list[EpochRecord]:
    """Validation records eligible for selection, in epoch order."""
    val = _validation(records)
    return [r for r in val if r.epoch > 0] or val


def select_epoch(records: list[EpochRecord], criterion: str,
                 smoothing_threshold: float = 0.10) -> tuple[int, list[str]]:
    """Pick the stopping epoch from validation records only. Returns ``(epoch, flags)``.

    The epoch-0 record (the Stage-2 starting point) is only a candidate when no
    Stage-2 epoch was trained. ``class_diff``: epochs whose ClassDiff moved by
    more than ``smoothing_threshold`` from the previous record (epoch 0 included)
    are ignored; ties go to the earliest epoch.
    """
    val = candidate_records(records)
    criterion = criterion.replace("-", "_")
    if criterion == "worst_group_val":
        if any(math.isnan(r.worst_group_accuracy) for r in val):
            raise InvalidInputError("worst_group_val needs group-annotated validation data; "
                                    "use the class_diff criterion")
        best = max(r.worst_group_accuracy for r in val)
        return next(r.epoch for r in val if r.worst_group_accuracy == best), []
    if criterion != "class_diff":
        raise InvalidInputError(f"unknown criterion {criterion!r}")
    seq = _validation(records)
    previous = {cur.epoch: prev for prev, cur in zip(seq, seq[1:])}
    kept = [r for r in val if r.epoch not in previous
            or abs(r.class_diff - previous[r.epoch].class_diff) <= smoothing_threshold]
    flags = []
    if not kept:
        kept = val
        flags.append("class_diff smoothing discarded every epoch; used unsmoothed argmin")
    best = min(r.class_diff for r in kept)
    return next(r.epoch for r in kept if r.class_diff == best), flags


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (InvalidInputError, NumericError) as exc:
        raise StageError(name, exc) from exc


def fresh_model(config: RunConfig, dataset: SplitDataset) -> ModelParams:
    dims = config.layer_dims(dataset.train.features.shape[1], dataset.train.n_classes)
    return init_model(dims, substream(config.seed, "init"))


def run_stage1_or_skip(config: RunConfig, dataset: SplitDataset):
    init = fresh_model(config, dataset)
    if config.T == 0:
        return init, None, []
    # group ids feed only the separation log, never the updates
    return run_stage1(init, dataset.train.training_view(), config,
                      analysis_groups=dataset.train.groups)


def run_from_stage1(biased: ModelParams, error_set: ErrorSet, dataset: SplitDataset,
                    config: RunConfig):
    """Stage 2 + selection given the Stage-1 outputs. Returns ``(summary, final model)``."""
    multiset = _stage("upsample", upsample, len(dataset.train), error_set, config.mu)
    init = biased if config.mode == "one_m" else fresh_model(config, dataset)
    final, records = _stage("stage2", run_stage2, init, multiset, dataset, config)
    selected, flags = _stage("select", select_epoch, records, config.criterion,
                             config.classdiff_smoothing_threshold)
    test = next(r for r in records if r.split == "test" and r.epoch == selected)
    summary = RunSummary(selected, config.criterion, test.group_accuracy, test.average_accuracy,
                         test.worst_group_accuracy, records, len(error_set), len(dataset.train),
                         config, flags)
    return summary, final


def run_bam(config: RunConfig, dataset: SplitDataset) -> RunArtifacts:
    biased, aux, logs = _stage("stage1", run_stage1_or_skip, config, dataset)
    error_set = _stage("error_set", build_error_set, biased, dataset.train.training_view())
    summary, final = run_from_stage1(biased, error_set, dataset, config)
    return RunArtifacts(summary, biased, final, aux, error_set, logs)


def run_experiment(config: RunConfig, dataset: SplitDataset) -> RunSummary:
    return run_bam(config, dataset).summary
