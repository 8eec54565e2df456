"""Mini-batch SGD, k-fold cross-validation and confusion-matrix metrics."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import layers as L
from . import network as N
from .data import LabeledDataset
from .tensor import Tensor

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, batch: int, fold: int | None = None):
        self.epoch, self.batch, self.fold = epoch, batch, fold
        where = f"epoch {epoch}, batch {batch}"
        if fold is not None:
            where = f"fold {fold}, " + where
        super().__init__(f"training diverged (non-finite loss or gradient) at {where}")


class EmptyDatasetError(ValueError):
    pass


class TooFewSamplesError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 30
    batch_size: int = 32
    lr_step_factor: float = 0.1
    lr_step_epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.lr_step_epochs < 1:
            raise ValueError("batch_size and lr_step_epochs must be >= 1, epochs >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_step_factor ** (epoch // self.lr_step_epochs)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float
    learning_rate: float


def cross_entropy(logits: Tensor, target: int) -> float:
    """-log softmax(logits)[target], computed as logsumexp(logits) - logits[target]."""
    return float(-L.log_softmax(np.asarray(logits, dtype=np.float64))[target])


def train(g: N.NetworkGraph, dataset: LabeledDataset, cfg: TrainConfig,
          params: dict[str, Tensor] | None = None,
          on_epoch: Callable[[EpochStats], None] | None = None):
    """Train with momentum SGD on mean cross-entropy; returns ``(params, history)``.

    Initialization and shuffling derive from ``cfg.seed`` alone, so equal seeds
    give bitwise-equal results. Weight decay applies to weights, not biases.
    """
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot train on an empty dataset")
    if dataset.labels.max() >= g.num_classes:
        raise ValueError(f"labels exceed the network's {g.num_classes} classes")
    if cfg.learning_rate == 0:
        log.warning("learning rate is 0: parameters will not change")
    params = N.init_params(g, cfg.seed) if params is None else {k: v.copy() for k, v in params.items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    rng = np.random.default_rng(cfg.seed)
    n = len(dataset)
    history: list[EpochStats] = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        total_loss, correct = 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            acc = {k: np.zeros_like(v) for k, v in params.items()}
            batch_loss = 0.0
            for i in idx:
                loss, probs, grads = N.loss_and_grads(g, params, dataset.images[i], int(dataset.labels[i]))
                batch_loss += loss
                correct += int(L.argmax_class(probs) == dataset.labels[i])
                for k, gk in grads.items():
                    acc[k] += gk
            if not math.isfinite(batch_loss) or not all(np.isfinite(a).all() for a in acc.values()):
                raise DivergenceError(epoch, b)
            total_loss += batch_loss
            if lr == 0:
                continue
            scale = np.float32(1.0 / len(idx))
            for k, w in params.items():
                step = acc[k] * scale
                if cfg.weight_decay and k.endswith(".weights"):
                    step += np.float32(cfg.weight_decay) * w
                v = velocity[k]
                v *= np.float32(cfg.momentum)
                v -= np.float32(lr) * step
                w += v
        stats = EpochStats(epoch + 1, total_loss / n, correct / n, lr)
        history.append(stats)
        log.info("epoch %d loss %.5f acc %.4f lr %g", stats.epoch, stats.loss, stats.accuracy, lr)
        if on_epoch:
            on_epoch(stats)
    return params, history


# ---------------------------------------------------------------- folds

@dataclass
class FoldPlan:
    k: int
    assignments: np.ndarray  # sample index -> fold id

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments != fold)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.k)


def make_folds(n_samples: int, k: int, seed: int = 0, groups=None) -> FoldPlan:
    """Seeded shuffle followed by round-robin fold assignment.

    With ``groups`` (e.g. subject ids) whole groups are assigned, largest first,
    each to the currently smallest fold, so no group spans two folds.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if n_samples < k:
        raise TooFewSamplesError(f"{n_samples} samples cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    assignments = np.empty(n_samples, dtype=np.int64)
    if groups is None:
        perm = rng.permutation(n_samples)
        assignments[perm] = np.arange(n_samples) % k
        return FoldPlan(k, assignments)
    groups = np.asarray(groups)
    if len(groups) != n_samples:
        raise ValueError("groups must have one entry per sample")
    uniq, inverse = np.unique(groups, return_inverse=True)
    if len(uniq) < k:
        raise TooFewSamplesError(f"{len(uniq)} groups cannot fill {k} folds")
    sizes = np.bincount(inverse)
    order = rng.permutation(len(uniq))
    order = order[np.argsort(-sizes[order], kind="stable")]
    load = np.zeros(k, dtype=np.int64)
    group_fold = np.empty(len(uniq), dtype=np.int64)
    for gi in order:
        f = int(np.argmin(load))
        group_fold[gi] = f
        load[f] += sizes[gi]
    return FoldPlan(k, group_fold[inverse])


# ---------------------------------------------------------------- metrics

@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [true, predicted]
    class_names: list[str]

    @classmethod
    def empty(cls, class_names) -> "ConfusionMatrix":
        n = len(class_names)
        return cls(np.zeros((n, n), dtype=np.int64), list(class_names))

    @classmethod
    def from_predictions(cls, true, predicted, class_names) -> "ConfusionMatrix":
        cm = cls.empty(class_names)
        np.add.at(cm.counts, (np.asarray(true, dtype=np.int64), np.asarray(predicted, dtype=np.int64)), 1)
        return cm

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.class_names != other.class_names:
            raise ValueError("cannot add confusion matrices over different classes")
        return ConfusionMatrix(self.counts + other.counts, list(self.class_names))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else float("nan")

    def row_normalized(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)

    def per_class_accuracy(self) -> np.ndarray:
        return np.diag(self.row_normalized())

    def format(self) -> str:
        """Per-true-class percentages, rows = true class, columns = predicted."""
        pct = self.row_normalized() * 100
        width = max(8, *(len(n) for n in self.class_names)) + 1
        lines = ["true\\pred".ljust(width) + "".join(n.rjust(width) for n in self.class_names)]
        for name, row in zip(self.class_names, pct):
            lines.append(name.ljust(width) + "".join(f"{v:{width}.2f}" for v in row))
        return "\n".join(lines)

    def to_csv(self, path, percentages: bool = True) -> None:
        values = self.row_normalized() * 100 if percentages else self.counts
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["true\\predicted", *self.class_names])
            for name, row in zip(self.class_names, values):
                w.writerow([name, *(f"{v:.4f}" if percentages else int(v) for v in row)])


@dataclass
class Prediction:
    source_id: str
    true: int
    predicted: int
    probabilities: np.ndarray


@dataclass
class EvalResult:
    accuracy: float
    confusion: ConfusionMatrix
    predictions: list[Prediction]


def evaluate(g: N.NetworkGraph, params: dict[str, Tensor], dataset: LabeledDataset) -> EvalResult:
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot evaluate on an empty dataset")
    if dataset.num_classes != g.num_classes:
        raise N.ClassCountError(
            f"dataset has {dataset.num_classes} classes but the network classifies {g.num_classes}"
        )
    preds = []
    for img, label, sid in zip(dataset.images, dataset.labels, dataset.source_ids):
        probs, _ = N.forward(g, params, img)
        preds.append(Prediction(sid, int(label), L.argmax_class(probs), probs))
    cm = ConfusionMatrix.from_predictions([p.true for p in preds], [p.predicted for p in preds],
                                          dataset.class_names)
    correct = sum(p.true == p.predicted for p in preds)
    return EvalResult(correct / len(preds), cm, preds)


# ---------------------------------------------------------------- cross-validation

@dataclass
class FoldResult:
    fold: int
    train_indices: np.ndarray
    test_indices: np.ndarray
    accuracy: float
    confusion: ConfusionMatrix
    history: list[EpochStats]
    predictions: list[Prediction] = field(default_factory=list)


@dataclass
class CrossValResult:
    folds: list[FoldResult]
    plan: FoldPlan

    @property
    def fold_accuracies(self) -> list[float]:
        return [f.accuracy for f in self.folds]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.fold_accuracies))

    @property
    def confusion(self) -> ConfusionMatrix:
        """Fold confusion matrices summed; ``row_normalized()`` gives the averaged rates."""
        total = self.folds[0].confusion
        for f in self.folds[1:]:
            total = total + f.confusion
        return total


def _run_fold(g, dataset, cfg, plan, fold, train_fn):
    train_idx, test_idx = plan.train_indices(fold), plan.test_indices(fold)
    if np.intersect1d(train_idx, test_idx).size or len(train_idx) + len(test_idx) != len(dataset):
        raise AssertionError(f"fold {fold}: train/test split leaks or misses samples")
    try:
        params, history = train_fn(g, dataset.subset(train_idx), cfg)
    except DivergenceError as exc:
        raise DivergenceError(exc.epoch, exc.batch, fold) from None
    result = evaluate(g, params, dataset.subset(test_idx))
    log.info("fold %d accuracy %.4f", fold, result.accuracy)
    return FoldResult(fold, train_idx, test_idx, result.accuracy, result.confusion, history,
                      result.predictions)


def cross_validate(g: N.NetworkGraph, dataset: LabeledDataset, cfg: TrainConfig, k: int = 10,
                   by_group: bool = False, train_fn=train, jobs: int = 1) -> CrossValResult:
    """Train on k-1 folds and evaluate on the held-out fold, for every fold.

    Folds are drawn from ``cfg.seed``; ``by_group`` keeps each subject/session
    (see ``LabeledDataset.groups``) inside a single fold. ``jobs > 1`` trains
    folds in parallel processes with identical results.
    """
    plan = make_folds(len(dataset), k, cfg.seed, groups=dataset.groups() if by_group else None)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_fold, g, dataset, cfg, plan, f, train_fn) for f in range(k)]
            folds = [fu.result() for fu in futures]
    else:
        folds = [_run_fold(g, dataset, cfg, plan, f, train_fn) for f in range(k)]
    return CrossValResult(folds, plan)


# ---------------------------------------------------------------- reports

def write_metrics_csv(path, rows: list[tuple[int, EpochStats]]) -> None:
    """One row per (fold, epoch): fold, epoch, loss, accuracy, learning_rate."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "epoch", "loss", "accuracy", "learning_rate"])
        for fold, s in rows:
            w.writerow([fold, s.epoch, repr(s.loss), repr(s.accuracy), repr(s.learning_rate)])


def write_loss_table(path, rows: list[tuple[int, EpochStats]]) -> None:
    lines = [f"{'fold':>4} {'epoch':>5} {'loss':>12} {'accuracy':>9}"]
    lines += [f"{fold:>4} {s.epoch:>5} {s.loss:>12.6f} {s.accuracy:>9.4f}" for fold, s in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def write_fold_report(path, result: CrossValResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "test_size", "accuracy"])
        for f in result.folds:
            w.writerow([f.fold, len(f.test_indices), repr(f.accuracy)])


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
