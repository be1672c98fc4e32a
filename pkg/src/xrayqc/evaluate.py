"""Confusion counts, balanced accuracy and leave-one-batch-out cross-validation.

Abnormal is the positive class throughout.
"""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .augment import AugmentConfig
from .convert import ConversionMethod, GlobalBounds, bounds_from_percentiles, image_percentile_bounds
from .errors import ConfigurationError
from .imageio import load_pgm16
from .model import BackboneSpec, FeatureExtractor, TrainConfig, predict_records, train
from .synth import DatasetIndex, Label

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def undefined_rate(self) -> bool:
        """True when TPR or TNR has a zero denominator (one class absent)."""
        return self.tp + self.fn == 0 or self.tn + self.fp == 0


def confusion(predictions: Sequence, labels: Sequence) -> ConfusionCounts:
    if len(predictions) != len(labels):
        raise ValueError(f"{len(predictions)} predictions for {len(labels)} labels")
    if not len(labels):
        raise ValueError("need at least one prediction")
    pred = np.array([int(getattr(p, "label", p)) for p in predictions])
    true = np.array([int(t) for t in labels])
    pos = Label.ABNORMAL
    return ConfusionCounts(
        tp=int(np.sum((pred == pos) & (true == pos))),
        fp=int(np.sum((pred == pos) & (true != pos))),
        tn=int(np.sum((pred != pos) & (true != pos))),
        fn=int(np.sum((pred != pos) & (true == pos))),
    )


def _rate(num: int, den: int) -> float:
    # zero denominators score 0; callers see ConfusionCounts.undefined_rate
    return num / den if den else 0.0


def tpr(c: ConfusionCounts) -> float:
    return _rate(c.tp, c.tp + c.fn)


def tnr(c: ConfusionCounts) -> float:
    return _rate(c.tn, c.tn + c.fp)


def balanced_accuracy(c: ConfusionCounts) -> float:
    return (tpr(c) + tnr(c)) / 2


def accuracy(c: ConfusionCounts) -> float:
    return _rate(c.tp + c.tn, c.total)


@dataclass(frozen=True)
class FoldResult:
    held_out_batch: int
    counts: ConfusionCounts
    balanced_accuracy: float
    bounds: GlobalBounds | None = None
    degenerate: bool = False  # single-class training split, scored by the trivial rule


@dataclass(frozen=True)
class CvReport:
    method: int
    folds: tuple[FoldResult, ...]

    @property
    def combined_counts(self) -> ConfusionCounts:
        total = ConfusionCounts()
        for f in self.folds:
            total = total + f.counts
        return total

    @property
    def combined_balanced_accuracy(self) -> float:
        return balanced_accuracy(self.combined_counts)


def training_bounds(index: DatasetIndex, train_batches, extractor=None) -> GlobalBounds:
    """Global bounds estimated from the training batches only."""
    cached = getattr(extractor, "percentile_bounds", None)
    if cached is None:
        # precomputed feature tables keep no images, so read them from disk
        def cached(r):
            return image_percentile_bounds(load_pgm16(index.image_path(r)))
    return bounds_from_percentiles(cached(r) for r in index.select(train_batches))


def _fold_seed(seed: int, batch: int) -> int:
    return int(np.random.SeedSequence([seed, batch]).generate_state(1)[0])


def run_fold(index: DatasetIndex, held_out: int, method_number: int, cfg: TrainConfig, aug: AugmentConfig,
             extractor) -> FoldResult:
    train_batches = [b for b in index.batch_ids if b != held_out]
    bounds = None
    if method_number in (2, 4):
        bounds = training_bounds(index, train_batches, extractor)
    method = ConversionMethod.from_number(method_number, bounds)
    test = index.select([held_out])
    labels = [r.label for r in test]
    train_labels = {r.label for r in index.select(train_batches)}
    if len(train_labels) < 2:
        # nothing to learn: predict the only class seen in training
        only = train_labels.pop()
        counts = confusion([only] * len(test), labels)
        log.warning("fold %d: single-class training split, predicting %s", held_out, only.token)
        return FoldResult(held_out, counts, balanced_accuracy(counts), bounds, degenerate=True)
    fold_cfg = replace(cfg, seed=_fold_seed(cfg.seed, held_out))
    fold_aug = replace(aug, seed=_fold_seed(aug.seed, held_out))
    result = train(index, train_batches, method, fold_cfg, fold_aug, extractor=extractor)
    preds = predict_records(test, method, result.params, extractor)
    counts = confusion(preds, labels)
    log.info("fold %d: %s BA=%.4f", held_out, counts, balanced_accuracy(counts))
    return FoldResult(held_out, counts, balanced_accuracy(counts), bounds)


def crossval_lobo(index: DatasetIndex, method: int | ConversionMethod, cfg: TrainConfig, aug: AugmentConfig,
                  *, spec: BackboneSpec | None = None, extractor=None, jobs: int = 1) -> CvReport:
    """Leave-one-batch-out cross-validation for one conversion method.

    For methods 2 and 4 the global bounds of each fold come from that fold's
    training batches (any bounds carried by ``method`` are ignored).  Fold
    seeds derive from ``cfg.seed``/``aug.seed`` and the held-out batch, so
    results do not depend on fold order or ``jobs``.
    """
    number = method.number if isinstance(method, ConversionMethod) else int(method)
    if number not in (1, 2, 3, 4):
        raise ValueError(f"conversion method must be 1-4, got {number}")
    batches = index.batch_ids
    if len(batches) < 2:
        raise ConfigurationError("leave-one-batch-out needs at least two batches")
    if extractor is None:
        extractor = FeatureExtractor(index, spec or BackboneSpec(), aug)
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            folds = list(pool.map(lambda b: run_fold(index, b, number, cfg, aug, extractor), batches))
    else:
        folds = [run_fold(index, b, number, cfg, aug, extractor) for b in batches]
    return CvReport(number, tuple(folds))


def _pct(x: float) -> str:
    return f"{100 * x:.2f}"


def report(cv: CvReport, path: str | os.PathLike) -> None:
    """Per-fold rows plus an ``overall`` row from the summed counts; BA in percent."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["batch", "tp", "fp", "tn", "fn", "balanced_accuracy"])
        for f in cv.folds:
            c = f.counts
            w.writerow([f.held_out_batch, c.tp, c.fp, c.tn, c.fn, _pct(f.balanced_accuracy)])
        c = cv.combined_counts
        w.writerow(["overall", c.tp, c.fp, c.tn, c.fn, _pct(cv.combined_balanced_accuracy)])


def comparison(reports: Sequence[CvReport], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "tp", "fp", "tn", "fn", "combined_balanced_accuracy"])
        for r in reports:
            c = r.combined_counts
            w.writerow([r.method, c.tp, c.fp, c.tn, c.fn, _pct(r.combined_balanced_accuracy)])


def read_report(path: str | os.PathLike) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
