"""Pixel-level evaluation: confusion counts, accuracy, precision/recall/F1,
the F1-equals-Dice identity, and the F1-vs-threshold sweep.

Thresholding is strict (predicted positive iff p_hat > threshold) and
every 0/0 ratio is defined as 0, so empty masks and empty predictions
produce well-defined numbers instead of NaN.
"""

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from . import model as model_mod
from .errors import DataError, DomainError, ShapeError
from .shards import batch_iterator
from .tensor import Tensor

SWEEP_CSV_HEADER = "threshold,precision,recall,f1,binary_accuracy"
DEFAULT_GRID = tuple(round(0.05 * k, 2) for k in range(1, 20))   # 0.05 .. 0.95


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def add(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


def _as_array(t):
    return t.data if isinstance(t, Tensor) else np.asarray(t)


def confusion(p, p_hat, threshold: float) -> ConfusionCounts:
    """Count pixels; prediction is positive iff p_hat > threshold (strict)."""
    if not 0.0 < threshold < 1.0:
        raise DomainError(f"threshold must be in (0,1), got {threshold}")
    pd = _as_array(p)
    qd = _as_array(p_hat)
    if pd.shape != qd.shape:
        raise ShapeError(f"shape mismatch: {pd.shape} vs {qd.shape}")
    if not np.all((pd == 0) | (pd == 1)):
        raise DomainError("ground truth must be binary")
    truth = pd != 0
    pred = qd > threshold
    tp = int(np.count_nonzero(truth & pred))
    fp = int(np.count_nonzero(~truth & pred))
    fn = int(np.count_nonzero(truth & ~pred))
    tn = pd.size - tp - fp - fn
    return ConfusionCounts(tp, fp, tn, fn)


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def binary_accuracy(counts: ConfusionCounts) -> float:
    return _ratio(counts.tp + counts.tn, counts.total)


def precision_recall_f1(counts: ConfusionCounts) -> Tuple[float, float, float]:
    precision = _ratio(counts.tp, counts.tp + counts.fp)
    recall = _ratio(counts.tp, counts.tp + counts.fn)
    f1 = _ratio(2 * precision * recall, precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def f1_equals_dice_check(p, p_hat_binary) -> Tuple[float, float]:
    """Evaluate F1 and the Dice coefficient 2|A∩B|/(|A|+|B|) on binary masks.

    On binary inputs the two are algebraically the same number (and the
    squared-norm denominator changes nothing, since x² = x on {0,1}).
    """
    pd = _as_array(p)
    qd = _as_array(p_hat_binary)
    if pd.shape != qd.shape:
        raise ShapeError(f"shape mismatch: {pd.shape} vs {qd.shape}")
    if not np.all((qd == 0) | (qd == 1)):
        raise DomainError("p_hat must be binary for the F1/Dice identity")
    counts = confusion(pd, qd.astype(np.float64), 0.5)
    _, _, f1 = precision_recall_f1(counts)
    inter = int(np.count_nonzero((pd != 0) & (qd != 0)))
    size_sum = int(np.count_nonzero(pd)) + int(np.count_nonzero(qd))
    dice = _ratio(2 * inter, size_sum)
    return f1, dice


@dataclass
class SweepResult:
    rows: List[Tuple[float, float, float, float, float]]
    # each row: (threshold, precision, recall, f1, binary_accuracy)

    def best_threshold(self) -> float:
        return max(self.rows, key=lambda r: r[3])[0]


def sweep_counts(p, p_hat, thresholds) -> List[ConfusionCounts]:
    return [confusion(p, p_hat, t) for t in thresholds]


def threshold_sweep(graph, params, shard_paths, thresholds=DEFAULT_GRID,
                    batch_size: int = 128) -> SweepResult:
    """One inference pass over the shards, confusion accumulated per threshold."""
    thresholds = list(thresholds)
    if not thresholds:
        raise DomainError("empty threshold grid")
    if any(t2 <= t1 for t1, t2 in zip(thresholds, thresholds[1:])):
        raise DomainError("thresholds must be strictly increasing")
    totals = [ConfusionCounts() for _ in thresholds]
    seen = False
    stream = batch_iterator(shard_paths, batch_size=batch_size, shuffle=False)
    for x, labels in stream:
        seen = True
        y, _ = model_mod.forward(graph, params, x, training=False)
        for i, counts in enumerate(sweep_counts(labels, y, thresholds)):
            totals[i] = totals[i].add(counts)
    if not seen:
        raise DataError("threshold sweep over an empty eval set")
    rows = []
    for t, counts in zip(thresholds, totals):
        precision, recall, f1 = precision_recall_f1(counts)
        rows.append((float(t), precision, recall, f1, binary_accuracy(counts)))
    return SweepResult(rows)


def write_sweep_csv(path, result: SweepResult):
    # plain joins, not the csv module: values are repr(float) with no
    # escaping needs, and the byte format (\n line ends) is contractual
    with open(path, "w", newline="") as f:
        f.write(SWEEP_CSV_HEADER + "\n")
        for row in result.rows:
            f.write(",".join(repr(float(v)) for v in row) + "\n")
