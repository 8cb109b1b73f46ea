"""Evaluation metrics: set-based hard Dice, Dice/IoU conversions, binarized
Dice over threshold sweeps, and binned expected calibration error.

hard_dice counts set memberships with integers and is the independent oracle
for the overlap losses (1 - sdl on hard pairs must match it exactly).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    DicesmError,
    LabelField,
    ProbField,
    OutOfRangeError,
    ShapeMismatchError,
    check_same_dims,
    validate,
)
from . import losses as _losses

DEFAULT_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


class SoftInputError(DicesmError):
    pass


class EmptyRecordsError(DicesmError):
    pass


@dataclass(frozen=True)
class EceSpec:
    """Equal-width binning of foreground confidence, pooled over pixels."""

    n_bins: int = 15
    binning: str = "equal_width"
    scope: str = "foreground_prob"

    def __post_init__(self):
        if self.n_bins <= 0:
            raise ValueError("n_bins must be positive")
        if self.binning != "equal_width":
            raise ValueError(f"unknown binning {self.binning!r}")
        if self.scope != "foreground_prob":
            raise ValueError(f"unknown scope {self.scope!r}")


@dataclass(frozen=True)
class BDiceSpec:
    """Joint thresholding levels for prediction and soft label."""

    thresholds: tuple = DEFAULT_THRESHOLDS
    empty_both_dice: float = 1.0

    def __post_init__(self):
        t = tuple(float(v) for v in self.thresholds)
        if not t or any(not 0.0 < v < 1.0 for v in t):
            raise ValueError("thresholds must lie strictly inside (0, 1)")
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("thresholds must be strictly increasing")
        object.__setattr__(self, "thresholds", t)


@dataclass(frozen=True)
class CalibRecord:
    """Flattened (confidence, binary label) pairs."""

    confidences: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        conf = np.asarray(self.confidences, dtype=np.float64).reshape(-1)
        lab = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        if conf.size != lab.size:
            raise ShapeMismatchError("confidences and labels differ in length")
        if conf.size and (conf.min() < 0.0 or conf.max() > 1.0):
            raise OutOfRangeError("confidences outside [0, 1]")
        if not np.all((lab == 0.0) | (lab == 1.0)):
            raise SoftInputError("labels must be 0 or 1")
        conf.flags.writeable = False
        lab.flags.writeable = False
        object.__setattr__(self, "confidences", conf)
        object.__setattr__(self, "labels", lab)

    def __len__(self):
        return self.confidences.size

    @classmethod
    def concat(cls, records) -> "CalibRecord":
        return cls(np.concatenate([r.confidences for r in records]),
                   np.concatenate([r.labels for r in records]))


def _count_dice(a: np.ndarray, b: np.ndarray, empty_both: float) -> float:
    na, nb = int(np.count_nonzero(a)), int(np.count_nonzero(b))
    if na + nb == 0:
        return float(empty_both)
    inter = int(np.count_nonzero(a & b))
    return 2.0 * inter / (na + nb)


def hard_dice(a: LabelField, b: LabelField, class_idx: int = 0,
              empty_both: float = 1.0) -> float:
    """Set-based Dice 2|A∩B| / (|A|+|B|) for one class, by integer counting."""
    check_same_dims(a, b)
    if not (a.is_hard and b.is_hard):
        raise SoftInputError("hard_dice requires hard labels on both sides")
    validate(a)
    validate(b)
    if not 0 <= class_idx < a.n_classes:
        raise ShapeMismatchError(f"class {class_idx} outside 0..{a.n_classes - 1}")
    return _count_dice(a.array[class_idx] == 1.0, b.array[class_idx] == 1.0, empty_both)


def dice_from_iou(iou: float) -> float:
    """Monotone bijection 2*IoU / (1 + IoU) of [0, 1]."""
    if not 0.0 <= iou <= 1.0:
        raise OutOfRangeError(f"iou {iou!r} outside [0, 1]")
    return 2.0 * iou / (1.0 + iou)


def iou_from_dice(d: float) -> float:
    """Inverse of dice_from_iou: d / (2 - d)."""
    if not 0.0 <= d <= 1.0:
        raise OutOfRangeError(f"dice {d!r} outside [0, 1]")
    return d / (2.0 - d)


def bdice(x: ProbField, y: LabelField, spec: BDiceSpec | None = None,
          class_idx: int = 0) -> float:
    """Mean Dice over joint binarizations of prediction and (soft) label.

    Both maps are thresholded with strict `> t` at every level of the spec
    and scored with set-based Dice; levels where both maps come up empty
    count spec.empty_both_dice.
    """
    spec = spec or BDiceSpec()
    check_same_dims(x, y)
    validate(x)
    validate(y)
    xa = x.array[class_idx]
    ya = y.array[class_idx]
    scores = [_count_dice(xa > t, ya > t, spec.empty_both_dice)
              for t in spec.thresholds]
    return float(np.mean(scores))


def ece(records: CalibRecord, spec: EceSpec | None = None) -> float:
    """Binned expected calibration error sum_b (n_b/n) |acc_b - conf_b|."""
    spec = spec or EceSpec()
    n = len(records)
    if n == 0:
        raise EmptyRecordsError("no calibration records")
    conf = records.confidences
    idx = np.minimum((conf * spec.n_bins).astype(np.int64), spec.n_bins - 1)
    counts = np.bincount(idx, minlength=spec.n_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=spec.n_bins)
    acc_sum = np.bincount(idx, weights=records.labels, minlength=spec.n_bins)
    occupied = counts > 0
    gaps = np.abs(acc_sum[occupied] - conf_sum[occupied]) / counts[occupied]
    return float(np.sum(counts[occupied] * gaps) / n)


def soft_dice_score(x: ProbField, y: LabelField,
                    red: _losses.ReductionSpec | None = None) -> float:
    """Validation-time Dice: 1 - sdl value (y must be hard)."""
    if not y.is_hard:
        raise SoftInputError("soft_dice_score requires a hard reference")
    return 1.0 - _losses.sdl(x, y, red).value
