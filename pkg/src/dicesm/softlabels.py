"""Training-target construction from multi-rater stacks: majority vote,
random rater selection, uniform and Dice-weighted averaging, and label
smoothing. All outputs validate as LabelFields (range + simplex).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import (
    DicesmError,
    EmptyStackError,
    LabelField,
    RaterStack,
    validate,
)
from .metrics import hard_dice

STRATEGIES = ("majority", "random_rater", "uniform_avg", "weighted_avg",
              "label_smoothing")

TIE_LOWEST = "lowest_class"
TIE_BACKGROUND = "background"


class BadEpsilonError(DicesmError):
    pass


class AllZeroWeightsWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SoftLabelSpec:
    """Which strategy builds the targets, plus its knobs.

    epsilon applies to label_smoothing only, seed to random_rater only.
    weights_scope picks per_image (default) or per_dataset Dice weights for
    weighted_avg.
    """

    strategy: str = "uniform_avg"
    epsilon: float = 0.1
    seed: int = 0
    tie_break: str = TIE_BACKGROUND
    weights_scope: str = "per_image"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.tie_break not in (TIE_LOWEST, TIE_BACKGROUND):
            raise ValueError(f"unknown tie_break {self.tie_break!r}")
        if self.weights_scope not in ("per_image", "per_dataset"):
            raise ValueError(f"unknown weights_scope {self.weights_scope!r}")
        if self.strategy == "label_smoothing" and not 0.0 <= self.epsilon < 1.0:
            raise BadEpsilonError(f"epsilon {self.epsilon!r} outside [0, 1)")


def _stack_votes(stack: RaterStack) -> np.ndarray:
    """Per-class vote counts, shape (C, H, W)."""
    return np.sum([r.array for r in stack.raters], axis=0)


def majority_vote(stack: RaterStack, tie_break: str = TIE_BACKGROUND) -> LabelField:
    """Per pixel, the class backed by the most raters.

    Binary (C == 1) ties go to background under either rule; for C >= 2,
    lowest_class picks the smallest tied index and background prefers class
    0 whenever it is among the tied leaders.
    """
    if tie_break not in (TIE_LOWEST, TIE_BACKGROUND):
        raise ValueError(f"unknown tie_break {tie_break!r}")
    votes = _stack_votes(stack)
    k = len(stack)
    if stack.dims[0] == 1:
        fg = votes[0] > k / 2.0  # ties (== k/2) resolve to background
        out = fg.astype(np.float64)[None]
    else:
        winner = np.argmax(votes, axis=0)
        if tie_break == TIE_BACKGROUND:
            winner = np.where(votes[0] == votes.max(axis=0), 0, winner)
        out = np.zeros_like(votes)
        np.put_along_axis(out, winner[None], 1.0, axis=0)
    field = LabelField.from_array(out, "hard")
    validate(field)
    return field


def random_rater(stack: RaterStack, seed: int) -> LabelField:
    """One whole rater chosen uniformly by the seed (per image, not per pixel)."""
    u = np.random.default_rng(seed).random()
    idx = min(int(u * len(stack)), len(stack) - 1)
    return stack.raters[idx]


def uniform_average(stack: RaterStack) -> LabelField:
    """Per pixel-class mean over raters; values land on {0, 1/K, ..., 1}."""
    k = len(stack)
    avg = _stack_votes(stack) / k
    hardness = "hard" if np.all((avg == 0.0) | (avg == 1.0)) else "soft"
    field = LabelField.from_array(avg, hardness)
    validate(field)
    return field


def rater_weights(stack: RaterStack, tie_break: str = TIE_BACKGROUND) -> np.ndarray:
    """Dice of each rater against the majority vote, averaged over classes."""
    maj = majority_vote(stack, tie_break)
    c = stack.dims[0]
    return np.array([np.mean([hard_dice(r, maj, ci) for ci in range(c)])
                     for r in stack.raters])


def _weighted_combine(stack: RaterStack, weights: np.ndarray) -> LabelField:
    total = float(np.sum(weights))
    if total == 0.0:
        warnings.warn("every rater has Dice 0 against the majority vote; "
                      "falling back to uniform weights", AllZeroWeightsWarning)
        weights = np.ones(len(stack))
        total = float(len(stack))
    w = weights / total
    avg = np.sum([wi * r.array for wi, r in zip(w, stack.raters)], axis=0)
    avg = np.clip(avg, 0.0, 1.0)
    hardness = "hard" if np.all((avg == 0.0) | (avg == 1.0)) else "soft"
    field = LabelField.from_array(avg, hardness)
    validate(field)
    return field


def weighted_average(stack: RaterStack, tie_break: str = TIE_BACKGROUND) -> LabelField:
    """Average raters weighted by their Dice against the majority vote.

    Weights are normalized to sum 1; a rater far from the majority gets a
    low weight. If every weight is 0 the combine falls back to uniform and
    warns.
    """
    return _weighted_combine(stack, rater_weights(stack, tie_break))


def weighted_average_dataset(stacks, tie_break: str = TIE_BACKGROUND):
    """Per-dataset variant: one weight vector per rater index, computed from
    summed intersections/sizes over all images, then applied to every stack.

    Requires every stack to carry the same rater count.
    """
    stacks = list(stacks)
    if not stacks:
        raise EmptyStackError("no stacks")
    k = len(stacks[0])
    if any(len(s) != k for s in stacks):
        raise ValueError("per_dataset weighting needs a common rater count")
    inter = np.zeros(k)
    sizes = np.zeros(k)
    for s in stacks:
        maj = majority_vote(s, tie_break).array
        for i, r in enumerate(s.raters):
            inter[i] += np.count_nonzero((r.array == 1.0) & (maj == 1.0))
            sizes[i] += np.count_nonzero(r.array == 1.0) + np.count_nonzero(maj == 1.0)
    with np.errstate(invalid="ignore"):
        weights = np.where(sizes > 0, 2.0 * inter / np.where(sizes > 0, sizes, 1.0), 1.0)
    return [_weighted_combine(s, weights) for s in stacks]


def label_smoothing(y: LabelField, epsilon: float) -> LabelField:
    """Affine shrink toward the uniform class distribution.

    C >= 2: y' = (1 - eps) * y + eps / C. C == 1 treats the field as the
    foreground half of a two-class pair: y' = (1 - eps) * y + eps / 2.
    eps == 0 is the identity (and stays hard).
    """
    if not 0.0 <= epsilon < 1.0:
        raise BadEpsilonError(f"epsilon {epsilon!r} outside [0, 1)")
    validate(y)
    c = y.n_classes
    uniform = 0.5 if c == 1 else 1.0 / c
    arr = (1.0 - epsilon) * y.array + epsilon * uniform
    hardness = y.hardness if epsilon == 0.0 else "soft"
    out = LabelField.from_array(arr, hardness)
    validate(out)
    return out


def build_labels(stack: RaterStack, spec: SoftLabelSpec) -> LabelField:
    """Dispatch one image's stack through the configured strategy."""
    if spec.strategy == "majority":
        return majority_vote(stack, spec.tie_break)
    if spec.strategy == "random_rater":
        return random_rater(stack, spec.seed)
    if spec.strategy == "uniform_avg":
        return uniform_average(stack)
    if spec.strategy == "weighted_avg":
        return weighted_average(stack, spec.tie_break)
    return label_smoothing(majority_vote(stack, spec.tie_break), spec.epsilon)


def build_labels_dataset(stacks, spec: SoftLabelSpec):
    """Targets for a whole dataset; honors per_dataset weighting and gives
    random_rater a distinct per-image seed stream."""
    stacks = list(stacks)
    if spec.strategy == "weighted_avg" and spec.weights_scope == "per_dataset":
        return weighted_average_dataset(stacks, spec.tie_break)
    if spec.strategy == "random_rater":
        seeds = np.random.SeedSequence(spec.seed).generate_state(len(stacks))
        return [random_rater(s, int(seed)) for s, seed in zip(stacks, seeds)]
    return [build_labels(s, spec) for s in stacks]
