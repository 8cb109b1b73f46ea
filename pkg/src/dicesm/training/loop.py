"""Mini-batch SGD with momentum, weight decay and a poly learning-rate
schedule, plus validation metrics and k-fold cross-validation.

Everything is deterministic given (dataset seed, model seed, train seed):
shuffling is the only random element, the gradient reduction order over a
batch is fixed, and evaluation is pure.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from ..core import DicesmError, LabelField, ProbField
from ..losses import ReductionSpec, batch_loss, make_loss
from ..metrics import BDiceSpec, CalibRecord, EceSpec, bdice, ece, hard_dice
from ..softlabels import SoftLabelSpec, build_labels_dataset, majority_vote, uniform_average
from .models import ModelSpec, build_model
from .synth import SynthDataset


class DivergedLossError(DicesmError):
    pass


class EmptyDatasetError(DicesmError):
    pass


class TooFewImagesError(DicesmError):
    pass


@dataclass(frozen=True)
class TrainSpec:
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    epochs: int = 30
    batch_size: int = 8
    poly_power: float = 0.9
    loss_name: str = "compound"
    loss_params: dict | None = None
    reduction: ReductionSpec = field(default_factory=ReductionSpec)
    label_source: SoftLabelSpec = field(default_factory=SoftLabelSpec)
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0 or self.epochs < 0 or self.batch_size <= 0:
            raise ValueError("lr0 must be positive, epochs >= 0, batch_size > 0")
        make_loss(self.loss_name, self.loss_params)  # fail fast on bad ids


@dataclass
class TrainResult:
    model: object
    trace: list
    final_metrics: dict


def poly_lr(lr0: float, t: int, total: int, power: float) -> float:
    """lr0 * (1 - t/total)^power; strictly decreasing, 0 at t == total."""
    if total <= 0:
        return lr0
    return lr0 * (1.0 - t / total) ** power


def foreground_class(n_classes: int) -> int:
    return 0 if n_classes == 1 else 1


def binarize(probs: ProbField) -> LabelField:
    arr = probs.array
    if probs.n_classes == 1:
        out = (arr[0] > 0.5).astype(np.float64)[None]
    else:
        winner = np.argmax(arr, axis=0)
        out = np.zeros_like(arr)
        np.put_along_axis(out, winner[None], 1.0, axis=0)
    return LabelField.from_array(out, "hard")


def evaluate(model, dataset: SynthDataset, indices=None) -> dict:
    """Dice/ECE against per-image majority votes, BDice against the uniform
    rater average, per the multi-rater evaluation protocol."""
    if indices is None:
        indices = range(len(dataset))
    fg = foreground_class(dataset.spec.n_classes)
    dices, bdices, confs, labels = [], [], [], []
    for i in indices:
        im = dataset[i]
        probs, _ = model.forward(model.prepare(im.image))
        maj = majority_vote(im.raters)
        soft = uniform_average(im.raters)
        dices.append(hard_dice(binarize(probs), maj, fg))
        bdices.append(bdice(probs, soft, BDiceSpec(), fg))
        confs.append(probs.array[fg].ravel())
        labels.append(maj.array[fg].ravel())
    record = CalibRecord(np.concatenate(confs), np.concatenate(labels))
    return {
        "dice": float(np.mean(dices)),
        "bdice": float(np.mean(bdices)),
        "ece": ece(record, EceSpec()),
        "per_image_dice": dices,
        "record": record,
    }


def _sgd_step(params, velocity, grads, lr, momentum, weight_decay):
    for name, g in grads.items():
        v = momentum * velocity[name] + g + weight_decay * params[name]
        velocity[name] = v
        params[name] -= lr * v


def run_sgd(dataset: SynthDataset, targets, model, spec: TrainSpec,
            val_dataset: SynthDataset | None = None, eval_every: int = 1,
            kd_provider=None) -> TrainResult:
    """Core loop shared by train() and distill().

    targets[i] is the supervised LabelField for image i; kd_provider, when
    given, contributes extra loss terms against a teacher signal.
    """
    n = len(dataset)
    if n == 0:
        raise EmptyDatasetError("no images")
    loss_fn = make_loss(spec.loss_name, spec.loss_params)
    red = spec.reduction
    feats = [model.prepare(im.image) for im in dataset.images]
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    batches_per_epoch = -(-n // spec.batch_size)
    total_steps = spec.epochs * batches_per_epoch
    trace = []
    t = 0
    for epoch in range(spec.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for b in range(batches_per_epoch):
            idx = order[b * spec.batch_size:(b + 1) * spec.batch_size]
            xs, caches = [], []
            for i in idx:
                probs, cache = model.forward(feats[i])
                xs.append(probs)
                caches.append(cache)
            ys = [targets[i] for i in idx]
            value, grads_x = batch_loss(loss_fn, xs, ys, red)
            grads_x = [g.as_array() for g in grads_x]
            if kd_provider is not None and kd_provider.weight > 0.0:
                kd_value, kd_grads = kd_provider.batch_terms(idx, xs, red, epoch, b)
                value += kd_provider.weight * kd_value
                grads_x = [g + kd_provider.weight * kg
                           for g, kg in zip(grads_x, kd_grads)]
            if not np.isfinite(value):
                raise DivergedLossError(f"loss {value!r} at epoch {epoch}")
            epoch_losses.append(value)
            param_grads = None
            for cache, g in zip(caches, grads_x):
                gp = model.backward(cache, g)
                if param_grads is None:
                    param_grads = gp
                else:
                    for k in param_grads:
                        param_grads[k] = param_grads[k] + gp[k]
            lr = poly_lr(spec.lr0, t, total_steps, spec.poly_power)
            _sgd_step(model.params, velocity, param_grads, lr,
                      spec.momentum, spec.weight_decay)
            t += 1
        mean_loss = float(np.mean(epoch_losses))
        is_last = epoch == spec.epochs - 1
        if eval_every and (is_last or (epoch + 1) % eval_every == 0):
            ds = val_dataset if val_dataset is not None else dataset
            split = "val" if val_dataset is not None else "train"
            m = evaluate(model, ds)
            trace.append({"epoch": epoch, "split": split, "dice": m["dice"],
                          "bdice": m["bdice"], "ece": m["ece"], "loss": mean_loss})
        else:
            trace.append({"epoch": epoch, "split": "train", "dice": float("nan"),
                          "bdice": float("nan"), "ece": float("nan"),
                          "loss": mean_loss})
    ds = val_dataset if val_dataset is not None else dataset
    return TrainResult(model, trace, evaluate(model, ds))


def build_targets(dataset: SynthDataset, spec: SoftLabelSpec):
    return build_labels_dataset(dataset.stacks(), spec)


def train(dataset: SynthDataset, model_spec: ModelSpec, train_spec: TrainSpec,
          val_dataset: SynthDataset | None = None, eval_every: int = 1) -> TrainResult:
    """Supervised training with targets built per train_spec.label_source."""
    model = build_model(model_spec)
    targets = build_targets(dataset, train_spec.label_source)
    return run_sgd(dataset, targets, model, train_spec, val_dataset, eval_every)


def subset(dataset: SynthDataset, indices) -> SynthDataset:
    return SynthDataset(dataset.spec, tuple(dataset.images[i] for i in indices))


def crossval_folds(n: int, k_folds: int, seed: int):
    """Seeded shuffle chopped into k contiguous folds covering every index."""
    if n < k_folds:
        raise TooFewImagesError(f"{n} images cannot fill {k_folds} folds")
    order = np.random.default_rng(np.random.SeedSequence([seed, k_folds])).permutation(n)
    return [np.sort(chunk) for chunk in np.array_split(order, k_folds)]


def crossval(dataset: SynthDataset, model_spec: ModelSpec, train_spec: TrainSpec,
             k_folds: int = 5, seed: int | None = None, eval_every: int = 0,
             train_fn=None) -> dict:
    """k-fold cross-validation; each image lands in exactly one validation
    fold; metrics aggregate over the union of validation predictions.

    train_fn(train_subset, val_subset) may override the default train() to
    reuse the folds for distillation arms.
    """
    seed = train_spec.seed if seed is None else seed
    folds = crossval_folds(len(dataset), k_folds, seed)
    per_image_dice = []
    per_image_bdice = []
    records = []
    per_fold = []
    for fold_idx, val_idx in enumerate(folds):
        train_idx = np.setdiff1d(np.arange(len(dataset)), val_idx)
        tr, va = subset(dataset, train_idx), subset(dataset, val_idx)
        if train_fn is None:
            result = train(tr, model_spec, train_spec, va, eval_every)
        else:
            result = train_fn(tr, va)
        m = result.final_metrics
        per_image_dice.extend(m["per_image_dice"])
        per_image_bdice.append(m["bdice"] * len(val_idx))
        records.append(m["record"])
        per_fold.append({"fold": fold_idx, "dice": m["dice"],
                         "bdice": m["bdice"], "ece": m["ece"]})
    pooled = CalibRecord.concat(records)
    return {
        "dice": float(np.mean(per_image_dice)),
        "bdice": float(np.sum(per_image_bdice) / len(dataset)),
        "ece": ece(pooled, EceSpec()),
        "folds": per_fold,
        "fold_indices": [f.tolist() for f in folds],
        "per_image_dice": per_image_dice,
    }


def write_trace_csv(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "split", "dice",
                                                "bdice", "ece", "loss"])
        writer.writeheader()
        for row in trace:
            writer.writerow(row)
