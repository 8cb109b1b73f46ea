"""Teacher -> student distillation with optional KDE recalibration of the
teacher signal.

The student minimizes its supervised loss plus kd_weight times CE and/or
dml1 terms computed against the teacher's per-pixel probabilities. With
use_kde, key points are drawn per batch from the teacher's own predictions
paired with the hard reference labels, and the teacher probabilities at
in-scope pixels are replaced by the kernel estimate of E[y | f] before the
distillation terms see them.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..calibration import KdeSpec, kde_calibrate_batch, sample_key_points, select_scope_pixels
from ..core import LabelField, ProbField
from ..losses import batch_loss, ce as ce_loss, dml1 as dml1_loss
from ..softlabels import majority_vote
from .loop import TrainResult, TrainSpec, build_targets, run_sgd
from .models import CheckpointMismatchError, ModelSpec, build_model
from .synth import SynthDataset

KD_TERMS = ("ce", "dml", "both")


@dataclass(frozen=True)
class KdSpec:
    teacher_checkpoint: str | None = None
    use_kde: bool = False
    kde: KdeSpec = field(default_factory=KdeSpec)
    kd_weight: float = 1.0
    kd_terms: str = "both"

    def __post_init__(self):
        if self.kd_weight < 0:
            raise ValueError("kd_weight must be nonnegative")
        if self.kd_terms not in KD_TERMS:
            raise ValueError(f"kd_terms must be one of {KD_TERMS}")


class TeacherSignal:
    """Per-batch provider of distillation targets and their gradients."""

    def __init__(self, dataset: SynthDataset, teacher, kd_spec: KdSpec):
        self.kd_spec = kd_spec
        self.weight = kd_spec.kd_weight
        self.n_classes = dataset.spec.n_classes
        self.teacher_probs = []
        self.hard_refs = []
        self.scopes = []
        for im in dataset.images:
            probs, _ = teacher.forward(teacher.prepare(im.image))
            if probs.n_classes != self.n_classes:
                raise CheckpointMismatchError(
                    f"teacher emits {probs.n_classes} classes, task has {self.n_classes}")
            maj = majority_vote(im.raters)
            self.teacher_probs.append(probs)
            self.hard_refs.append(maj)
            if kd_spec.use_kde and kd_spec.kde.pixel_scope != "all":
                self.scopes.append(select_scope_pixels(probs, maj, kd_spec.kde))
            else:
                self.scopes.append(None)

    def _rows(self, i):
        """Confidence and label rows of image i, shaped (pixels, columns)."""
        p = self.teacher_probs[i].array
        y = self.hard_refs[i].array
        c = p.shape[0]
        return p.reshape(c, -1).T, y.reshape(c, -1).T

    def _signal_fields(self, idx, epoch, batch_idx):
        if not self.kd_spec.use_kde:
            return [LabelField(self.teacher_probs[i].tensor, "soft") for i in idx]
        conf_rows = []
        lab_rows = []
        for i in idx:
            cr, lr = self._rows(i)
            conf_rows.append(cr)
            lab_rows.append(lr)
        pool_conf = np.concatenate(conf_rows)
        pool_lab = np.concatenate(lab_rows)
        seed = int(np.random.SeedSequence(
            [self.kd_spec.kde.seed, epoch, batch_idx]).generate_state(1)[0])
        keys = sample_key_points(pool_conf, pool_lab,
                                 replace(self.kd_spec.kde, seed=seed))
        fields = []
        for i, cr in zip(idx, conf_rows):
            scope = self.scopes[i]
            if scope is None:
                out = kde_calibrate_batch(cr, keys, self.kd_spec.kde.bandwidth)
            else:
                out = cr.copy()
                if scope.size:
                    out[scope] = kde_calibrate_batch(cr[scope], keys,
                                                     self.kd_spec.kde.bandwidth)
            arr = out.T.reshape(self.teacher_probs[i].dims)
            fields.append(LabelField.from_array(np.clip(arr, 0.0, 1.0), "soft"))
        return fields

    def batch_terms(self, idx, student_probs, red, epoch, batch_idx):
        """KD loss value and per-image gradients for one batch."""
        signals = self._signal_fields(idx, epoch, batch_idx)
        terms = []
        if self.kd_spec.kd_terms in ("ce", "both"):
            terms.append(ce_loss)
        if self.kd_spec.kd_terms in ("dml", "both"):
            terms.append(dml1_loss)
        value = 0.0
        grads = [np.zeros(x.dims) for x in student_probs]
        for fn in terms:
            v, g = batch_loss(fn, student_probs, signals, red)
            value += v
            grads = [acc + t.as_array() for acc, t in zip(grads, g)]
        return value, grads


def distill(dataset: SynthDataset, teacher, student_spec: ModelSpec,
            train_spec: TrainSpec, kd_spec: KdSpec,
            val_dataset: SynthDataset | None = None,
            eval_every: int = 1) -> TrainResult:
    """Train a student against ground truth plus the teacher signal.

    kd_weight == 0 reduces exactly to plain train() with the same seeds.
    """
    student = build_model(student_spec)
    targets = build_targets(dataset, train_spec.label_source)
    provider = TeacherSignal(dataset, teacher, kd_spec) if kd_spec.kd_weight > 0 else None
    return run_sgd(dataset, targets, student, train_spec, val_dataset,
                   eval_every, kd_provider=provider)
