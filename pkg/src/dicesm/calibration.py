"""Kernel-density recalibration of predicted probabilities.

The estimator of the conditional label mean at a confidence f is

    E_hat[y | f] = sum_i k(f, f_i) y_i / sum_i k(f, f_i)

over sampled key points (f_i, y_i), with a Beta kernel in the binary case
and a Dirichlet kernel for C >= 2; the kernel concentration follows
alpha = f_i / h + 1 per class (beta = (1 - f_i) / h + 1 for Beta), so a
smaller bandwidth h concentrates mass around f_i. All kernel evaluation
happens in log space with a per-pixel max subtraction: the densities
overflow float64 already at h = 1e-3.

Also here: class-stratified key-point sampling, restriction of the
calibrated set to misclassified/boundary pixels, and an exact verifier for
the bound |bias| <= calibration error on finite distributions.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.ndimage import maximum_filter, minimum_filter
from scipy.special import gammaln, xlogy

from .core import (
    DicesmError,
    LabelField,
    NonFiniteError,
    ProbField,
    SIMPLEX_TOL,
    ShapeMismatchError,
    SimplexViolationError,
    check_same_dims,
    validate,
)
from .metrics import SoftInputError

SCOPE_ALL = "all"
SCOPE_BOUNDARY = "misclassified_and_boundary"

# logical kernel evaluations performed so far; one per (pixel, key) pair.
# The complexity contract is Theta(n_pixels * n_key) and tests pin it.
kernel_eval_count = 0


def reset_kernel_eval_count() -> None:
    global kernel_eval_count
    kernel_eval_count = 0


class EmptyBatchError(DicesmError):
    pass


class InvalidDistributionError(DicesmError):
    pass


class DegenerateWeightsWarning(UserWarning):
    pass


@dataclass(frozen=True)
class KdeSpec:
    """Bandwidth, key-point budget, pixel scope and sampling seed."""

    bandwidth: float = 1e-3
    n_key: int = 128
    pixel_scope: str = SCOPE_ALL
    boundary_radius: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.n_key <= 0:
            raise ValueError("n_key must be positive")
        if self.pixel_scope not in (SCOPE_ALL, SCOPE_BOUNDARY):
            raise ValueError(f"unknown pixel_scope {self.pixel_scope!r}")
        if self.boundary_radius <= 0:
            raise ValueError("boundary_radius must be positive")


@dataclass(frozen=True)
class KeyPointSet:
    """Sampled (confidence row, label row) pairs plus their flat provenance."""

    confidences: np.ndarray  # (n, C)
    labels: np.ndarray       # (n, C)
    provenance: np.ndarray   # (n,) flat indices into the source batch

    def __post_init__(self):
        conf = np.atleast_2d(np.asarray(self.confidences, dtype=np.float64))
        lab = np.atleast_2d(np.asarray(self.labels, dtype=np.float64))
        prov = np.asarray(self.provenance, dtype=np.int64).reshape(-1)
        if conf.shape != lab.shape or conf.shape[0] != prov.size:
            raise ShapeMismatchError("confidences, labels and provenance disagree")
        if conf.shape[0] == 0:
            raise EmptyBatchError("a KeyPointSet needs at least one point")
        for a in (conf, lab, prov):
            a.flags.writeable = False
        object.__setattr__(self, "confidences", conf)
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "provenance", prov)

    def __len__(self):
        return self.confidences.shape[0]

    @property
    def n_classes(self):
        return self.confidences.shape[1]


# --------------------------------------------------------------------------
# Kernels
# --------------------------------------------------------------------------

def _check_unit(name, v):
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)) or v.min() < 0.0 or v.max() > 1.0:
        raise NonFiniteError(f"{name} outside [0, 1]")
    return v


def log_beta_kernel(fj, fi, h: float):
    """Log Beta(alpha_i, beta_i) density at fj, alpha_i = fi/h + 1,
    beta_i = (1 - fi)/h + 1. Broadcasts over arrays; -inf where the density
    vanishes at the endpoints."""
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    fj = _check_unit("fj", fj)
    fi = _check_unit("fi", fi)
    a = fi / h + 1.0
    b = (1.0 - fi) / h + 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        lk = (xlogy(a - 1.0, fj) + xlogy(b - 1.0, 1.0 - fj)
              + gammaln(a + b) - gammaln(a) - gammaln(b))
    return np.where(np.isnan(lk), -np.inf, lk)


def beta_kernel(fj, fi, h: float):
    """Beta kernel density; nonnegative, integrates to 1 over fj in [0, 1]."""
    return np.exp(log_beta_kernel(fj, fi, h))


def _check_simplex_rows(name, v):
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    if not np.all(np.isfinite(v)) or v.min() < -SIMPLEX_TOL:
        raise SimplexViolationError(f"{name} is not on the simplex")
    sums = v.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise SimplexViolationError(f"{name} rows do not sum to 1")
    return np.clip(v, 0.0, 1.0)


def log_dirichlet_kernel(fj, fi, h: float):
    """Log Dirichlet density at simplex row(s) fj with concentration
    alpha_k = fi_k / h + 1. fj may be (C,) or (m, C); fi is a single row."""
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    fj = _check_simplex_rows("fj", fj)
    fi = _check_simplex_rows("fi", fi)[0]
    a = fi / h + 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        lk = (np.sum(xlogy(a - 1.0, fj), axis=1)
              + gammaln(a.sum()) - np.sum(gammaln(a)))
    return np.where(np.isnan(lk), -np.inf, lk)


def dirichlet_kernel(fj, fi, h: float):
    out = np.exp(log_dirichlet_kernel(fj, fi, h))
    return float(out[0]) if out.size == 1 else out


# --------------------------------------------------------------------------
# Key points and calibration
# --------------------------------------------------------------------------

def _as_rows(arr) -> np.ndarray:
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ShapeMismatchError(f"expected (n,) or (n, C), got {a.shape}")
    return a


def _point_classes(labels: np.ndarray) -> np.ndarray:
    if labels.shape[1] == 1:
        return (labels[:, 0] > 0.5).astype(np.int64)
    return np.argmax(labels, axis=1)


def sample_key_points(confidences, labels, spec: KdeSpec) -> KeyPointSet:
    """Class-stratified sample of n_key points from a batch.

    Each class present in the batch contributes ceil(n_key / n_unique)
    points, capped by availability; n_key >= n returns the whole batch.
    Deterministic given spec.seed.
    """
    conf = _as_rows(confidences)
    lab = _as_rows(labels)
    if conf.shape != lab.shape:
        raise ShapeMismatchError(f"{conf.shape} vs {lab.shape}")
    n = conf.shape[0]
    if n == 0:
        raise EmptyBatchError("empty batch")
    if spec.n_key >= n:
        return KeyPointSet(conf, lab, np.arange(n))
    classes = _point_classes(lab)
    uniques = np.unique(classes)
    quota = -(-spec.n_key // uniques.size)  # ceil
    rng = np.random.default_rng(spec.seed)
    chosen = []
    for c in uniques:
        pool = np.flatnonzero(classes == c)
        take = min(quota, pool.size)
        chosen.append(rng.choice(pool, size=take, replace=False))
    idx = np.sort(np.concatenate(chosen))
    return KeyPointSet(conf[idx], lab[idx], idx)


def _log_weights(F: np.ndarray, keys: KeyPointSet, h: float) -> np.ndarray:
    """(m, n) log kernel weights of every pixel row against every key."""
    global kernel_eval_count
    n, c = keys.confidences.shape
    kernel_eval_count += F.shape[0] * n
    if c == 1:
        return log_beta_kernel(F[:, 0:1], keys.confidences[:, 0][None, :], h)
    fj = _check_simplex_rows("fj", F)
    fi = _check_simplex_rows("fi", keys.confidences)
    a = fi / h + 1.0  # (n, C)
    norm = gammaln(a.sum(axis=1)) - np.sum(gammaln(a), axis=1)
    # broadcast to (m, n, C); xlogy gives 0*log(0) = 0 at exact endpoints
    with np.errstate(divide="ignore", invalid="ignore"):
        lk = np.sum(xlogy(a[None, :, :] - 1.0, fj[:, None, :]), axis=2)
    lk = np.where(np.isnan(lk), -np.inf, lk)
    return lk + norm[None, :]


def kde_calibrate_batch(F, keys: KeyPointSet, h: float) -> np.ndarray:
    """Recalibrate rows of confidences against the key set.

    Returns the (m, C) convex combinations of key labels under normalized
    kernel weights. Rows whose weights all underflow to zero are returned
    unchanged with a DegenerateWeightsWarning.
    """
    F = _as_rows(F)
    if F.shape[1] != keys.n_classes:
        raise ShapeMismatchError(f"{F.shape[1]} classes vs keys {keys.n_classes}")
    lw = _log_weights(F, keys, h)
    top = np.max(lw, axis=1, keepdims=True)
    dead = ~np.isfinite(top[:, 0])
    with np.errstate(invalid="ignore"):
        w = np.exp(lw - np.where(np.isfinite(top), top, 0.0))
    w = np.where(np.isfinite(lw), w, 0.0)
    totals = w.sum(axis=1, keepdims=True)
    safe = np.where(totals > 0.0, totals, 1.0)
    out = (w @ keys.labels) / safe
    if np.any(dead):
        warnings.warn(f"{int(dead.sum())} pixel(s) matched no key point; "
                      "leaving them uncalibrated", DegenerateWeightsWarning)
        out[dead] = F[dead]
    return out


def kde_calibrate(f_x, keys: KeyPointSet, h: float) -> np.ndarray:
    """Single-row convenience wrapper around kde_calibrate_batch."""
    row = np.asarray(f_x, dtype=np.float64).reshape(1, -1)
    return kde_calibrate_batch(row, keys, h)[0]


# --------------------------------------------------------------------------
# Pixel scope
# --------------------------------------------------------------------------

def _class_map(f) -> np.ndarray:
    arr = f.array
    if arr.shape[0] == 1:
        return (arr[0] > 0.5).astype(np.int64)
    return np.argmax(arr, axis=0)


def select_scope_pixels(pred: ProbField, label: LabelField,
                        spec: KdeSpec) -> np.ndarray:
    """Flat pixel indices where argmax(pred) != argmax(label), plus pixels
    within Chebyshev distance boundary_radius of a label class transition."""
    check_same_dims(pred, label)
    if not label.is_hard:
        raise SoftInputError("select_scope_pixels requires a hard label map")
    validate(pred)
    validate(label)
    pc = _class_map(pred)
    lc = _class_map(label)
    wrong = pc != lc
    size = 2 * spec.boundary_radius + 1
    near_edge = (maximum_filter(lc, size=size, mode="nearest")
                 != minimum_filter(lc, size=size, mode="nearest"))
    return np.flatnonzero(wrong | near_edge)


# --------------------------------------------------------------------------
# Exact bias bound on finite distributions
# --------------------------------------------------------------------------

class BiasBoundResult(NamedTuple):
    bias: float
    calib_error: float
    holds: bool


def verify_bias_bound(weights, confidences, cond_probs,
                      tol: float = 1e-12) -> BiasBoundResult:
    """Check |E[y] - E[f]| <= E[|E[y|f] - f|] on an explicit finite
    distribution over (f, y).

    weights are point masses summing to 1, confidences the f values, and
    cond_probs the conditional P(y=1) at each point; points sharing an f
    value are pooled before the conditional expectation, so both sides are
    exact sums.
    """
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    f = np.asarray(confidences, dtype=np.float64).reshape(-1)
    q = np.asarray(cond_probs, dtype=np.float64).reshape(-1)
    if not (w.size == f.size == q.size) or w.size == 0:
        raise InvalidDistributionError("weights, confidences, cond_probs must "
                                       "be equal-length and nonempty")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
        raise InvalidDistributionError("weights must be nonnegative and sum to 1")
    if f.min() < 0 or f.max() > 1 or q.min() < 0 or q.max() > 1:
        raise InvalidDistributionError("confidences and cond_probs must be in [0, 1]")
    bias = abs(float(np.sum(w * q) - np.sum(w * f)))
    calib = 0.0
    for v in np.unique(f):
        sel = f == v
        mass = float(np.sum(w[sel]))
        if mass == 0.0:
            continue
        cond_mean = float(np.sum(w[sel] * q[sel])) / mass
        calib += mass * abs(cond_mean - v)
    return BiasBoundResult(bias, calib, bias <= calib + tol)
