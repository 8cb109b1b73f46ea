"""Region-overlap losses as pure functions with values and analytic gradients.

Every loss maps a prediction field x and a target field y to a scalar plus
the exact gradient with respect to x. Writing per-class flat vectors and
X = ||x||_1, Y = ||y||_1, S = X + Y, D = ||x - y||_1, P = ||x * y||_1
(elementwise product; P equals <x, y> for values in [0, 1]):

    sdl   1 - 2P/S                 sjl   1 - P/(S - P)
    jml1  2D/(S + D)               jml2  D/(P + D)
    dml1  D/S                      dml2  D/(2P + D)
    stl   1 - P/(a*X + b*Y + (1-a-b)*P)
    ctl   1 - N/(2a*X + 2b*Y + (1-a-b)*N)   with N = S - D
    cftl  ctl**gamma
    ce    pixel-mean cross-entropy (C == 1 uses the implicit background class)
    compound  w_ce*ce + w_dml*dml1 (overlap term swappable)

The D-based losses use the subgradient d|x_i - y_i|/dx_i = sign(x_i - y_i)
with sign(0) = 0, and d||x||_1/dx_i = 1 on the domain [0, 1]. A class whose
denominator vanishes (both maps empty) contributes ReductionSpec.
empty_both_value with zero gradient. Reduction order over pixels is fixed,
so results are deterministic bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import (
    DicesmError,
    LabelField,
    ProbField,
    ShapeMismatchError,
    TensorF,
    check_same_dims,
    validate,
)

CE_CLAMP = 1e-7

MEAN_PRESENT = "mean_present"
MEAN_ALL = "mean_all"
PER_IMAGE_THEN_MEAN = "per_image_then_mean"
POOLED = "pooled"

LOSS_NAMES = ("sdl", "sjl", "jml1", "jml2", "dml1", "dml2",
              "stl", "ctl", "cftl", "ce", "compound")

_OVERLAP_NAMES = ("sdl", "sjl", "jml1", "jml2", "dml1", "dml2")


class SoftLabelIncompatibleError(DicesmError):
    """Raised when a vertex-seeking loss is handed soft labels without an
    explicit override."""


@dataclass(frozen=True)
class ReductionSpec:
    """How per-class losses aggregate over classes and images."""

    class_mode: str = MEAN_PRESENT
    batch_mode: str = PER_IMAGE_THEN_MEAN
    empty_both_value: float = 0.0

    def __post_init__(self):
        if self.class_mode not in (MEAN_PRESENT, MEAN_ALL):
            raise ValueError(f"unknown class_mode {self.class_mode!r}")
        if self.batch_mode not in (PER_IMAGE_THEN_MEAN, POOLED):
            raise ValueError(f"unknown batch_mode {self.batch_mode!r}")
        if not 0.0 <= self.empty_both_value <= 1.0:
            raise ValueError("empty_both_value must be in [0, 1]")


@dataclass(frozen=True)
class TverskyParams:
    """False-positive weight alpha, false-negative weight beta, focal gamma."""

    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if self.alpha + self.beta <= 0:
            raise ValueError("alpha + beta must be positive")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")


@dataclass(frozen=True)
class GradPair:
    """Loss value plus d(loss)/dx of the prediction's shape."""

    value: float
    grad: TensorF


DEFAULT_REDUCTION = ReductionSpec()
DEFAULT_TVERSKY = TverskyParams()


def reduction_from_json(d: dict) -> ReductionSpec:
    """Build a ReductionSpec from a JSON object; unknown keys are rejected."""
    allowed = {"class_mode", "batch_mode", "empty_both_value"}
    extra = set(d) - allowed
    if extra:
        raise ValueError(f"unknown reduction keys: {sorted(extra)}")
    return ReductionSpec(**d)


def tversky_from_json(d: dict) -> TverskyParams:
    allowed = {"alpha", "beta", "gamma"}
    extra = set(d) - allowed
    if extra:
        raise ValueError(f"unknown Tversky keys: {sorted(extra)}")
    return TverskyParams(**d)


# --------------------------------------------------------------------------
# Row kernels. X, Y are (N, p) arrays; each row is one independent
# per-class vector pair. Returns (values (N,), grads (N, p), ok (N,)) where
# ok is False for rows whose denominator vanished; such rows carry value 0
# and zero gradient and the caller substitutes empty_both_value.
# --------------------------------------------------------------------------

# sign(0) convention; check-properties --mutate sign flips this to expose
# how the suite reacts to a wrong kink convention.
_SIGN_AT_ZERO = 0.0


def set_sign_at_zero(v: float) -> None:
    global _SIGN_AT_ZERO
    _SIGN_AT_ZERO = float(v)


def _sign(d: np.ndarray) -> np.ndarray:
    s = np.sign(d)
    if _SIGN_AT_ZERO != 0.0:
        s = np.where(d == 0.0, _SIGN_AT_ZERO, s)
    return s


def _safe_div(num, den):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = num / den
    return np.where(den == 0.0, 0.0, out)


def _finish(vals, grads, ok):
    vals = np.where(ok, vals, 0.0)
    grads = np.where(ok[:, None], grads, 0.0)
    return vals, grads, ok


def _kernel_sdl(X, Y, params=None):
    P = np.sum(X * Y, axis=1)
    S = np.sum(X, axis=1) + np.sum(Y, axis=1)
    ok = S > 0.0
    vals = 1.0 - _safe_div(2.0 * P, S)
    grads = _safe_div(2.0 * P[:, None] - 2.0 * Y * S[:, None], (S * S)[:, None])
    return _finish(vals, grads, ok)


def _kernel_sjl(X, Y, params=None):
    P = np.sum(X * Y, axis=1)
    S = np.sum(X, axis=1) + np.sum(Y, axis=1)
    U = S - P
    ok = U > 0.0
    vals = 1.0 - _safe_div(P, U)
    grads = _safe_div(P[:, None] * (1.0 - Y) - Y * U[:, None], (U * U)[:, None])
    return _finish(vals, grads, ok)


def _kernel_jml1(X, Y, params=None):
    S = np.sum(X, axis=1) + np.sum(Y, axis=1)
    diff = X - Y
    D = np.sum(np.abs(diff), axis=1)
    den = S + D
    ok = den > 0.0
    vals = _safe_div(2.0 * D, den)
    sg = _sign(diff)
    grads = _safe_div(2.0 * (sg * S[:, None] - D[:, None]), (den * den)[:, None])
    return _finish(vals, grads, ok)


def _kernel_jml2(X, Y, params=None):
    P = np.sum(X * Y, axis=1)
    diff = X - Y
    D = np.sum(np.abs(diff), axis=1)
    den = P + D
    ok = den > 0.0
    vals = _safe_div(D, den)
    sg = _sign(diff)
    grads = _safe_div(sg * P[:, None] - Y * D[:, None], (den * den)[:, None])
    return _finish(vals, grads, ok)


def _kernel_dml1(X, Y, params=None):
    S = np.sum(X, axis=1) + np.sum(Y, axis=1)
    diff = X - Y
    D = np.sum(np.abs(diff), axis=1)
    ok = S > 0.0
    vals = _safe_div(D, S)
    sg = _sign(diff)
    grads = _safe_div(sg * S[:, None] - D[:, None], (S * S)[:, None])
    return _finish(vals, grads, ok)


def _kernel_dml2(X, Y, params=None):
    P = np.sum(X * Y, axis=1)
    diff = X - Y
    D = np.sum(np.abs(diff), axis=1)
    den = 2.0 * P + D
    ok = den > 0.0
    vals = _safe_div(D, den)
    sg = _sign(diff)
    grads = _safe_div(2.0 * (sg * P[:, None] - Y * D[:, None]), (den * den)[:, None])
    return _finish(vals, grads, ok)


def _kernel_stl(X, Y, params):
    a, b = params.alpha, params.beta
    P = np.sum(X * Y, axis=1)
    SX = np.sum(X, axis=1)
    SY = np.sum(Y, axis=1)
    T = a * SX + b * SY + (1.0 - a - b) * P
    ok = T > 0.0
    vals = 1.0 - _safe_div(P, T)
    dT = a + (1.0 - a - b) * Y
    grads = _safe_div(P[:, None] * dT - Y * T[:, None], (T * T)[:, None])
    return _finish(vals, grads, ok)


def _kernel_ctl(X, Y, params):
    a, b = params.alpha, params.beta
    SX = np.sum(X, axis=1)
    SY = np.sum(Y, axis=1)
    diff = X - Y
    D = np.sum(np.abs(diff), axis=1)
    N = SX + SY - D
    T = 2.0 * a * SX + 2.0 * b * SY + (1.0 - a - b) * N
    ok = T > 0.0
    vals = 1.0 - _safe_div(N, T)
    sg = _sign(diff)
    dN = 1.0 - sg
    dT = 2.0 * a + (1.0 - a - b) * dN
    grads = _safe_div(N[:, None] * dT - dN * T[:, None], (T * T)[:, None])
    return _finish(vals, grads, ok)


def _kernel_cftl(X, Y, params):
    vals, grads, ok = _kernel_ctl(X, Y, params)
    g = params.gamma
    if g == 1.0:
        return vals, grads, ok
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = g * np.power(vals, g - 1.0)
    # at the minimum vals == 0 the focal factor is 0 for gamma > 1 and would
    # be unbounded for gamma < 1; pin it to 0 to keep gradients finite
    factor = np.where(vals == 0.0, 0.0, factor)
    return _finish(np.power(vals, g), factor[:, None] * grads, ok)


def _kernel_ce(X, Y, params=None):
    p = X.shape[1]
    Xc = np.clip(X, CE_CLAMP, 1.0 - CE_CLAMP)
    vals = -np.sum(Y * np.log(Xc) + (1.0 - Y) * np.log1p(-Xc), axis=1) / p
    grads = -(Y / Xc - (1.0 - Y) / (1.0 - Xc)) / p
    ok = np.ones(X.shape[0], dtype=bool)
    return vals, grads, ok


def _kernel_compound(X, Y, params):
    w_ce, w_dml, overlap = params
    cv, cg, _ = _kernel_ce(X, Y)
    ov, og, ok = _KERNELS[overlap](X, Y, None)
    ov = np.where(ok, ov, 0.0)  # empty-both overlap term contributes 0
    vals = w_ce * cv + w_dml * ov
    grads = w_ce * cg + w_dml * og
    return vals, grads, np.ones(X.shape[0], dtype=bool)


_KERNELS: dict[str, Callable] = {
    "sdl": _kernel_sdl,
    "sjl": _kernel_sjl,
    "jml1": _kernel_jml1,
    "jml2": _kernel_jml2,
    "dml1": _kernel_dml1,
    "dml2": _kernel_dml2,
    "stl": _kernel_stl,
    "ctl": _kernel_ctl,
    "cftl": _kernel_cftl,
    "ce": _kernel_ce,
    "compound": _kernel_compound,
}


def _pairwise_params(name: str, params):
    if name in ("stl", "ctl", "cftl"):
        return params if params is not None else DEFAULT_TVERSKY
    if name == "compound":
        return params if params is not None else (0.25, 0.75, "dml1")
    return None


def pairwise(name: str, X, Y, params=None):
    """Vectorized row-batched evaluation: row i of X against row i of Y.

    Returns (values, grads, ok). Rows are treated like independent C == 1
    fields (the ce/compound rows take the pixel mean over the row). This is
    the exact kernel the public field ops reduce over; the property suites
    use it to hit their runtime budgets.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape != Y.shape:
        raise ShapeMismatchError(f"{X.shape} vs {Y.shape}")
    return _KERNELS[name](X, Y, _pairwise_params(name, params))


def pairwise_values(name: str, X, Y, params=None, empty_both_value=0.0):
    vals, _, ok = pairwise(name, X, Y, params)
    return np.where(ok, vals, empty_both_value)


# --------------------------------------------------------------------------
# Field-level ops
# --------------------------------------------------------------------------

def _check_fields(x: ProbField, y: LabelField) -> None:
    check_same_dims(x, y)
    validate(x)
    validate(y)


def _reduce_classes(x: ProbField, vals, grads, ok, red: ReductionSpec) -> GradPair:
    C = x.n_classes
    if red.class_mode == MEAN_PRESENT:
        idx = np.flatnonzero(ok)
        if idx.size == 0:
            value = red.empty_both_value
            grad = np.zeros_like(grads)
        else:
            value = float(np.mean(vals[idx]))
            grad = np.zeros_like(grads)
            grad[idx] = grads[idx] / idx.size
    else:
        value = float(np.mean(np.where(ok, vals, red.empty_both_value)))
        grad = grads / C
    return GradPair(value, TensorF(x.dims, grad.reshape(-1)))


def _overlap_field_op(name: str, x: ProbField, y: LabelField,
                      red: ReductionSpec | None, params=None) -> GradPair:
    red = red if red is not None else DEFAULT_REDUCTION
    _check_fields(x, y)
    C = x.n_classes
    X = x.array.reshape(C, -1)
    Y = y.array.reshape(C, -1)
    vals, grads, ok = _KERNELS[name](X, Y, params)
    return _reduce_classes(x, vals, grads, ok, red)


def sdl(x: ProbField, y: LabelField, red: ReductionSpec | None = None) -> GradPair:
    """Classic overlap relaxation 1 - 2P/S. Valid for hard targets; with soft
    targets its minimum sits at a vertex, not at x == y."""
    return _overlap_field_op("sdl", x, y, red)


def sjl(x: ProbField, y: LabelField, red: ReductionSpec | None = None) -> GradPair:
    """Intersection-over-union relaxation 1 - P/(S - P); same vertex-seeking
    behavior as sdl under soft targets."""
    return _overlap_field_op("sjl", x, y, red)


def jml1(x: ProbField, y: LabelField, red: ReductionSpec | None = None) -> GradPair:
    """Soft-label-compatible IoU loss 2D/(S + D); a metric on [0, 1]^p."""
    return _overlap_field_op("jml1", x, y, red)


def jml2(x: ProbField, y: LabelField, red: ReductionSpec | None = None) -> GradPair:
    """Soft-label-compatible IoU loss D/(P + D); a metric on [0, 1]^p."""
    return _overlap_field_op("jml2", x, y, red)


def dml1(x: ProbField, y: LabelField, red: ReductionSpec | None = None) -> GradPair:
    """Soft-label-compatible Dice loss D/S; a semimetric on [0, 1]^p that
    collapses to sdl whenever either argument is hard."""
    return _overlap_field_op("dml1", x, y, red)


def dml2(x: ProbField, y: LabelField, red: ReductionSpec | None = None) -> GradPair:
    """Soft-label-compatible Dice loss D/(2P + D); dominates dml1."""
    return _overlap_field_op("dml2", x, y, red)


def stl(x: ProbField, y: LabelField, params: TverskyParams | None = None,
        red: ReductionSpec | None = None, allow_soft: bool = False) -> GradPair:
    """Tversky relaxation with FP/FN weights; hard targets only.

    Soft targets raise SoftLabelIncompatibleError unless allow_soft is set
    (the loss is vertex-seeking, like sdl); the override exists so the
    incompatibility can be demonstrated, not so it can be ignored.
    """
    if not y.is_hard and not allow_soft:
        raise SoftLabelIncompatibleError(
            "stl is minimized at a vertex under soft labels; pass "
            "allow_soft=True only to demonstrate that")
    return _overlap_field_op("stl", x, y, red,
                             params if params is not None else DEFAULT_TVERSKY)


def ctl(x: ProbField, y: LabelField, params: TverskyParams | None = None,
        red: ReductionSpec | None = None) -> GradPair:
    """Soft-label-compatible Tversky loss; reflexive and positive for
    alpha, beta > 0, equal to stl on hard targets and to dml1 at
    alpha == beta == 0.5."""
    return _overlap_field_op("ctl", x, y, red,
                             params if params is not None else DEFAULT_TVERSKY)


def cftl(x: ProbField, y: LabelField, params: TverskyParams | None = None,
         red: ReductionSpec | None = None) -> GradPair:
    """ctl raised to the focal exponent gamma; gamma > 1 flattens the loss
    near its minimum and steepens it far away."""
    return _overlap_field_op("cftl", x, y, red,
                             params if params is not None else DEFAULT_TVERSKY)


def ce(x: ProbField, y: LabelField, red: ReductionSpec | None = None) -> GradPair:
    """Pixel-mean cross-entropy, soft-label compatible.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the log. C == 1
    fields are scored over the implicit {background, foreground} pair.
    """
    _check_fields(x, y)
    C = x.n_classes
    p = x.dims[1] * x.dims[2]
    Xc = np.clip(x.array, CE_CLAMP, 1.0 - CE_CLAMP)
    Ya = y.array
    if C == 1:
        value = float(-np.sum(Ya * np.log(Xc) + (1.0 - Ya) * np.log1p(-Xc)) / p)
        grad = -(Ya / Xc - (1.0 - Ya) / (1.0 - Xc)) / p
    else:
        value = float(-np.sum(Ya * np.log(Xc)) / p)
        grad = -(Ya / Xc) / p
    return GradPair(value, TensorF(x.dims, grad.reshape(-1)))


def compound(x: ProbField, y: LabelField, red: ReductionSpec | None = None,
             w_ce: float = 0.25, w_dml: float = 0.75,
             overlap: str = "dml1") -> GradPair:
    """Training mixture w_ce * ce + w_dml * overlap (default dml1)."""
    if w_ce < 0 or w_dml < 0:
        raise ValueError("mixture weights must be nonnegative")
    if overlap not in _OVERLAP_NAMES:
        raise ValueError(f"overlap must be one of {_OVERLAP_NAMES}")
    c = ce(x, y, red)
    o = _overlap_field_op(overlap, x, y, red)
    grad = w_ce * c.grad.as_array() + w_dml * o.grad.as_array()
    return GradPair(w_ce * c.value + w_dml * o.value, TensorF(x.dims, grad.reshape(-1)))


# --------------------------------------------------------------------------
# Loss registry and batch reduction
# --------------------------------------------------------------------------

def make_loss(name: str, params: dict | None = None) -> Callable:
    """Bind a loss identifier plus JSON params into fn(x, y, red) -> GradPair.

    Unknown names and unknown parameter keys are rejected.
    """
    if name not in LOSS_NAMES:
        raise ValueError(f"unknown loss {name!r}; choose from {LOSS_NAMES}")
    params = dict(params or {})
    if name in ("stl", "ctl", "cftl"):
        allow_soft = bool(params.pop("allow_soft", False))
        tp = tversky_from_json(params)
        if name == "stl":
            return lambda x, y, red=None: stl(x, y, tp, red, allow_soft=allow_soft)
        fn = ctl if name == "ctl" else cftl
        return lambda x, y, red=None: fn(x, y, tp, red)
    if name == "compound":
        allowed = {"w_ce", "w_dml", "overlap"}
        extra = set(params) - allowed
        if extra:
            raise ValueError(f"unknown compound keys: {sorted(extra)}")
        w_ce = float(params.get("w_ce", 0.25))
        w_dml = float(params.get("w_dml", 0.75))
        overlap = params.get("overlap", "dml1")
        return lambda x, y, red=None: compound(x, y, red, w_ce, w_dml, overlap)
    if params:
        raise ValueError(f"loss {name!r} takes no params, got {sorted(params)}")
    plain = {"sdl": sdl, "sjl": sjl, "jml1": jml1, "jml2": jml2,
             "dml1": dml1, "dml2": dml2, "ce": ce}
    return plain[name]


def batch_loss(loss_fn: Callable, xs: Sequence[ProbField], ys: Sequence[LabelField],
               red: ReductionSpec | None = None):
    """Aggregate a loss over a batch per ReductionSpec.batch_mode.

    Returns (value, grads) where grads[i] is d(value)/d(xs[i]) as a TensorF.
    per_image_then_mean averages per-image losses; pooled concatenates all
    pixels into one evaluation (classes stay aligned).
    """
    red = red if red is not None else DEFAULT_REDUCTION
    if len(xs) != len(ys) or not xs:
        raise ShapeMismatchError("batch needs equal, nonzero counts of x and y")
    if red.batch_mode == PER_IMAGE_THEN_MEAN:
        pairs = [loss_fn(x, y, red) for x, y in zip(xs, ys)]
        n = len(pairs)
        value = float(np.mean([p.value for p in pairs]))
        grads = [TensorF(x.dims, p.grad.data / n) for x, p in zip(xs, pairs)]
        return value, grads
    C = xs[0].n_classes
    for x, y in zip(xs, ys):
        check_same_dims(x, y)
        if x.n_classes != C:
            raise ShapeMismatchError("pooled batch requires a common class count")
    flat_x = [x.array.reshape(C, 1, -1) for x in xs]
    flat_y = [y.array.reshape(C, 1, -1) for y in ys]
    pooled_x = ProbField.from_array(np.concatenate(flat_x, axis=2))
    hardness = "hard" if all(y.is_hard for y in ys) else "soft"
    pooled_y = LabelField.from_array(np.concatenate(flat_y, axis=2), hardness)
    pair = loss_fn(pooled_x, pooled_y, red)
    g = pair.grad.as_array().reshape(C, -1)
    grads = []
    off = 0
    for x in xs:
        p = x.dims[1] * x.dims[2]
        grads.append(TensorF(x.dims, g[:, off:off + p].reshape(-1)))
        off += p
    return pair.value, grads
