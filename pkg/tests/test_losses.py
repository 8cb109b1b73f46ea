import numpy as np
import pytest

from dicesm import losses
from dicesm.core import ProbField, LabelField, ShapeMismatchError
from dicesm.losses import (
    GradPair,
    ReductionSpec,
    SoftLabelIncompatibleError,
    TverskyParams,
    batch_loss,
    ce,
    cftl,
    compound,
    ctl,
    dml1,
    dml2,
    jml1,
    jml2,
    make_loss,
    pairwise_values,
    sdl,
    sjl,
    stl,
)

from conftest import vec_prob, vec_label


GOLDEN = 0.5 * (1.0 + np.sqrt(5.0))


def soft_pair(rng, p):
    return rng.random(p), rng.random(p)


class TestHandValues:
    def test_sdl(self):
        assert sdl(vec_prob([1, 0]), vec_label([1, 0])).value == 0.0
        assert sdl(vec_prob([0.8, 0.2]), vec_label([1, 0])).value == pytest.approx(0.2, abs=1e-15)
        # vertex-seeking under a soft target: value at x=1 beats x=y=0.5
        assert sdl(vec_prob([1.0]), vec_label([0.5])).value == pytest.approx(1 / 3, abs=1e-15)
        assert sdl(vec_prob([0.5]), vec_label([0.5])).value == pytest.approx(0.5, abs=1e-15)

    def test_sdl_gradient_formula(self):
        # d/dx_i = -(2 y_i S - 2 P) / S^2 at x=[0.8,0.2], y=[1,0]: S=2, P=0.8
        g = sdl(vec_prob([0.8, 0.2]), vec_label([1, 0])).grad.as_array().ravel()
        np.testing.assert_allclose(g, [-(2 * 2 - 1.6) / 4, 1.6 / 4], atol=1e-15)

    def test_sjl(self):
        # reflexive on hard pairs only; soft reflexivity is what jml fixes
        assert sjl(vec_prob([1.0, 0.0]), vec_label([1, 0])).value == 0.0
        assert sjl(vec_prob([0.8, 0.2]), vec_label([1, 0])).value == pytest.approx(1 / 3, abs=1e-15)
        assert sjl(vec_prob([1.0]), vec_label([0.5])).value == pytest.approx(0.5, abs=1e-15)
        assert sjl(vec_prob([0.5]), vec_label([0.5])).value == pytest.approx(2 / 3, abs=1e-15)

    def test_jml(self):
        assert jml1(vec_prob([0.3, 0.7]), vec_label([0.3, 0.7])).value == 0.0
        assert jml2(vec_prob([0.3, 0.7]), vec_label([0.3, 0.7])).value == 0.0
        assert jml1(vec_prob([1.0]), vec_label([0.5])).value == pytest.approx(0.5, abs=1e-15)

    def test_jml_equals_sjl_on_hard(self, rng):
        x, y = vec_prob([0.8, 0.2]), vec_label([1, 0])
        assert jml1(x, y).value == pytest.approx(1 / 3, abs=1e-12)
        assert jml2(x, y).value == pytest.approx(1 / 3, abs=1e-12)
        for _ in range(200):
            p = int(rng.integers(1, 16))
            xv = rng.random(p)
            yv = (rng.random(p) < 0.5).astype(float)
            x, y = vec_prob(xv), vec_label(yv)
            ref = sjl(x, y).value
            assert jml1(x, y).value == pytest.approx(ref, abs=1e-12)
            assert jml2(x, y).value == pytest.approx(ref, abs=1e-12)

    def test_dml(self):
        assert dml1(vec_prob([0.5]), vec_label([0.5])).value == 0.0
        assert dml2(vec_prob([0.5]), vec_label([0.5])).value == 0.0
        assert dml1(vec_prob([1.0]), vec_label([0.5])).value == pytest.approx(1 / 3, abs=1e-15)
        assert dml2(vec_prob([1.0]), vec_label([0.5])).value == pytest.approx(1 / 3, abs=1e-15)

    def test_witness_triple(self):
        a, b, c = [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]
        for f in (dml1, dml2):
            ac = f(vec_prob(a), vec_label(c)).value
            ab = f(vec_prob(a), vec_label(b)).value
            bc = f(vec_prob(b), vec_label(c)).value
            assert ac == pytest.approx(1.0, abs=1e-15)
            assert ab == pytest.approx(1 / 3, abs=1e-15)
            assert bc == pytest.approx(1 / 3, abs=1e-15)
            assert ac / (ab + bc) == pytest.approx(1.5, abs=1e-12)

    def test_stl(self):
        x, y = vec_prob([0.8, 0.2]), vec_label([1, 0])
        assert stl(x, y, TverskyParams(0.7, 0.3)).value == pytest.approx(0.2, abs=1e-15)
        assert stl(vec_prob([1, 0]), vec_label([1, 0])).value == 0.0

    def test_stl_equals_sdl_at_half(self, rng):
        tp = TverskyParams(0.5, 0.5)
        for _ in range(200):
            p = int(rng.integers(1, 16))
            x = vec_prob(rng.random(p))
            y = vec_label((rng.random(p) < 0.5).astype(float))
            assert stl(x, y, tp).value == pytest.approx(sdl(x, y).value, abs=1e-12)

    def test_stl_soft_guard(self):
        x, y = vec_prob([0.5]), vec_label([0.5])
        with pytest.raises(SoftLabelIncompatibleError):
            stl(x, y)
        assert stl(x, y, allow_soft=True).value == pytest.approx(0.5, abs=1e-15)

    def test_ctl_equals_dml1_at_half(self, rng):
        tp = TverskyParams(0.5, 0.5)
        for _ in range(200):
            p = int(rng.integers(1, 16))
            xv, yv = soft_pair(rng, p)
            x, y = vec_prob(xv), vec_label(yv)
            assert ctl(x, y, tp).value == pytest.approx(dml1(x, y).value, abs=1e-12)

    def test_ctl_reflexive_any_params(self):
        x, y = vec_prob([0.8]), vec_label([0.8])
        for a, b in [(0.5, 0.5), (0.7, 0.3), (1.0, 1.0), (0.2, 1.3)]:
            assert abs(ctl(x, y, TverskyParams(a, b)).value) < 1e-12
            for g in (1.0, 2.0, 4.0):
                assert abs(cftl(x, y, TverskyParams(a, b, g)).value) < 1e-12

    def test_cftl_zero_at_soft_match(self):
        # minimum of the focal curve sits at the soft label value
        for g in (1.0, 2.0, 4.0):
            v = cftl(vec_prob([0.8]), vec_label([0.8]), TverskyParams(0.7, 0.3, g)).value
            assert abs(v) < 1e-12

    def test_ce(self):
        one = ProbField.from_array(np.array([0.5, 0.5]).reshape(2, 1, 1))
        lab = LabelField.from_array(np.array([1.0, 0.0]).reshape(2, 1, 1))
        assert ce(one, lab).value == pytest.approx(np.log(2), abs=1e-12)
        # exact one-hot match costs only the clamp
        hot = ProbField.from_array(np.array([1.0, 0.0]).reshape(2, 1, 1))
        assert ce(hot, lab).value == pytest.approx(0.0, abs=1e-6)

    def test_ce_binary_uses_background(self):
        assert ce(vec_prob([0.5]), vec_label([1.0])).value == pytest.approx(np.log(2), abs=1e-12)
        assert ce(vec_prob([0.5]), vec_label([0.0])).value == pytest.approx(np.log(2), abs=1e-12)

    def test_ce_soft_minimizer_on_simplex(self):
        # grid over the 2-class simplex: minimum at x == y for soft y
        lab = LabelField.from_array(np.array([0.5, 0.5]).reshape(2, 1, 1), "soft")
        grid = np.linspace(0.001, 0.999, 999)
        vals = [ce(ProbField.from_array(np.array([q, 1 - q]).reshape(2, 1, 1)), lab).value
                for q in grid]
        assert grid[int(np.argmin(vals))] == pytest.approx(0.5, abs=2e-3)

    def test_compound(self):
        x, y = vec_prob([0.5]), vec_label([1.0])
        expect = 0.25 * np.log(2) + 0.75 * (0.5 / 1.5)
        assert compound(x, y).value == pytest.approx(expect, abs=1e-12)
        assert compound(x, y, w_ce=1.0, w_dml=0.0).value == pytest.approx(ce(x, y).value, abs=1e-15)
        exact = compound(vec_prob([1, 0]), vec_label([1, 0]))
        assert exact.value == pytest.approx(0.0, abs=1e-6)

    def test_compound_grad_is_mixture(self):
        x, y = vec_prob([0.6, 0.3]), vec_label([1, 0])
        g = compound(x, y).grad.as_array()
        ref = 0.25 * ce(x, y).grad.as_array() + 0.75 * dml1(x, y).grad.as_array()
        np.testing.assert_allclose(g, ref, atol=1e-15)


class TestProperties:
    def test_hard_label_identity(self, rng):
        for _ in range(500):
            p = int(rng.integers(1, 65))
            xv = rng.random(p)
            yv = (rng.random(p) < 0.5).astype(float)
            x, y = vec_prob(xv), vec_label(yv)
            s = sdl(x, y).value
            assert abs(s - dml1(x, y).value) < 1e-12
            assert abs(s - dml2(x, y).value) < 1e-12

    def test_soft_order_dml1_le_dml2(self, rng):
        for _ in range(500):
            p = int(rng.integers(1, 65))
            xv, yv = soft_pair(rng, p)
            x, y = vec_prob(xv), vec_label(yv)
            assert dml1(x, y).value <= dml2(x, y).value + 1e-12

    @pytest.mark.parametrize("f,rho", [(dml1, GOLDEN), (dml2, GOLDEN),
                                       (jml1, 1.0), (jml2, 1.0)])
    def test_semimetric_axioms(self, rng, f, rho):
        for _ in range(200):
            p = int(rng.integers(1, 33))
            a, b, c = rng.random(p), rng.random(p), rng.random(p)
            fa, fb, fc = vec_prob(a), vec_prob(b), vec_prob(c)
            la, lb, lc = vec_label(a), vec_label(b), vec_label(c)
            assert abs(f(fa, la).value) < 1e-12
            if np.max(np.abs(a - b)) > 1e-6:
                assert f(fa, lb).value > 0.0
            assert abs(f(fa, lb).value - f(fb, la).value) < 1e-12
            assert f(fa, lc).value <= rho * (f(fa, lb).value + f(fb, lc).value) + 1e-12

    def test_dice_iou_bridge(self, rng):
        for _ in range(300):
            p = int(rng.integers(1, 33))
            xv, yv = soft_pair(rng, p)
            x, y = vec_prob(xv), vec_label(yv)
            j1, j2 = jml1(x, y).value, jml2(x, y).value
            assert abs(dml1(x, y).value - j1 / (2 - j1)) < 1e-12
            assert abs(dml2(x, y).value - j2 / (2 - j2)) < 1e-12

    def test_range(self, rng):
        fns = [sdl, sjl, jml1, jml2, dml1, dml2,
               lambda x, y: stl(x, y, allow_soft=True), ctl, cftl]
        for _ in range(100):
            p = int(rng.integers(1, 33))
            xv, yv = soft_pair(rng, p)
            x, y = vec_prob(xv), vec_label(yv)
            for f in fns:
                v = f(x, y).value
                assert -1e-15 <= v <= 1.0 + 1e-15

    def test_minimizer_scan(self, rng):
        grid = np.round(np.arange(0.0, 1.0 + 1e-9, 1e-3), 9)
        for _ in range(10):
            yv = float(rng.uniform(0.05, 0.95))
            y = vec_label([yv])
            curves = {}
            for name, f in [("sdl", sdl), ("sjl", sjl), ("dml1", dml1), ("dml2", dml2),
                            ("stl", lambda x, yy: stl(x, yy, allow_soft=True)),
                            ("ctl", lambda x, yy: ctl(x, yy, TverskyParams(0.7, 0.3)))]:
                vals = pairwise_values(
                    name if name not in ("stl", "ctl") else name,
                    grid[:, None], np.full((grid.size, 1), yv),
                    TverskyParams(0.7, 0.3) if name in ("stl", "ctl") else None)
                curves[name] = grid[int(np.argmin(vals))]
            for name in ("dml1", "dml2", "ctl"):
                assert abs(curves[name] - yv) <= 1e-3 + 1e-9
            for name in ("sdl", "sjl", "stl"):
                assert curves[name] in (0.0, 1.0)

    def test_cftl_focus_ordering(self):
        # larger gamma: flatter near the minimum, steeper far away
        grid = np.linspace(0.0, 1.0, 201)
        y = np.full_like(grid, 0.8)
        curves = {g: pairwise_values("cftl", grid[:, None], y[:, None],
                                     TverskyParams(0.7, 0.3, g))
                  for g in (1.0, 2.0, 4.0)}
        near = np.abs(grid - 0.8) < 0.1
        assert np.mean(curves[4.0][near]) < np.mean(curves[2.0][near]) < np.mean(curves[1.0][near])
        slopes = {g: np.max(np.abs(np.diff(c))) for g, c in curves.items()}
        assert slopes[4.0] > slopes[2.0] > slopes[1.0]


class TestGradients:
    LOSSES = ["sdl", "sjl", "jml1", "jml2", "dml1", "dml2",
              "stl", "ctl", "cftl", "ce", "compound"]

    @pytest.mark.parametrize("name", LOSSES)
    def test_matches_finite_differences(self, rng, name):
        params = TverskyParams(0.7, 0.3, 2.0) if name in ("stl", "ctl", "cftl") else None
        h = 1e-6
        for _ in range(20):
            p = int(rng.integers(2, 9))
            x = rng.uniform(0.02, 0.98, p)
            y = rng.uniform(0.02, 0.98, p)
            y = np.where(np.abs(x - y) <= 2e-3, np.clip(y + 0.05, 0.0, 1.0), y)
            _, grads, _ = losses.pairwise(name, x[None, :], y[None, :], params)
            for j in range(p):
                xp, xm = x.copy(), x.copy()
                xp[j] += h
                xm[j] -= h
                fp = pairwise_values(name, xp[None, :], y[None, :], params)[0]
                fm = pairwise_values(name, xm[None, :], y[None, :], params)[0]
                fd = (fp - fm) / (2 * h)
                denom = max(abs(fd), abs(grads[0, j]), 1e-8)
                assert abs(fd - grads[0, j]) / denom < 1e-5

    def test_field_grad_matches_pairwise(self, rng):
        xv, yv = rng.random(6), rng.random(6)
        gp = dml1(vec_prob(xv), vec_label(yv))
        _, grads, _ = losses.pairwise("dml1", xv[None, :], yv[None, :])
        np.testing.assert_allclose(gp.grad.as_array().ravel(), grads[0], atol=1e-15)

    def test_kink_convention_sign_zero(self):
        # at x == y the subgradient convention gives exactly zero
        x = vec_prob([0.4, 0.6])
        y = vec_label([0.4, 0.6], "soft")
        for f in (jml1, jml2, dml1, dml2):
            np.testing.assert_array_equal(f(x, y).grad.as_array(), 0.0)


class TestReduction:
    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            sdl(vec_prob([0.5, 0.5]), vec_label([1.0]))

    def test_empty_both_value(self):
        x, y = vec_prob([0.0, 0.0]), vec_label([0.0, 0.0])
        assert sdl(x, y).value == 0.0
        spec = ReductionSpec(empty_both_value=1.0)
        assert sdl(x, y, spec).value == 1.0
        np.testing.assert_array_equal(sdl(x, y, spec).grad.as_array(), 0.0)

    def test_mean_present_vs_mean_all(self):
        # class 0 empty in both; class 1 has loss 0.2
        x = ProbField.from_array(np.array([[[0.0, 0.0]], [[0.8, 0.2]]]).reshape(2, 1, 2) * 0)
        # build a C=1-style two-class stack without the simplex constraint:
        # use two separate single-class calls instead
        xa = np.zeros((2, 1, 2))
        xa[1] = [[0.8, 0.2]]
        ya = np.zeros((2, 1, 2))
        ya[1] = [[1.0, 0.0]]
        # C=2 fields must satisfy the simplex, so craft sums of 1
        xa[0] = 1.0 - xa[1]
        ya[0] = 1.0 - ya[1]
        x = ProbField.from_array(xa)
        y = LabelField.from_array(ya)
        present = sdl(x, y, ReductionSpec(class_mode="mean_present")).value
        both = sdl(x, y, ReductionSpec(class_mode="mean_all")).value
        # both classes are present here; values agree
        assert present == pytest.approx(both)

    def test_mean_all_counts_empty_classes(self):
        xa = np.zeros((1, 1, 3))
        ya = np.zeros((1, 1, 3))
        x, y = ProbField.from_array(xa), LabelField.from_array(ya)
        assert sdl(x, y, ReductionSpec(class_mode="mean_all", empty_both_value=0.7)).value == 0.7

    def test_batch_modes(self, rng):
        xs = [vec_prob(rng.random(4)) for _ in range(3)]
        ys = [vec_label((rng.random(4) < 0.5).astype(float)) for _ in range(3)]
        v1, g1 = batch_loss(dml1, xs, ys, ReductionSpec())
        per = [dml1(x, y).value for x, y in zip(xs, ys)]
        assert v1 == pytest.approx(np.mean(per), abs=1e-15)
        np.testing.assert_allclose(
            g1[0].as_array(), dml1(xs[0], ys[0]).grad.as_array() / 3, atol=1e-15)

        v2, g2 = batch_loss(dml1, xs, ys, ReductionSpec(batch_mode="pooled"))
        allx = np.concatenate([x.array.ravel() for x in xs])
        ally = np.concatenate([y.array.ravel() for y in ys])
        ref = dml1(vec_prob(allx), vec_label(ally)).value
        assert v2 == pytest.approx(ref, abs=1e-15)
        assert g2[0].dims == xs[0].dims


class TestRegistry:
    def test_unknown_name(self):
        with pytest.raises(ValueError):
            make_loss("dice")

    def test_unknown_params(self):
        with pytest.raises(ValueError):
            make_loss("dml1", {"alpha": 0.5})
        with pytest.raises(ValueError):
            make_loss("ctl", {"alpha": 0.5, "bogus": 1})

    def test_bound_params(self):
        f = make_loss("ctl", {"alpha": 0.5, "beta": 0.5})
        x, y = vec_prob([0.3, 0.9]), vec_label([0.7, 0.4], "soft")
        assert f(x, y).value == pytest.approx(dml1(x, y).value, abs=1e-12)
        g = make_loss("compound", {"w_ce": 1.0, "w_dml": 0.0})
        assert g(x, y).value == pytest.approx(ce(x, y).value, abs=1e-15)

    def test_every_name_constructs(self):
        for name in losses.LOSS_NAMES:
            params = {"alpha": 0.6, "beta": 0.4} if name in ("stl", "ctl", "cftl") else None
            fn = make_loss(name, params)
            x, y = vec_prob([0.3, 0.9]), vec_label([1.0, 0.0])
            assert isinstance(fn(x, y), GradPair)

    def test_tversky_param_validation(self):
        with pytest.raises(ValueError):
            TverskyParams(0.0, 0.0)
        with pytest.raises(ValueError):
            TverskyParams(0.5, 0.5, 0.0)
        with pytest.raises(ValueError):
            TverskyParams(-0.1, 0.5)
