import csv

import numpy as np
import pytest

from defocus.comprender import DepthPlanes, one_hot_logits, pmf_to_depth, render_pmf, softmax_pmf
from defocus.core import make_aperture
from defocus.optim import (AdamState, CompositionalObjective, LightFieldObjective, OptimConfig, OptimizationError,
                           SupervisionSet, Target, adam_step, bounded_depth, l1_image_loss, lr_factor, mirror_step,
                           optimize_depth_comp, optimize_depth_lf, view_spacing)
from defocus.scenesim import central_view, make_test_scene, oracle_sdof
from defocus.smooth import SmoothConfig


def _sup(scene, foci, m=5):
    I, Z = central_view(scene)
    ap = make_aperture(m)
    return SupervisionSet(I, [Target(oracle_sdof(scene, ap, f), ap) for f in foci]), Z


class TestAdam:
    def test_zero_gradient(self):
        p = np.array([1.0, -2.0])
        st = AdamState(np.array([0.5, 0.1]), np.array([0.2, 0.3]), 3)
        new, st2 = adam_step(p, np.zeros(2), st, 0.1)
        np.testing.assert_allclose(st2.m, 0.9 * st.m)
        np.testing.assert_allclose(st2.v, 0.999 * st.v)
        assert st2.t == 4
        # unchanged only when the moments are zero
        new, _ = adam_step(p, np.zeros(2), AdamState.like(p), 0.1)
        np.testing.assert_array_equal(new, p)

    def test_constant_gradient_step_is_lr(self):
        p, st = np.array([0.0]), AdamState.like([0.0])
        for _ in range(100):
            q, st = adam_step(p, np.array([3.7]), st, 0.01)
            step, p = p - q, q
        assert step[0] == pytest.approx(0.01, rel=1e-4)

    def test_quadratic(self):
        theta, st = np.array([1.0]), AdamState.like([1.0])
        for _ in range(200):
            theta, st = adam_step(theta, 2 * theta, st, 0.1)
        assert abs(theta[0]) < 1e-2


class TestPieces:
    def test_l1(self, rng):
        A = rng.random((4, 5, 3))
        assert l1_image_loss(A, A)[0] == 0.0
        assert l1_image_loss(A, A + 0.5)[0] == pytest.approx(0.5)
        B = rng.random((4, 5, 3))
        loss, g = l1_image_loss(A, B)
        assert loss == pytest.approx(sum(abs(a - b) for a, b in zip(A.ravel(), B.ravel())) / A.size)
        np.testing.assert_array_equal(g, np.sign(A - B) / A.size)
        with pytest.raises(ValueError):
            l1_image_loss(A, B[:3])

    def test_bounded_depth(self, rng):
        z = bounded_depth(rng.normal(0, 50, 1000), -15, 15)
        assert z.min() >= -15 and z.max() <= 15

    def test_lr_factor(self):
        assert lr_factor("constant", 5, 10) == 1.0
        assert lr_factor("cosine", 0, 10) == 1.0
        assert lr_factor("cosine", 5, 10) == pytest.approx(0.5)

    def test_view_spacing(self):
        assert view_spacing(make_aperture(5)) == 0.5
        assert view_spacing(make_aperture(1)) == 1.0

    def test_mirror_step(self):
        assert mirror_step(OptimConfig(steps=100)) == 25
        assert mirror_step(OptimConfig(steps=100, mirror_check=0)) is None
        assert mirror_step(OptimConfig(steps=0)) is None

    @pytest.mark.parametrize("kw", [{"steps": -1}, {"lr_focus": 0}, {"schedule": "step"}, {"d_lo": 2, "d_hi": 1},
                                    {"lambda_d": -1}, {"focus_order": "up"}, {"mirror_check": 2},
                                    {"gauge": "median"}, {"mirror_trial": 0}])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            OptimConfig(**kw)

    def test_supervision_validation(self, rng):
        with pytest.raises(ValueError):
            SupervisionSet(rng.random((4, 4, 3)), [])
        with pytest.raises(ValueError):
            SupervisionSet(rng.random((4, 4, 3)), [Target(rng.random((5, 4, 3)), make_aperture(3))])


class TestObjectives:
    def test_lf_gradient_matches_finite_differences(self, rng):
        scene = make_test_scene("two_plane", seed=1, size=12)
        sup, _ = _sup(scene, (-2.0,), m=3)
        cfg = OptimConfig(lambda_d=0.0, smooth=SmoothConfig(cg_tol=1e-13, cg_iters=3000))
        obj = LightFieldObjective(sup, cfg)
        theta = rng.normal(0, 0.1, (12, 12))
        focus = np.array([-1.3])
        _, _, _, dtheta, dfocus, _ = obj(theta, focus)
        h = 1e-6
        tp, tm = theta.copy(), theta.copy()
        tp[5, 6] += h
        tm[5, 6] -= h
        num = (obj(tp, focus)[0] - obj(tm, focus)[0]) / (2 * h)
        assert dtheta[5, 6] == pytest.approx(num, rel=1e-3, abs=1e-9)
        num = (obj(theta, focus + h)[0] - obj(theta, focus - h)[0]) / (2 * h)
        assert dfocus[0] == pytest.approx(num, rel=1e-3)

    def test_comp_mirror_is_exact(self, rng):
        scene = make_test_scene("two_plane", seed=1, size=16)
        sup, _ = _sup(scene, (-3.0, 2.0))
        cfg = OptimConfig(planes=DepthPlanes(-6, 6))
        obj = CompositionalObjective(sup, cfg)
        logits = rng.normal(size=(16, 16, 13))
        a = obj(logits, np.array([-3.0, 2.0]))[0]
        b = obj(logits[..., ::-1], np.array([3.0, -2.0]))[0]
        assert a == pytest.approx(b, abs=1e-14)


class TestOptimizeLf:
    def test_pinhole_is_a_no_op(self, rng):
        I = rng.random((12, 12, 3))
        sup = SupervisionSet(I, [Target(I.copy(), make_aperture(1))])
        init = rng.uniform(-3, 3, (12, 12))
        res = optimize_depth_lf(sup, OptimConfig(steps=5, smooth_in_loop=False, smooth=SmoothConfig(lam=0.0)),
                                init_depth=init)
        assert res.trace[0].total == 0.0
        np.testing.assert_allclose(res.raw_depth, init, atol=1e-6)

    def test_focus_only_recovery(self):
        scene = make_test_scene("textured_random", seed=2, size=32, disparities=(3.0, -2.0))
        sup, Z = _sup(scene, (1.0,))
        res = optimize_depth_lf(sup, OptimConfig(steps=150, lr_focus=0.1, smooth_in_loop=False, lambda_d=0.0,
                                                 smooth=SmoothConfig(lam=0.0)), init_depth=Z, fix_depth=True)
        assert abs(res.focus[0] - 1.0) < 0.5

    def test_bounded_iterates(self):
        scene = make_test_scene("two_plane", seed=0, size=16)
        sup, _ = _sup(scene, (-3.0,), m=3)
        seen = []
        optimize_depth_lf(sup, OptimConfig(steps=20, lr_depth=1.0, d_lo=-5, d_hi=5),
                          callback=lambda step, Z, f, tot: seen.append((Z.min(), Z.max())))
        assert min(s[0] for s in seen) >= -5 and max(s[1] for s in seen) <= 5

    def test_trace_csv(self, tmp_path):
        scene = make_test_scene("two_plane", seed=0, size=12)
        sup, _ = _sup(scene, (-3.0, 3.0), m=3)
        res = optimize_depth_lf(sup, OptimConfig(steps=4))
        res.write_trace(tmp_path / "t.csv")
        rows = list(csv.reader(open(tmp_path / "t.csv")))
        assert rows[0] == ["step", "total", "data", "reg", "focus_0", "focus_1"]
        assert len(rows) == 6 and float(rows[1][1]) == res.trace[0].total

    @pytest.mark.parametrize("gauge", ["mean_focus", "none"])
    def test_gauge_pins_mean_focus(self, gauge):
        scene = make_test_scene("two_plane", seed=0, size=12)
        sup, _ = _sup(scene, (-3.0, 3.0), m=3)
        means = []
        optimize_depth_lf(sup, OptimConfig(steps=8, gauge=gauge, mirror_check=0, lr_focus=0.5),
                          init_focus=[-1.0, 2.0], callback=lambda step, Z, f, tot: means.append(np.mean(f)))
        spread = np.ptp(means)
        assert spread < 1e-12 if gauge == "mean_focus" else spread > 1e-3

    def test_non_finite_aborts(self):
        I = np.full((8, 8, 3), 0.5)
        sup = SupervisionSet(I, [Target(I.copy(), make_aperture(3))])
        sup.targets[0].image[0, 0, 0] = np.nan
        with pytest.raises(OptimizationError):
            optimize_depth_lf(sup, OptimConfig(steps=2))

    def test_deterministic(self):
        scene = make_test_scene("two_plane", seed=0, size=12)
        sup, _ = _sup(scene, (-3.0, 3.0), m=3)
        a = optimize_depth_lf(sup, OptimConfig(steps=6))
        b = optimize_depth_lf(sup, OptimConfig(steps=6))
        np.testing.assert_array_equal(a.depth, b.depth)
        np.testing.assert_array_equal(a.focus, b.focus)


class TestOptimizeComp:
    def test_tv_dominated_is_constant(self):
        I = np.full((12, 12, 3), 0.5)
        sup = SupervisionSet(I, [Target(I.copy(), make_aperture(5))])
        res = optimize_depth_comp(sup, OptimConfig(steps=100, lambda_tv=1e3, planes=DepthPlanes(-4, 4),
                                                   init_focus=0.3))
        assert np.var(res.depth) == 0

    def test_single_plane_recovery(self):
        scene = make_test_scene("single_plane", seed=4, size=32, disparities=(3.0,))
        planes = DepthPlanes(-6, 6)
        sup, Z = _sup(scene, (-1.0,))
        one = optimize_depth_comp(sup, OptimConfig(steps=300, planes=planes))
        conf = one.confidence > 0.2
        f = one.focus[0]
        mode = np.median(one.depth[conf])
        assert abs(abs(mode - f) - abs(3.0 - f)) <= 1.0
        sup, Z = _sup(scene, (-1.0, 1.0))
        two = optimize_depth_comp(sup, OptimConfig(steps=300, planes=planes, focus_order="ascending"))
        assert np.mean(two.depth[conf] == 3.0) > 0.9

    def test_mirror_order_convention(self):
        scene = make_test_scene("single_plane", seed=4, size=24, disparities=(3.0,))
        sup, _ = _sup(scene, (1.0, -1.0))
        planes = DepthPlanes(-6, 6)
        asc = optimize_depth_comp(sup, OptimConfig(steps=60, planes=planes, focus_order="ascending"))
        desc = optimize_depth_comp(sup, OptimConfig(steps=60, planes=planes, focus_order="descending"))
        assert asc.focus[0] <= asc.focus[1] and desc.focus[0] >= desc.focus[1]
        assert asc.mirrored != desc.mirrored

    def test_loss_drops_below_truth(self):
        scene = make_test_scene("two_plane", seed=3, size=32)
        sup, Z = _sup(scene, (-3.5, 3.5), m=13)
        planes = DepthPlanes(-8, 8)
        P = softmax_pmf(one_hot_logits(Z, planes))
        truth = sum(l1_image_loss(render_pmf(sup.image, P, f, planes), t.image)[0]
                    for t, f in zip(sup.targets, (-3.5, 3.5)))
        res = optimize_depth_comp(sup, OptimConfig(steps=500, planes=planes))
        assert res.losses[-1] < min(truth, 0.5 * res.losses[0])

    def test_pmf_depth_consistent(self):
        scene = make_test_scene("two_plane", seed=0, size=12)
        sup, _ = _sup(scene, (-3.0,))
        res = optimize_depth_comp(sup, OptimConfig(steps=5, planes=DepthPlanes(-5, 5)))
        np.testing.assert_array_equal(res.depth, pmf_to_depth(softmax_pmf(res.logits), DepthPlanes(-5, 5)))
