import math

import numpy as np
import pytest

from cdon.autodiff import (
    Tensor4,
    add,
    conv2d,
    grad_check,
    make_conv_params,
    scale,
)
from cdon.errors import ConfigError, NumericError, UsageError
from cdon.heads import (
    CoupleParams,
    OptimState,
    couple,
    detection_loss,
    lr_schedule,
    make_couple_params,
    ohem_select,
    run_heads,
    sgd_step,
    smooth_l1,
)


class TestCouple:
    def test_zero_occlusion_branch_reduces_to_gate_conv(self):
        rng = np.random.default_rng(0)
        p = make_couple_params(rng, 6, 4, 5, (3, 3), weight_std=0.3)
        fg = Tensor4(rng.normal(size=(2, 6, 3, 3)))
        fo = Tensor4(np.zeros((2, 4, 3, 3)))
        got = couple(fg, fo, p).data
        np.testing.assert_allclose(got, conv2d(fg, p.normA).data, atol=1e-15)

    def test_identity_convs_double_equal_inputs(self):
        rng = np.random.default_rng(1)
        p = make_couple_params(rng, 3, 3, 3, (2, 2), weight_std=0.0)
        eye = np.eye(3).reshape(3, 3, 1, 1)
        p.normA.weights.data[:] = eye
        p.normB.weights.data[:] = eye
        x = rng.normal(size=(1, 3, 2, 2))
        got = couple(Tensor4(x), Tensor4(x.copy()), p).data
        np.testing.assert_allclose(got, 2 * x, atol=1e-15)

    def test_matches_conv_add_composition(self):
        rng = np.random.default_rng(2)
        p = make_couple_params(rng, 5, 7, 4, (3, 3), weight_std=0.2)
        fg = Tensor4(rng.normal(size=(2, 5, 3, 3)))
        fo = Tensor4(rng.normal(size=(2, 7, 3, 3)))
        got = couple(fg, fo, p).data
        want = add(conv2d(fg, p.normA), conv2d(fo, p.normB)).data
        np.testing.assert_array_equal(got, want)

    def test_width_mismatch_rejected(self):
        rng = np.random.default_rng(3)
        good = make_couple_params(rng, 4, 4, 6, (2, 2))
        bad_b = make_conv_params(rng, 4, 5, 1, 1)
        with pytest.raises(ConfigError):
            CoupleParams(good.normA, bad_b, good.head_cls, good.head_reg)

    def test_run_heads_shapes(self):
        rng = np.random.default_rng(4)
        p = make_couple_params(rng, 4, 4, 6, (3, 3), weight_std=0.1)
        coupled = Tensor4(rng.normal(size=(5, 6, 3, 3)))
        cls, reg = run_heads(coupled, p)
        assert cls.dims == (5, 2, 1, 1)
        assert reg.dims == (5, 4, 1, 1)


class TestSmoothL1:
    def test_paper_fixtures_exact(self):
        assert smooth_l1(0.5) == 0.125
        assert smooth_l1(1.0) == 0.5
        assert smooth_l1(2.0) == 1.5

    def test_symmetry(self):
        for x in (0.3, 0.9, 1.5, 7.0):
            assert smooth_l1(-x) == smooth_l1(x)

    def test_continuous_at_one(self):
        eps = 1e-9
        assert smooth_l1(1 - eps) == pytest.approx(smooth_l1(1 + eps), abs=1e-8)

    def test_derivative_continuous_at_one(self):
        # left and right difference quotients both approach 1
        h = 1e-6
        left = (smooth_l1(1.0) - smooth_l1(1.0 - h)) / h
        right = (smooth_l1(1.0 + h) - smooth_l1(1.0)) / h
        assert left == pytest.approx(1.0, abs=1e-5)
        assert right == pytest.approx(1.0, abs=1e-5)


class TestDetectionLoss:
    def _inputs(self, rng, n=6):
        logits = Tensor4(rng.normal(size=(n, 2, 1, 1)), requires_grad=True)
        deltas = Tensor4(rng.normal(size=(n, 4, 1, 1)) * 0.5,
                         requires_grad=True)
        labels = rng.integers(0, 2, n)
        targets = rng.normal(size=(n, 4)) * 0.5
        return logits, deltas, labels, targets

    def test_perfect_prediction_approaches_zero(self):
        n = 3
        labels = np.array([1, 0, 1])
        logits = np.zeros((n, 2, 1, 1))
        logits[np.arange(n), labels] = 50.0  # prob -> 1
        targets = np.random.default_rng(5).normal(size=(n, 4))
        deltas = np.zeros((n, 4, 1, 1))
        deltas[:, :, 0, 0] = targets
        terms = detection_loss(Tensor4(logits), Tensor4(deltas), labels,
                               targets)
        assert terms.total < 1e-12

    def test_uniform_prediction_gives_ln2_per_roi(self):
        n = 4
        terms = detection_loss(Tensor4(np.zeros((n, 2, 1, 1))),
                               Tensor4(np.zeros((n, 4, 1, 1))),
                               np.zeros(n, dtype=int), None)
        assert terms.cls == pytest.approx(n * math.log(2))
        assert terms.reg == 0.0

    def test_total_is_cls_plus_alpha_reg(self):
        rng = np.random.default_rng(6)
        logits, deltas, labels, targets = self._inputs(rng)
        for alpha in (0.0, 0.5, 1.0, 2.0):
            t = detection_loss(logits, deltas, labels, targets, alpha=alpha)
            assert t.total == t.cls + alpha * t.reg

    def test_alpha_zero_kills_delta_gradient(self):
        rng = np.random.default_rng(7)
        logits, deltas, labels, targets = self._inputs(rng)
        labels[:] = 1

        def f(d, graph):
            return detection_loss(logits, d, labels, targets, alpha=0.0,
                                  graph=graph).node

        rep = grad_check(f, [deltas])
        assert rep.passed
        assert np.abs(rep.analytic[0]).max() == 0.0

    def test_gradients_match_central_differences(self):
        rng = np.random.default_rng(8)
        logits, deltas, labels, targets = self._inputs(rng)
        labels[0] = 1  # ensure at least one positive

        def f(lg, d, graph):
            return detection_loss(lg, d, labels, targets, graph=graph).node

        rep = grad_check(f, [logits, deltas])
        assert rep.passed

    def test_include_masks_loss_and_gradient(self):
        rng = np.random.default_rng(9)
        logits, deltas, labels, targets = self._inputs(rng)
        keep = np.array([0, 2])
        t_all = detection_loss(logits, deltas, labels, targets)
        t_sub = detection_loss(logits, deltas, labels, targets, include=keep)
        manual = t_all.per_roi[keep].sum()
        assert t_sub.total == pytest.approx(manual)

        def f(lg, graph):
            return detection_loss(lg, deltas, labels, targets, include=keep,
                                  graph=graph).node

        rep = grad_check(f, [logits])
        assert rep.passed
        excluded = np.setdiff1d(np.arange(len(labels)), keep)
        assert np.abs(rep.analytic[0][excluded]).max() == 0.0

    def test_missing_targets_on_positive_rejected(self):
        logits = Tensor4(np.zeros((2, 2, 1, 1)))
        deltas = Tensor4(np.zeros((2, 4, 1, 1)))
        with pytest.raises(UsageError):
            detection_loss(logits, deltas, np.array([1, 0]), None)
        bad = np.full((2, 4), np.nan)
        with pytest.raises(UsageError):
            detection_loss(logits, deltas, np.array([1, 0]), bad)


class TestOhem:
    def test_fewer_than_n_keeps_all(self):
        got = ohem_select([0.5, 0.1, 0.9, 0.2, 0.4], n=300)
        assert sorted(got) == [0, 1, 2, 3, 4]

    def test_top2_fixture(self):
        assert ohem_select([3.0, 1.0, 2.0], n=2) == [0, 2]

    def test_tie_breaks_low_index(self):
        assert ohem_select([1.0, 2.0, 2.0, 0.5], n=2) == [1, 2]

    def test_matches_full_sort_oracle(self):
        rng = np.random.default_rng(10)
        losses = list(rng.uniform(size=1000))
        got = ohem_select(losses, n=300)
        oracle = sorted(range(1000), key=lambda i: (-losses[i], i))[:300]
        assert got == oracle


class TestSgd:
    def test_zero_grad_zero_wd_decays_velocity(self):
        p = Tensor4(np.ones((1, 1, 1, 1)), requires_grad=True)
        st = OptimState(lr=0.1, momentum=0.9, weight_decay=0.0,
                        velocity={"p": np.array([[[[2.0]]]])})
        sgd_step({"p": p}, {"p": np.zeros((1, 1, 1, 1))}, st)
        assert st.velocity["p"].reshape(()) == pytest.approx(1.8)
        assert p.data.reshape(()) == pytest.approx(1.0 - 0.1 * 1.8)

        # with zero starting velocity nothing moves at all
        p2 = Tensor4(np.ones((1, 1, 1, 1)), requires_grad=True)
        st2 = OptimState(lr=0.1, momentum=0.9, weight_decay=0.0)
        sgd_step({"p": p2}, {"p": np.zeros((1, 1, 1, 1))}, st2)
        assert p2.data.reshape(()) == 1.0

    def test_plain_scalar_step(self):
        p = Tensor4(np.full((1, 1, 1, 1), 5.0), requires_grad=True)
        st = OptimState(lr=0.1, momentum=0.0, weight_decay=0.0)
        sgd_step({"p": p}, {"p": np.full((1, 1, 1, 1), 2.0)}, st)
        assert p.data.reshape(()) == pytest.approx(5.0 - 0.2)

    def test_three_steps_match_hand_recurrence(self):
        # f(x) = 0.5 * a x^2, grad = a x
        a, lr, mom, wd = 3.0, 0.05, 0.9, 0.01
        x = 2.0
        v = 0.0
        trail = []
        for _ in range(3):
            g = a * x
            v = mom * v + (g + wd * x)
            x = x - lr * v
            trail.append(x)

        p = Tensor4(np.full((1, 1, 1, 1), 2.0), requires_grad=True)
        st = OptimState(lr=lr, momentum=mom, weight_decay=wd)
        got = []
        for _ in range(3):
            g = a * p.data
            sgd_step({"p": p}, {"p": g}, st)
            got.append(float(p.data.reshape(())))
        np.testing.assert_allclose(got, trail, rtol=1e-15)

    def test_quadratic_objective_decreases(self):
        rng = np.random.default_rng(11)
        p = Tensor4(rng.normal(size=(1, 4, 1, 1)), requires_grad=True)
        before = 0.5 * float((p.data ** 2).sum())
        st = OptimState(lr=1e-3, momentum=0.9, weight_decay=0.0)
        sgd_step({"p": p}, {"p": p.data.copy()}, st)
        after = 0.5 * float((p.data ** 2).sum())
        assert after < before

    def test_nan_grad_aborts(self):
        p = Tensor4(np.ones((1, 1, 1, 1)), requires_grad=True)
        st = OptimState(lr=0.1)
        with pytest.raises(NumericError):
            sgd_step({"p": p}, {"p": np.full((1, 1, 1, 1), np.nan)}, st)


class TestLrSchedule:
    def test_warmup_value(self):
        lr = lr_schedule(0, 1e-3, [(300, 0.1), (400, 0.1)], warmup_steps=50,
                         warmup_lr=1e-4)
        assert lr == 1e-4

    def test_past_both_drops(self):
        lr = lr_schedule(500, 1e-3, [(300, 0.1), (400, 0.1)])
        assert lr == pytest.approx(1e-5)

    def test_between_drops(self):
        lr = lr_schedule(350, 1e-3, [(300, 0.1), (400, 0.1)])
        assert lr == pytest.approx(1e-4)

    def test_no_drops_constant(self):
        for step in (0, 100, 10_000):
            assert lr_schedule(step, 5e-3, []) == 5e-3
