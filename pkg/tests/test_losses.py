import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from drom.linalg import SparseVector
from drom.losses import (LossKind, RobustParams, capped_lp_weight, capped_value, concave_dual,
                         loss_and_subgradient, loss_value, predict)

ps = st.floats(0.05, 0.95)
xis = st.floats(0.1, 5.0)


class TestLossAndSubgradient:
    def test_hinge_at_zero(self):
        x = np.array([0.3, -1.0])
        loss, g = loss_and_subgradient("hinge", np.zeros(2), x, -1)
        assert loss == 1.0
        np.testing.assert_array_equal(g, x)

    def test_hinge_inactive(self):
        loss, g = loss_and_subgradient("hinge", np.array([2.0, 0.0]), np.array([1.0, 5.0]), 1)
        assert loss == 0.0
        np.testing.assert_array_equal(g, 0.0)

    def test_hinge_direct(self):
        loss, g = loss_and_subgradient("hinge", np.array([1.0, 0.0]), np.array([0.5, 0.0]), -1)
        assert loss == 1.5
        np.testing.assert_array_equal(g, [0.5, 0.0])

    def test_sparse_matches_dense(self):
        x = np.array([0.0, 2.0, 0.0, -1.0])
        w = np.array([0.1, 0.2, 0.3, 0.4])
        for kind in LossKind:
            l1, g1 = loss_and_subgradient(kind, w, x, 1)
            l2, g2 = loss_and_subgradient(kind, w, SparseVector.from_dense(x), 1)
            assert l1 == l2
            np.testing.assert_array_equal(g1, g2)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            loss_and_subgradient("hinge", np.zeros(3), np.zeros(2), 1)
        with pytest.raises(ValueError):
            loss_and_subgradient("logistic", np.zeros(3), SparseVector.from_dense(np.ones(4)), 1)

    def test_logistic_extreme_margins(self):
        x = np.array([1.0])
        loss, g = loss_and_subgradient("logistic", np.array([1e4]), x, -1)
        assert loss == pytest.approx(1e4)
        np.testing.assert_allclose(g, [1.0])
        loss, g = loss_and_subgradient("logistic", np.array([1e4]), x, 1)
        assert loss == 0.0 and g[0] == pytest.approx(0.0, abs=1e-300)

    def test_logistic_at_zero(self):
        loss, g = loss_and_subgradient("logistic", np.zeros(2), np.array([1.0, 2.0]), 1)
        assert loss == pytest.approx(math.log(2))
        np.testing.assert_allclose(g, [-0.5, -1.0])

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2 ** 32 - 1), y=st.sampled_from([-1, 1]))
    def test_logistic_finite_differences(self, seed, y):
        rng = np.random.default_rng(seed)
        w, x = rng.standard_normal(5), rng.standard_normal(5)
        _, g = loss_and_subgradient("logistic", w, x, y)
        h = 1e-6
        fd = np.array([(loss_value("logistic", w + h * e, x, y) - loss_value("logistic", w - h * e, x, y)) / (2 * h)
                       for e in np.eye(5)])
        np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-9)

    @settings(max_examples=200, deadline=None)
    @given(seed=st.integers(0, 2 ** 32 - 1), kind=st.sampled_from(list(LossKind)),
           y=st.sampled_from([-1, 1]))
    def test_convexity(self, seed, kind, y):
        rng = np.random.default_rng(seed)
        w, w2, x = rng.standard_normal((3, 4)) * 2
        f2, g2 = loss_and_subgradient(kind, w2, x, y)
        assert loss_value(kind, w, x, y) >= f2 + g2 @ (w - w2) - 1e-12

    def test_loss_value_agrees(self):
        rng = np.random.default_rng(0)
        for kind in LossKind:
            for _ in range(20):
                w, x = rng.standard_normal((2, 3))
                assert loss_value(kind, w, x, -1) == loss_and_subgradient(kind, w, x, -1)[0]


def test_predict_ties_positive():
    assert predict(np.zeros(3), np.ones(3)) == 1
    assert predict(np.array([1.0, -1.0]), np.array([1.0, 1.0])) == 1
    assert predict(np.array([-1.0]), np.array([1.0])) == -1


class TestRobustParams:
    @pytest.mark.parametrize("kwargs", [dict(p=0.0), dict(p=1.0), dict(xi=0.0), dict(gamma_clamp_eps=0.0)])
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            RobustParams(**kwargs)

    def test_kappa(self):
        assert RobustParams(p=0.5, gamma_clamp_eps=1e-2).kappa == pytest.approx(5.0)


class TestCappedWeight:
    def test_examples(self):
        assert capped_lp_weight(0.25, RobustParams(0.5, 1.0)) == pytest.approx(1.0)
        assert capped_lp_weight(4.0, RobustParams(0.5, 1.0)) == 0.0
        assert capped_lp_weight(1.0, RobustParams(0.5, 2.0)) == pytest.approx(0.5)

    def test_boundary_is_inside(self):
        # loss**p == xi keeps the weight
        assert capped_lp_weight(1.0, RobustParams(0.5, 1.0)) == pytest.approx(0.5)

    def test_clamped_near_zero(self):
        rp = RobustParams(0.5, 1.0, 1e-3)
        assert capped_lp_weight(0.0, rp) == pytest.approx(rp.kappa)
        assert capped_lp_weight(1e-9, rp) == capped_lp_weight(1e-3, rp)

    def test_negative_loss(self):
        with pytest.raises(ValueError):
            capped_lp_weight(-0.1, RobustParams())

    @settings(max_examples=300, deadline=None)
    @given(p=ps, xi=xis, eps=st.floats(1e-6, 1e-1), loss=st.floats(0, 100))
    def test_never_exceeds_kappa(self, p, xi, eps, loss):
        rp = RobustParams(p, xi, eps)
        gamma = capped_lp_weight(loss, rp)
        assert 0.0 <= gamma <= rp.kappa * (1 + 1e-12)


class TestCappedValue:
    def test_examples(self):
        rp = RobustParams(0.5, 1.0)
        assert capped_value(0.0, rp) == 0.0
        assert capped_value(4.0, rp) == 1.0
        assert capped_value(0.25, rp) == pytest.approx(0.5)


class TestConcaveDual:
    def test_below_cap_example(self):
        assert concave_dual(1.0, RobustParams(0.5, 1.0), "below_cap") == pytest.approx(-0.25)

    def test_at_cap_example(self):
        assert concave_dual(1.0, RobustParams(0.5, 1.0), "at_cap") == pytest.approx(0.0)

    def test_rejects_nonpositive_gamma(self):
        with pytest.raises(ValueError):
            concave_dual(0.0, RobustParams())
        with pytest.raises(ValueError):
            concave_dual(-1.0, RobustParams(), "at_cap")

    def test_unknown_regime(self):
        with pytest.raises(ValueError):
            concave_dual(1.0, RobustParams(), "sideways")

    @settings(max_examples=300, deadline=None)
    @given(p=ps, xi=xis, frac=st.floats(0.01, 0.999))
    def test_pointwise_identity(self, p, xi, frac):
        rp = RobustParams(p, xi, gamma_clamp_eps=1e-12)
        u = frac * xi ** (1 / p)
        assume(u >= rp.gamma_clamp_eps)
        gamma = capped_lp_weight(u, rp)
        assert gamma * u - concave_dual(gamma, rp, "below_cap") == pytest.approx(u ** p, abs=1e-10, rel=1e-10)

    @settings(max_examples=200, deadline=None)
    @given(p=ps, xi=xis, gamma=st.floats(1e-3, 1e3))
    def test_auto_regime_is_the_infimum(self, p, xi, gamma):
        rp = RobustParams(p, xi)
        cap_u = xi ** (1 / p)
        u = cap_u * np.concatenate([[0.0], np.logspace(-40, 0, 20001), np.linspace(1, 50, 2000)])
        brute = np.min(gamma * u - np.minimum(u ** p, xi))
        h = concave_dual(gamma, rp)
        assume(np.isfinite(h))
        assert h <= brute + 1e-12 * max(1.0, abs(brute))
        assert h == pytest.approx(brute, rel=1e-3, abs=1e-3)

    def test_below_cap_is_smaller_when_stationary_point_inside(self):
        rp = RobustParams(0.5, 1.0)
        # u* = (gamma/p)^(1/(p-1)) = 0.25 < 1
        assert concave_dual(1.0, rp) == concave_dual(1.0, rp, "below_cap")
        # u* = 16 is beyond the cap
        assert concave_dual(0.125, rp) == concave_dual(0.125, rp, "at_cap")


def test_concave_dual_vectorized():
    rp = RobustParams(0.4, 1.5)
    gammas = np.logspace(-3, 3, 50)
    for regime in (None, "below_cap", "at_cap"):
        out = concave_dual(gammas, rp, regime)
        assert out.shape == gammas.shape
        assert np.array_equal(out, [concave_dual(float(g), rp, regime) for g in gammas])
    with pytest.raises(ValueError):
        concave_dual(np.array([1.0, 0.0]), rp)
