import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drom.linalg import full_svd
from drom.optimizer import (CENTRAL_TOL, BoundParams, HyperParams, WorkerState, central_step, drom_d_local_step,
                            drom_local_step, learning_rate, regret_bound)


def state(w, a=0.0, uv=0.0, d=1):
    return WorkerState(np.full(d, w, dtype=float), np.full(d, a, dtype=float),
                       np.full(d, uv, dtype=float), 0)


def reference_alg1(w, a, uv, grad, gamma, eta):
    """Dual first, then primal with the new dual, written out per coordinate."""
    if gamma == 0:
        return list(w), list(a)
    a_new = [a[k] + eta * (w[k] - uv[k]) for k in range(len(w))]
    w_new = [w[k] - eta * (a_new[k] + gamma * grad[k]) for k in range(len(w))]
    return w_new, a_new


def reference_alg2(w, a, uv, grad, gamma, eta):
    w_new = [w[k] - eta * (a[k] + gamma * grad[k]) for k in range(len(w))]
    a_new = [a[k] + eta * (w_new[k] - uv[k]) for k in range(len(w))]
    return w_new, a_new


class TestLearningRate:
    def test_centralized(self):
        assert learning_rate(4) == 0.5
        assert learning_rate(1) == 1.0

    def test_periodic(self):
        assert learning_rate(7, 4) == pytest.approx(1 / math.sqrt(2), abs=1e-12)
        assert learning_rate(1, 5) == 1.0
        assert learning_rate(8, 4) == pytest.approx(1 / math.sqrt(2))
        assert learning_rate(9, 4) == pytest.approx(1 / math.sqrt(3))

    def test_errors(self):
        with pytest.raises(ValueError):
            learning_rate(0)
        with pytest.raises(ValueError):
            learning_rate(3, 0)

    @given(t=st.integers(1, 10 ** 6))
    def test_tau_one_is_centralized(self, t):
        assert learning_rate(t, 1) == learning_rate(t)


class TestDromLocalStep:
    def test_hand_example(self):
        s = drom_local_step(state(1.0), np.array([0.5]), 1.0, 1.0)
        assert s.a[0] == 1.0
        assert s.w[0] == -0.5

    def test_gamma_zero_is_identity(self):
        s0 = state(0.3, 0.7, 0.2, d=3)
        s1 = drom_local_step(s0, np.array([1.0, 2.0, 3.0]), 0.0, 0.5)
        assert s1 is s0

    def test_seeded_d10_matches_reference(self):
        rng = np.random.default_rng(10)
        w, a, uv, g = rng.standard_normal((4, 10))
        s = drom_local_step(WorkerState(w, a, uv, 3), g, 0.7, 0.3)
        w_ref, a_ref = reference_alg1(w, a, uv, g, 0.7, 0.3)
        assert np.array_equal(s.w, w_ref) and np.array_equal(s.a, a_ref)
        assert s.task_id == 3
        np.testing.assert_array_equal(s.uv_col, uv)

    def test_two_round_hand_calculation(self):
        # gamma = 1, no spectral term: plain subgradient descent plus dual integration of w
        s = state(0.0)
        s = drom_local_step(s, np.array([1.0]), 1.0, 1.0)  # a = 0, w = -1
        assert (s.w[0], s.a[0]) == (-1.0, 0.0)
        eta = learning_rate(2)
        s = drom_local_step(s, np.array([1.0]), 1.0, eta)
        a2 = -eta
        assert s.a[0] == pytest.approx(a2)
        assert s.w[0] == pytest.approx(-1.0 - eta * (a2 + 1.0))

    def test_lambda_rho_weights(self):
        s = drom_local_step(state(1.0, 0.0, 1.0), np.array([0.0]), 1.0, 1.0, lam=2.0, rho=0.5)
        assert s.a[0] == pytest.approx(2.0 * 1.0 - 0.5 * 1.0)
        assert s.w[0] == pytest.approx(1.0 - 2.0 * 1.5)

    def test_errors(self):
        with pytest.raises(ValueError):
            drom_local_step(state(0.0), np.array([np.inf]), 1.0, 1.0)
        with pytest.raises(ValueError):
            drom_local_step(state(0.0), np.array([1.0]), -1.0, 1.0)
        with pytest.raises(ValueError):
            drom_local_step(state(0.0), np.array([1.0]), 1.0, 0.0)

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2 ** 32 - 1), gamma=st.floats(0, 5), eta=st.floats(1e-3, 1))
    def test_pure_and_matches_reference(self, seed, gamma, eta):
        rng = np.random.default_rng(seed)
        w, a, uv, g = rng.standard_normal((4, 6))
        s0 = WorkerState(w.copy(), a.copy(), uv.copy(), 0)
        s1 = drom_local_step(s0, g, gamma, eta)
        s2 = drom_local_step(s0, g, gamma, eta)
        assert np.array_equal(s1.w, s2.w) and np.array_equal(s1.a, s2.a)
        assert np.array_equal(s0.w, w) and np.array_equal(s0.a, a)
        w_ref, a_ref = reference_alg1(w, a, uv, g, gamma, eta)
        assert np.array_equal(s1.w, w_ref) and np.array_equal(s1.a, a_ref)


class TestDromDLocalStep:
    def test_hand_example(self):
        s = drom_d_local_step(state(1.0), np.array([0.5]), 1.0, 1.0)
        assert s.w[0] == 0.5
        assert s.a[0] == 0.5

    def test_gamma_zero_keeps_dual_flow(self):
        s = drom_d_local_step(state(2.0, d=3), np.array([9.0, 9.0, 9.0]), 0.0, 0.25)
        np.testing.assert_array_equal(s.w, 2.0)
        np.testing.assert_array_equal(s.a, 0.5)

    def test_seeded_d10_matches_reference(self):
        rng = np.random.default_rng(20)
        w, a, uv, g = rng.standard_normal((4, 10))
        s = drom_d_local_step(WorkerState(w, a, uv, 1), g, 1.3, 0.4)
        w_ref, a_ref = reference_alg2(w, a, uv, g, 1.3, 0.4)
        assert np.array_equal(s.w, w_ref) and np.array_equal(s.a, a_ref)

    def test_orderings_differ(self):
        s0 = state(1.0, 0.5, 0.2)
        g = np.array([0.3])
        a = drom_local_step(s0, g, 1.0, 0.5)
        b = drom_d_local_step(s0, g, 1.0, 0.5)
        assert a.w[0] != b.w[0]

    def test_errors(self):
        with pytest.raises(ValueError):
            drom_d_local_step(state(0.0), np.array([np.nan]), 1.0, 1.0)


class TestCentralStep:
    def test_below_threshold(self):
        step = central_step(np.diag([0.5, 0.5]))
        assert not step.fires and step.pair is None

    def test_exactly_one_does_not_fire(self):
        assert not central_step(np.diag([1.0, 0.2])).fires

    def test_diag_2_0(self):
        step = central_step(np.diag([2.0, 0.0]))
        u, v = step.pair
        np.testing.assert_allclose(u, [1, 0], atol=1e-12)
        np.testing.assert_allclose(v, [1, 0], atol=1e-12)
        np.testing.assert_allclose(u * v[0], [1, 0], atol=1e-12)
        np.testing.assert_allclose(u * v[1], [0, 0], atol=1e-12)

    def test_seeded_8x4_sigma_1_7(self):
        rng = np.random.default_rng(17)
        U, _ = np.linalg.qr(rng.standard_normal((8, 4)))
        V, _ = np.linalg.qr(rng.standard_normal((4, 4)))
        A = (U * [1.7, 0.9, 0.5, 0.1]) @ V.T
        step = central_step(A, tol=1e-10)
        Uo, so, Vo = full_svd(A)
        assert step.fires
        assert step.sigma == pytest.approx(so[0], abs=1e-8)
        assert abs(step.u @ Uo[:, 0]) >= 1 - 1e-8
        assert abs(step.v @ Vo[:, 0]) >= 1 - 1e-8
        # the value-based stop pins sigma to tol but the vectors only to about sqrt(tol)
        np.testing.assert_allclose(np.outer(step.u, step.v), np.outer(Uo[:, 0], Vo[:, 0]), atol=1e-6)
        loose = central_step(A)
        assert loose.sigma == pytest.approx(so[0], abs=1e-7 * so[0])
        np.testing.assert_allclose(np.outer(loose.u, loose.v), np.outer(Uo[:, 0], Vo[:, 0]),
                                   atol=np.sqrt(CENTRAL_TOL))

    def test_near_tied_spectrum_falls_back(self):
        rng = np.random.default_rng(5)
        U, _ = np.linalg.qr(rng.standard_normal((16, 4)))
        V, _ = np.linalg.qr(rng.standard_normal((4, 4)))
        A = (U * [1.2, 1.2 - 1e-7, 0.6, 0.3]) @ V.T
        step = central_step(A, tol=1e-14, max_iter=3)
        Uo, so, Vo = full_svd(A)
        assert step.iterations == 3
        assert step.sigma == pytest.approx(so[0], abs=1e-12)
        np.testing.assert_allclose(A @ step.v, step.sigma * step.u, atol=1e-12)
        assert np.linalg.norm(step.u) == pytest.approx(1.0) and step.u[0] > 0

    def test_zero_matrix(self):
        assert not central_step(np.zeros((3, 2))).fires

    def test_nonfinite(self):
        with pytest.raises(ValueError):
            central_step(np.array([[np.inf]]))


class TestRegretBound:
    def test_thm1_unit(self):
        assert regret_bound(BoundParams(), HyperParams(), 1, "thm1") == 9.0

    def test_thm2_tau1_unit(self):
        assert regret_bound(BoundParams(), HyperParams(), 1, "thm2") == 9.0

    def test_thm2_tau4(self):
        bp = BoundParams(m=2, tau=4)
        assert regret_bound(bp, HyperParams(), 16, "thm2") == pytest.approx(516.0)

    @settings(max_examples=200)
    @given(D=st.floats(0.01, 100), kappa=st.floats(0.01, 100), beta=st.floats(0.01, 100),
           m=st.integers(1, 64), T=st.integers(1, 10 ** 6), lam=st.floats(0.01, 10),
           rho=st.floats(0.01, 10))
    def test_thm2_at_tau1_equals_thm1(self, D, kappa, beta, m, T, lam, rho):
        bp = BoundParams(D, kappa, beta, m, 1)
        hp = HyperParams(lam, rho)
        assert regret_bound(bp, hp, T, "thm2") == pytest.approx(regret_bound(bp, hp, T, "thm1"), rel=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            regret_bound(BoundParams(), HyperParams(), 0)
        with pytest.raises(ValueError):
            regret_bound(BoundParams(), HyperParams(), 1, "thm3")
        with pytest.raises(ValueError):
            BoundParams(D=0)
        with pytest.raises(ValueError):
            HyperParams(lam=0)

    def test_grows_like_sqrt_t(self):
        bp, hp = BoundParams(), HyperParams()
        assert regret_bound(bp, hp, 400) == pytest.approx(20 * regret_bound(bp, hp, 1))


def test_nuclear_target():
    assert HyperParams(lam=0.5, rho=2.0).nuclear_target == 4.0
