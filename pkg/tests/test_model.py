import math

import numpy as np
import pytest

from conftest import random_system
from ddstc import presets
from ddstc.model import (LtiSystem, UnobservableError, discretize_zoh, equilibrium_extended_state,
                         extended_state, extended_system, is_controllable, is_observable,
                         observability_index, observability_matrix, rho_oracle, simulate_step)


def series_zoh(Ac, Bc, dt, terms=50):
    """Truncated-series oracle for the zero-order-hold pair."""
    n = Ac.shape[0]
    A = np.zeros((n, n))
    S = np.zeros((n, n))
    P = np.eye(n)
    for k in range(terms):
        A += P * dt**k / math.factorial(k)
        S += P * dt**(k + 1) / math.factorial(k + 1)
        P = P @ Ac
    return A, S @ Bc


class TestSimulateStep:
    def test_zero_fixed_point(self):
        sys = presets.four_tank()
        x, y = simulate_step(sys, np.zeros(4), np.zeros(2))
        assert np.all(x == 0) and np.all(y == 0)

    def test_four_tank_unit_state(self):
        sys = presets.four_tank()
        x, y = simulate_step(sys, [1, 0, 0, 0], [0, 0])
        np.testing.assert_array_equal(x, [0.927, 0, 0, 0])
        np.testing.assert_array_equal(y, [1, 0])

    def test_matches_matrix_product(self, rng):
        for _ in range(20):
            sys = random_system(rng)
            x, u = rng.standard_normal(sys.n_x), rng.standard_normal(sys.n_u)
            xn, y = simulate_step(sys, x, u)
            np.testing.assert_allclose(xn, sys.A @ x + sys.B @ u, atol=1e-12)
            np.testing.assert_allclose(y, sys.C @ x + sys.D @ u, atol=1e-12)

    def test_linearity(self, rng):
        sys = random_system(rng)
        x1, x2 = rng.standard_normal((2, sys.n_x))
        u1, u2 = rng.standard_normal((2, sys.n_u))
        a, b = 0.7, -1.3
        lhs = simulate_step(sys, a * x1 + b * x2, a * u1 + b * u2)
        r1, r2 = simulate_step(sys, x1, u1), simulate_step(sys, x2, u2)
        for k in range(2):
            np.testing.assert_allclose(lhs[k], a * r1[k] + b * r2[k], atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            simulate_step(presets.four_tank(), np.zeros(3), np.zeros(2))


class TestLtiSystem:
    def test_rejects_inconsistent_dimensions(self):
        with pytest.raises(ValueError):
            LtiSystem(np.eye(2), np.ones((3, 1)), np.eye(2), np.zeros((2, 1)))

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            LtiSystem(np.array([[np.nan]]), [[1.0]], [[1.0]], [[0.0]])

    def test_state_feedback_constructor(self):
        sys = LtiSystem.state_feedback(np.eye(2), np.ones((2, 1)))
        assert sys.is_state_output and sys.n_y == 2


class TestDiscretize:
    def test_zero_dynamics(self):
        A, B = discretize_zoh(np.zeros((2, 2)), np.eye(2), 0.1)
        np.testing.assert_allclose(A, np.eye(2), atol=1e-15)
        np.testing.assert_allclose(B, 0.1 * np.eye(2), atol=1e-15)

    def test_double_integrator_series(self):
        Ac, Bc = presets.double_integrator_ct()
        np.testing.assert_array_equal(Ac, [[0, 1], [0, -0.1]])
        A, B = discretize_zoh(Ac, Bc, 0.1)
        Ao, Bo = series_zoh(Ac, Bc, 0.1)
        np.testing.assert_allclose(A, Ao, rtol=1e-10, atol=1e-14)
        np.testing.assert_allclose(B, Bo, rtol=1e-10, atol=1e-14)

    def test_pendulum_series(self):
        Ac, Bc = presets.inverted_pendulum_ct(m1=1, m2=10, ell=3, g=10)
        A, B = discretize_zoh(Ac, Bc, 0.1)
        Ao, Bo = series_zoh(Ac, Bc, 0.1)
        np.testing.assert_allclose(A, Ao, rtol=1e-10, atol=1e-14)
        np.testing.assert_allclose(B, Bo, rtol=1e-10, atol=1e-14)

    def test_semigroup(self, rng):
        Ac = rng.standard_normal((3, 3))
        Bc = rng.standard_normal((3, 1))
        A1, _ = discretize_zoh(Ac, Bc, 0.03)
        A2, _ = discretize_zoh(Ac, Bc, 0.05)
        A12, _ = discretize_zoh(Ac, Bc, 0.08)
        np.testing.assert_allclose(A1 @ A2, A12, atol=1e-9)

    def test_errors(self):
        with pytest.raises(ValueError):
            discretize_zoh(np.ones((2, 3)), np.ones((2, 1)), 0.1)
        with pytest.raises(ValueError):
            discretize_zoh(np.eye(2), np.ones((2, 1)), 0.0)


class TestObservability:
    def test_identity_output(self):
        sys = LtiSystem.state_feedback(np.eye(3), np.ones((3, 1)))
        np.testing.assert_array_equal(observability_matrix(sys, 1), np.eye(3))
        assert observability_index(sys) == 1

    def test_four_tank(self):
        sys = presets.four_tank()
        assert np.linalg.matrix_rank(observability_matrix(sys, 2)) == 4
        assert observability_index(sys) == 2
        assert is_controllable(sys) and is_observable(sys)

    def test_row_order(self):
        sys = presets.four_tank()
        Th = observability_matrix(sys, 3)
        np.testing.assert_allclose(Th[4:6], sys.C @ sys.A @ sys.A)

    def test_zero_output_unobservable(self):
        sys = LtiSystem(np.eye(2), np.ones((2, 1)), np.zeros((1, 2)), np.zeros((1, 1)))
        with pytest.raises(UnobservableError, match="unobservable"):
            observability_index(sys)

    def test_uncontrollable(self):
        sys = LtiSystem(np.eye(2), np.zeros((2, 1)), np.eye(2), np.zeros((2, 1)))
        assert not is_controllable(sys)

    def test_reachable_canonical_form(self, rng):
        a = rng.standard_normal(3)
        A = np.zeros((3, 3))
        A[:2, 1:] = np.eye(2)
        A[2] = a
        sys = LtiSystem(A, [[0], [0], [1]], [[1, 0, 0]], [[0]])
        assert is_controllable(sys)

    def test_index_is_minimal(self, rng):
        for _ in range(20):
            sys = random_system(rng)
            eta = observability_index(sys)
            assert np.linalg.matrix_rank(observability_matrix(sys, eta)) == sys.n_x
            if eta > 1:
                assert np.linalg.matrix_rank(observability_matrix(sys, eta - 1)) < sys.n_x


class TestExtendedState:
    def test_zero_windows(self):
        xi = extended_state(np.zeros((2, 2)), np.zeros((2, 2)), 2)
        assert xi.dim == 8 and np.all(xi.vector == 0)

    def test_equilibrium(self):
        xi = extended_state([[1, 1], [1, 1]], [[0.65, 0.77], [0.65, 0.77]], 2)
        np.testing.assert_array_equal(xi.vector,
                                      equilibrium_extended_state([1, 1], [0.65, 0.77], 2))

    def test_wrong_length(self):
        with pytest.raises(ValueError):
            extended_state(np.zeros((3, 1)), np.zeros((2, 1)), 2)

    def test_one_step_update_matches_plant(self, rng):
        for _ in range(10):
            sys = random_system(rng)
            eta = observability_index(sys)
            ext = extended_system(sys, eta)
            x = rng.standard_normal(sys.n_x)
            us, ys = [], []
            for _ in range(eta + 3):
                u = rng.standard_normal(sys.n_u)
                x, y = simulate_step(sys, x, u)[0], sys.C @ x + sys.D @ u
                us.append(u)
                ys.append(y)
            for t in range(eta, eta + 3):
                xi = extended_state(us[t - eta:t], ys[t - eta:t], eta).vector
                xi_next = extended_state(us[t - eta + 1:t + 1], ys[t - eta + 1:t + 1], eta).vector
                np.testing.assert_allclose(ext.A @ xi + ext.B @ us[t], xi_next, atol=1e-9)
                np.testing.assert_allclose(ext.C @ xi + ext.D @ us[t], ys[t], atol=1e-9)


class TestRhoOracle:
    def test_zero_dynamics(self):
        sys = LtiSystem(np.zeros((2, 2)), np.eye(2), np.eye(2), np.zeros((2, 2)))
        assert all(rho_oracle(sys, i, 1) == 0 for i in range(4))

    def test_identity_output(self, rng):
        A = rng.standard_normal((3, 3)) * 0.5
        sys = LtiSystem.state_feedback(A, np.ones((3, 1)))
        for i in range(4):
            assert rho_oracle(sys, i, 1) == pytest.approx(
                np.linalg.norm(np.linalg.matrix_power(A, i + 1), 2), rel=1e-12)

    def test_four_tank_finite_and_eventually_decaying(self):
        # the values grow over the first steps (non-normal transient) and
        # decay at the spectral-radius rate afterwards
        sys = presets.four_tank()
        vals = [rho_oracle(sys, i, 2) for i in range(1, 11)]
        assert all(np.isfinite(vals))
        assert rho_oracle(sys, 200, 2) < vals[0]

    def test_submultiplicative_bound(self, rng):
        for _ in range(20):
            sys = random_system(rng)
            eta = observability_index(sys)
            Tp = np.linalg.pinv(observability_matrix(sys, eta))
            for i in range(5):
                bound = (np.linalg.norm(sys.C, 2) * np.linalg.norm(sys.A, 2) ** (i + eta)
                         * np.linalg.norm(Tp, 2))
                assert rho_oracle(sys, i, eta) <= bound * (1 + 1e-12)

    def test_unobservable(self):
        sys = LtiSystem(np.eye(2), np.ones((2, 1)), np.zeros((1, 2)), np.zeros((1, 1)))
        with pytest.raises(UnobservableError):
            rho_oracle(sys, 0, 2)
