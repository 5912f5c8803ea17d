import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from orbsync.errors import NonFiniteState, NonFiniteValue, NotConverged
from orbsync.numerics import (PeriodicGrid, find_periodic_solution, integrate_rk4, jacobian_fd,
                              monodromy, periodic_residual)

TWO_PI = 2 * math.pi


class TestIntegrateRK4:
    def test_zero_field_is_constant(self):
        tr = integrate_rk4(lambda t, x: np.zeros_like(x), 5.0, 0.0, 1.0, 0.1)
        assert np.all(tr.states == 5.0)
        assert tr.times[-1] == 1.0

    def test_growth_matches_exponential(self):
        tr = integrate_rk4(lambda t, x: x, 1.0, 0.0, 1.0, 1e-3)
        assert abs(tr.final[0] - math.e) <= 1e-9

    def test_decay_matches_exponential(self):
        tr = integrate_rk4(lambda t, x: -x, 1.0, 0.0, 10.0, 1e-2)
        assert abs(tr.final[0] / math.exp(-10.0) - 1.0) <= 1e-6

    def test_fourth_order_convergence(self):
        errs = [abs(integrate_rk4(lambda t, x: x, 1.0, 0.0, 1.0, dt).final[0] - math.e) for dt in (0.1, 0.05)]
        assert 14.0 <= errs[0] / errs[1] <= 18.0

    def test_last_step_is_truncated(self):
        tr = integrate_rk4(lambda t, x: np.ones_like(x), 0.0, 0.0, 1.0, 0.3)
        np.testing.assert_allclose(tr.times, [0.0, 0.3, 0.6, 0.9, 1.0])
        assert tr.final[0] == pytest.approx(1.0, abs=1e-14)

    def test_time_dependent_field(self):
        tr = integrate_rk4(lambda t, x: np.array([math.cos(t)]), 0.0, 0.0, 2.0, 1e-2)
        assert tr.final[0] == pytest.approx(math.sin(2.0), abs=1e-10)

    def test_blow_up_raises(self):
        with pytest.raises(NonFiniteState), np.errstate(over="ignore", invalid="ignore"):
            integrate_rk4(lambda t, x: x * x, 1.0, 0.0, 2.0, 0.01)

    def test_bad_interval(self):
        with pytest.raises(ValueError):
            integrate_rk4(lambda t, x: x, 1.0, 1.0, 0.0, 0.1)
        with pytest.raises(ValueError):
            integrate_rk4(lambda t, x: x, 1.0, 0.0, 1.0, 2.0)

    def test_bitwise_deterministic(self):
        f = lambda t, x: np.array([x[1], -math.sin(x[0])])
        a = integrate_rk4(f, [1.0, 0.0], 0.0, 5.0, 0.01)
        b = integrate_rk4(f, [1.0, 0.0], 0.0, 5.0, 0.01)
        assert a.states.tobytes() == b.states.tobytes()


class TestJacobianFD:
    def test_identity(self):
        np.testing.assert_allclose(jacobian_fd(lambda x: x, [0.3, -2.0]), np.eye(2), atol=1e-9)

    def test_hand_derivative(self):
        J = jacobian_fd(lambda x: np.array([x[0] ** 2, x[0] * x[1]]), [1.0, 2.0], eps=1e-5)
        np.testing.assert_allclose(J, [[2.0, 0.0], [2.0, 1.0]], atol=1e-8)

    def test_constant(self):
        np.testing.assert_array_equal(jacobian_fd(lambda x: np.array([3.0, 4.0, 5.0]), [1.0, 2.0]),
                                      np.zeros((3, 2)))

    def test_non_finite_probe(self):
        with pytest.raises(NonFiniteValue):
            jacobian_fd(lambda x: np.array([1.0 / x[0] if x[0] > 0 else np.nan]), [0.0])

    def test_step_scales_with_coordinate(self):
        # exact for quadratics regardless of the step, so only conditioning matters here
        J = jacobian_fd(lambda x: np.array([x[0] ** 2]), [1e6])
        assert J[0, 0] == pytest.approx(2e6, rel=1e-9)


class TestPeriodicGrid:
    def test_minimum_size(self):
        with pytest.raises(ValueError):
            PeriodicGrid(1.0, np.zeros(8))

    def test_node_values_and_spacing(self):
        g = PeriodicGrid.from_function(np.sin, TWO_PI, 64)
        assert g.step == TWO_PI / 64
        np.testing.assert_allclose(g(g.nodes()), np.sin(g.nodes()), rtol=0, atol=1e-15)

    def test_linear_interpolation_error_order(self):
        errs = []
        for N in (64, 128):
            g = PeriodicGrid.from_function(np.sin, TWO_PI, N)
            th = np.linspace(0, TWO_PI, 1001)
            errs.append(np.max(np.abs(g(th) - np.sin(th))))
        assert 3.5 < errs[0] / errs[1] < 4.5

    def test_hermite_interpolation_error_order(self):
        errs = []
        for N in (64, 128):
            g = PeriodicGrid.from_function(np.sin, TWO_PI, N, slope_fn=np.cos)
            th = np.linspace(0, TWO_PI, 1001)
            errs.append(np.max(np.abs(g(th) - np.sin(th))))
        assert 14 < errs[0] / errs[1] < 18

    def test_derivatives(self):
        g = PeriodicGrid.from_function(np.sin, TWO_PI, 512, slope_fn=np.cos)
        th = np.linspace(0, TWO_PI, 77)
        np.testing.assert_allclose(g.evaluate(th, 1), np.cos(th), atol=1e-7)
        np.testing.assert_allclose(g.evaluate(th, 2), -np.sin(th), atol=1e-3)

    def test_fd_slopes_are_sixth_order(self):
        errs = []
        for N in (32, 64):
            g = PeriodicGrid.from_function(np.sin, TWO_PI, N)
            errs.append(np.max(np.abs(g.fd_derivative() - np.cos(g.nodes()))))
        assert 50 < errs[0] / errs[1] < 80

    def test_matrix_samples(self):
        g = PeriodicGrid.from_function(lambda t: np.array([[np.cos(t), 0.0], [1.0, t * 0]]), TWO_PI, 32)
        assert g.shape == (2, 2)
        assert g(np.array([0.0, 1.0])).shape == (2, 2, 2)

    def test_reversed(self):
        g = PeriodicGrid.from_function(np.sin, TWO_PI, 64, slope_fn=np.cos)
        r = g.reversed()
        th = np.linspace(0, TWO_PI, 13)
        np.testing.assert_allclose(r(th), g(-th), atol=1e-14)

    @settings(max_examples=100, deadline=None)
    @given(theta=st.floats(-50.0, 50.0, allow_nan=False))
    def test_evaluation_is_periodic(self, theta):
        g = PeriodicGrid.from_function(lambda t: np.array([np.sin(t), np.cos(3 * t)]), TWO_PI, 64).with_fd_slopes()
        # the shifted argument itself is rounded, so agreement is to rounding level
        np.testing.assert_allclose(g(theta), g(theta + TWO_PI), rtol=0, atol=1e-12)


class TestPeriodicSolution:
    def _const(self, a, c, N=256):
        return (PeriodicGrid.constant(TWO_PI, [[a]], N), PeriodicGrid.constant(TWO_PI, [c], N))

    def test_stable_forward(self):
        A, c = self._const(-1.0, 1.0)
        y = find_periodic_solution(A, c, "forward", tol=1e-10)
        np.testing.assert_allclose(y.samples, 1.0, atol=1e-9)

    def test_reversed_direction(self):
        A, c = self._const(1.0, 1.0)
        y = find_periodic_solution(A, c, "reversed", tol=1e-10)
        np.testing.assert_allclose(y.samples, -1.0, atol=1e-9)

    def test_unstable_forward_fails(self):
        A, c = self._const(1.0, 1.0)
        with pytest.raises(NotConverged):
            find_periodic_solution(A, c, "forward")

    def test_time_varying_oracle(self):
        # y' = -y + sin(t) has periodic solution (sin t - cos t) / 2
        N = 1024
        A = PeriodicGrid.constant(TWO_PI, [[-1.0]], N)
        c = PeriodicGrid.from_function(lambda t: np.array([np.sin(t)]), TWO_PI, N)
        y = find_periodic_solution(A, c, "forward", tol=1e-10)
        th = y.nodes()
        np.testing.assert_allclose(y.samples[:, 0], (np.sin(th) - np.cos(th)) / 2, atol=1e-9)

    @pytest.mark.parametrize("direction,sign", [("forward", -1.0), ("reversed", 1.0)])
    def test_residual_within_ten_tol(self, direction, sign):
        N = 2048
        tol = 1e-8
        A = PeriodicGrid.from_function(lambda t: np.array([[sign * (1.0 + 0.5 * np.sin(t)), 0.3],
                                                          [0.0, sign * 0.7]]), TWO_PI, N)
        c = PeriodicGrid.from_function(lambda t: np.array([np.cos(2 * t), 1.0 + np.sin(t)]), TWO_PI, N)
        y = find_periodic_solution(A, c, direction, tol=tol)
        assert periodic_residual(y, A, c) <= 10 * tol

    def test_monodromy_scalar(self):
        A = PeriodicGrid.constant(TWO_PI, [[-1 / math.pi]], 512)
        assert monodromy(A)[0, 0] == pytest.approx(math.exp(-2.0), rel=1e-12)
