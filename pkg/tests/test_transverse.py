import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from orbsync.errors import DenominatorNonPositive, OutOfTube
from orbsync.numerics import jacobian_fd
from orbsync.transverse import (LinearizedExtended, TransverseChart, extended_rhs, linearize_extended, phi,
                                transverse_fields)

OMEGA = math.pi


def _random_in_tube(chart, rng, count, fraction=0.5):
    th = rng.uniform(0, chart.orbit.T_theta, count)
    dirs = rng.normal(size=(count, chart.n - 1))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    r = rng.uniform(0, fraction * chart.tube_radius, count)
    return chart.beta(dirs * r[:, None], th)


class TestProjection:
    def test_on_orbit_nodes_monotone(self, rotor):
        _, orbit, chart = rotor
        th = orbit.theta_nodes()[::64]
        np.testing.assert_allclose(chart.project(orbit.x_of_theta(th)), th, atol=1e-12)

    def test_on_orbit_nodes_orthogonal(self, vdp):
        _, orbit, chart = vdp
        th = orbit.theta_nodes()[::64]
        np.testing.assert_allclose(chart.project(orbit.x_of_theta(th)), th, atol=1e-12)

    def test_strategies_agree_on_orbit(self, rotor):
        _, orbit, mono = rotor
        ortho = TransverseChart(orbit, "orthogonal")
        th = orbit.theta_nodes()[::97]
        X = orbit.x_of_theta(th)
        np.testing.assert_allclose(ortho.project(X), mono.project(X), atol=1e-12)

    def test_monotone_is_phase_coordinate(self, rotor):
        _, _, chart = rotor
        assert chart.project(np.array([1.3, OMEGA + 0.2])) == pytest.approx(1.3, abs=1e-15)

    def test_far_state_out_of_tube(self, rotor, vdp):
        with pytest.raises(OutOfTube):
            rotor[2].project(np.array([1.0, OMEGA + 5.0]))
        with pytest.raises(OutOfTube):
            vdp[2].project(np.array([0.0, 0.0]))

    def test_orthogonality(self, vdp, rng):
        _, orbit, chart = vdp
        X = _random_in_tube(chart, rng, 50)
        th = chart.project(X)
        e = X - orbit.x_of_theta(th)
        tang = orbit.x_of_theta(th, 1)
        assert np.max(np.abs(np.sum(e * tang, axis=1))) <= 1e-9

    def test_hint_matches_global_search(self, vdp, rng):
        _, _, chart = vdp
        X = _random_in_tube(chart, rng, 40)
        th = chart.project(X)
        np.testing.assert_allclose(chart.project(X, theta_hint=th + 0.05), th, atol=1e-12)


class TestCoordinates:
    def test_alpha_vanishes_on_orbit(self, rotor, vdp):
        for _, orbit, chart in (rotor, vdp):
            th = np.linspace(0, 2 * math.pi, 29, endpoint=False)
            assert np.max(np.abs(chart.alpha(orbit.x_of_theta(th), th))) <= 1e-9

    def test_rotor_velocity_deviation(self, rotor):
        _, _, chart = rotor
        xi, th = chart.coordinates(np.array([1.3, OMEGA + 0.2]))
        np.testing.assert_allclose(xi, [0.2], atol=1e-14)
        assert th == pytest.approx(1.3)

    def test_rotor_round_trip(self, rotor):
        _, _, chart = rotor
        x = np.array([1.3, OMEGA + 0.2])
        xi, th = chart.coordinates(x)
        np.testing.assert_allclose(chart.beta(xi, th), x, atol=1e-10)

    @pytest.mark.parametrize("which", ["rotor", "vdp"])
    def test_round_trip_random_states(self, which, request, rng):
        _, _, chart = request.getfixturevalue(which)
        X = _random_in_tube(chart, rng, 1000)
        xi, th = chart.coordinates(X)
        err = chart.beta(xi, th) - X
        if which == "rotor":
            err[:, 0] = np.mod(err[:, 0] + math.pi, 2 * math.pi) - math.pi
        assert np.max(np.linalg.norm(err, axis=1)) <= 1e-8

    @settings(max_examples=60, deadline=None)
    @given(theta=st.floats(0.0, 2 * math.pi, exclude_max=True), xi=st.floats(-0.2, 0.2))
    def test_beta_then_alpha(self, vdp, theta, xi):
        _, _, chart = vdp
        x = chart.beta(np.array([xi]), theta)
        xi2, th2 = chart.coordinates(x)
        assert xi2[0] == pytest.approx(xi, abs=1e-9)
        d = (th2 - theta + math.pi) % (2 * math.pi) - math.pi
        assert abs(d) <= 1e-9


class TestTransverseFields:
    def test_rotor_on_orbit(self, rotor):
        f_xi, f_th, g_xi, g_th = transverse_fields(*rotor, np.zeros(1), 0.7)
        np.testing.assert_allclose(f_xi, [0.0], atol=1e-12)
        assert f_th == pytest.approx(OMEGA, abs=1e-14)
        np.testing.assert_allclose(g_xi, [[1.0]], atol=1e-14)
        np.testing.assert_allclose(g_th, [0.0], atol=1e-14)

    def test_rotor_off_orbit_phase_speed(self, rotor):
        assert transverse_fields(*rotor, np.array([0.3]), 2.0)[1] == pytest.approx(OMEGA + 0.3, abs=1e-14)

    @pytest.mark.parametrize("which", ["rotor", "vdp"])
    def test_orbit_is_invariant(self, which, request):
        plant, orbit, chart = request.getfixturevalue(which)
        th = orbit.theta_nodes()[::16]
        f_xi, f_th, _, _ = transverse_fields(plant, orbit, chart, np.zeros((len(th), 1)), th)
        assert np.max(np.abs(f_xi)) <= 1e-6
        np.testing.assert_allclose(f_th, orbit.rate(th), rtol=1e-6)
        assert np.all(f_th > 0)


class TestPhi:
    def test_trivial_solution(self, rotor, vdp):
        for sysm in (rotor, vdp):
            np.testing.assert_allclose(phi(*sysm, np.zeros(1), 1.0, np.zeros(1)), [0.0], atol=1e-6)

    def test_rotor_closed_form(self, rotor):
        val = phi(*rotor, np.array([0.1]), 0.4, np.array([0.5]))
        assert val[0] == pytest.approx(0.5 / (OMEGA + 0.1), abs=1e-12)
        assert val[0] == pytest.approx(0.15424, abs=1e-5)

    def test_zero_phase_speed(self, rotor):
        with pytest.raises(DenominatorNonPositive):
            phi(*rotor, np.array([-OMEGA]), 0.4, np.zeros(1))


class TestExtendedRhs:
    def test_trivial_solution(self, rotor):
        dxi, dh = extended_rhs(*rotor, np.zeros(1), 2.0, np.zeros(1))
        assert abs(dxi[0]) <= 1e-12 and abs(dh) <= 1e-12

    def test_lateness_closed_form(self, rotor):
        _, dh = extended_rhs(*rotor, np.array([0.1]), 2.0, np.zeros(1))
        assert dh == pytest.approx(1 / (OMEGA + 0.1) - 1 / OMEGA, abs=1e-12)

    def test_input_does_not_move_phase(self, rotor):
        _, dh = extended_rhs(*rotor, np.zeros(1), 2.0, np.array([0.5]))
        assert dh == pytest.approx(0.0, abs=1e-15)

    def test_h_channel_zero_on_orbit(self, vdp):
        plant, orbit, chart = vdp
        th = orbit.theta_nodes()[::32]
        _, dh = extended_rhs(plant, orbit, chart, np.zeros((len(th), 1)), th, np.zeros((len(th), 1)))
        assert np.max(np.abs(dh)) <= 1e-6


class TestLinearization:
    def test_rotor_closed_form(self, rotor_lin):
        L = rotor_lin
        assert np.max(np.abs(L.A_xi.samples)) <= 1e-8
        assert np.max(np.abs(L.B_xi.samples - 1 / OMEGA)) <= 1e-8
        assert np.max(np.abs(L.A_h.samples + 1 / OMEGA ** 2)) <= 1e-8
        assert np.max(np.abs(L.B_h.samples)) <= 1e-8

    @pytest.mark.parametrize("which", ["rotor", "vdp"])
    def test_matches_pointwise_fd(self, which, request, rng):
        plant, orbit, chart = request.getfixturevalue(which)
        L = request.getfixturevalue(which + "_lin")
        for j in rng.integers(0, L.N, 32):
            th = L.A_xi.nodes()[j]

            def both(z):
                dxi, dh = extended_rhs(plant, orbit, chart, z[:1], th, z[1:])
                return np.array([dxi[0], dh])

            J = jacobian_fd(both, np.zeros(2))
            np.testing.assert_allclose(J, [[L.A_xi.samples[j, 0, 0], L.B_xi.samples[j, 0, 0]],
                                           [L.A_h.samples[j, 0, 0], L.B_h.samples[j, 0, 0]]], atol=1e-8)

    def test_vdp_is_phase_dependent(self, vdp_lin):
        A = vdp_lin.A_xi.samples[:, 0, 0]
        assert np.max(np.abs(A - A.mean())) > 0.1

    def test_shapes_and_period(self, vdp_lin):
        L = vdp_lin
        assert (L.A_xi.shape, L.B_xi.shape, L.A_h.shape, L.B_h.shape) == ((1, 1), (1, 1), (1, 1), (1, 1))
        assert {g.period for g in (L.A_xi, L.B_xi, L.A_h, L.B_h)} == {2 * math.pi}
        assert all(np.all(np.isfinite(g.samples)) for g in (L.A_xi, L.B_xi, L.A_h, L.B_h))

    @pytest.mark.parametrize("which", ["rotor", "vdp"])
    def test_remainder_is_quadratic(self, which, request, rng):
        plant, orbit, chart = request.getfixturevalue(which)
        L = request.getfixturevalue(which + "_lin")
        idx = rng.integers(0, L.N, 16)
        th = L.A_xi.nodes()[idx]
        dirs = rng.normal(size=(16, 2))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        deltas = np.array([1e-2, 1e-3, 1e-4])
        rem = []
        for d in deltas:
            z = d * dirs
            dxi = phi(plant, orbit, chart, z[:, :1], th, z[:, 1:])
            lin = L.A_xi.samples[idx, 0, 0] * z[:, 0] + L.B_xi.samples[idx, 0, 0] * z[:, 1]
            rem.append(np.max(np.abs(dxi[:, 0] - lin)))
        slope = np.polyfit(np.log(deltas), np.log(rem), 1)[0]
        assert 1.8 <= slope <= 2.2

    def test_csv_columns_round_trip(self, vdp_lin):
        names, data = vdp_lin.columns()
        assert names == ["theta", "A_xi_00", "B_xi_00", "A_h_00", "B_h_00"]
        back = LinearizedExtended.from_columns(names, data, 2 * math.pi, 1, 1)
        np.testing.assert_array_equal(back.A_xi.samples, vdp_lin.A_xi.samples)

    def test_three_dimensional_xi(self):
        from orbsync.plant import rotor_oscillator_plant, rotor_oscillator_reference
        plant = rotor_oscillator_plant()
        orbit = rotor_oscillator_reference(plant, N=512)
        L = linearize_extended(plant, orbit, TransverseChart(orbit, "monotone"), 512)
        assert L.A_xi.shape == (3, 3) and L.B_xi.shape == (3, 1) and L.A_h.shape == (1, 3)
