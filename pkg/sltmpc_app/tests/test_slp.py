from dataclasses import replace

import numpy as np
from django.test import SimpleTestCase

from sltmpc_app.exceptions import DimensionMismatch, FirRequired, ValidationFailed
from sltmpc_app.mpc import lqr_gain, make_terminal, solve_fir_sltmpc
from sltmpc_app.polytope import Polytope
from sltmpc_app.slp import (LtiSystem, SystemResponses, error_trajectory, realize_controller,
                            simulate_realized, static_gain_responses, validate_responses)

from .fixtures import BENCHMARK_X0, DEADBEAT_K, benchmark_cost, benchmark_system, deadbeat_system


class LtiSystemTests(SimpleTestCase):

    def test_dimensions_checked(self):
        sys = benchmark_system()
        with self.assertRaises(DimensionMismatch):
            LtiSystem(sys.A, np.ones((3, 1)), sys.X, sys.U, sys.W)
        with self.assertRaises(DimensionMismatch):
            LtiSystem(sys.A, sys.B, sys.X, Polytope.box(1.0, 1.0), sys.W)

    def test_with_theta_rescales_first_axis(self):
        sys = benchmark_system(0.04).with_theta(0.07)
        lower, upper = sys.W.axis_bounds
        np.testing.assert_allclose(lower, [-0.07, -0.1])
        np.testing.assert_allclose(upper, [0.07, 0.1])

    def test_with_theta_needs_box(self):
        sys = benchmark_system()
        skewed = replace(sys, W=Polytope([[1.0, 1.0], [-1.0, 0.0], [0.0, -1.0]], [0.1, 0.1, 0.1]))
        with self.assertRaises(DimensionMismatch):
            skewed.with_theta(0.05)

    def test_step(self):
        sys = benchmark_system()
        np.testing.assert_allclose(sys.step(np.array([1.0, 0.0]), 0.2, np.array([0.01, 0.0])),
                                   [1.05 + 0.1 + 0.01, 0.1])


class ResponseTests(SimpleTestCase):

    def test_deadbeat_gain_gives_fir_responses(self):
        sys = deadbeat_system()
        resp = static_gain_responses(sys.A, sys.B, DEADBEAT_K, 4)
        self.assertTrue(resp.fir)
        self.assertTrue(validate_responses(resp, sys).passed)
        np.testing.assert_array_equal(resp.error_block(7), np.zeros((2, 2)))

    def test_lqr_responses_are_not_fir(self):
        sys = benchmark_system()
        resp = static_gain_responses(sys.A, sys.B, lqr_gain(sys.A, sys.B, np.eye(2), np.eye(1)), 5)
        self.assertFalse(resp.fir)
        self.assertTrue(validate_responses(resp, sys).passed)
        with self.assertRaises(FirRequired):
            resp.input_block(6)

    def test_broken_recursion_is_reported(self):
        sys = benchmark_system()
        resp = static_gain_responses(sys.A, sys.B, np.array([[-0.5, -0.5]]), 3)
        Phi_e = resp.Phi_e.copy()
        Phi_e[2] += 0.01
        broken = SystemResponses(3, resp.phi_z, resp.phi_v, Phi_e, resp.Phi_k)
        report = validate_responses(broken, sys)
        self.assertIn('error_recursion', report.violations)
        with self.assertRaises(ValidationFailed):
            report.raise_if_failed()

    def test_block_shapes_checked(self):
        with self.assertRaises(DimensionMismatch):
            SystemResponses(2, np.zeros((3, 2)), np.zeros((3, 1)), np.zeros((2, 2, 2)), np.zeros((3, 1, 2)))

    def test_nominal_adds_initial_state_response(self):
        sys = deadbeat_system()
        resp = static_gain_responses(sys.A, sys.B, DEADBEAT_K, 3)
        z, v = resp.nominal(np.array([1.0, 2.0]))
        np.testing.assert_allclose(z[1], sys.A @ [1.0, 2.0])
        np.testing.assert_allclose(v, np.zeros((4, 1)))


class RealizationTests(SimpleTestCase):

    def setUp(self):
        self.sys = benchmark_system()
        self.K = np.array([[-0.6, -0.9]])
        self.resp = static_gain_responses(self.sys.A, self.sys.B, self.K, 6)

    def test_static_gain_is_recovered(self):
        controller = realize_controller(self.resp, self.sys)
        np.testing.assert_allclose(controller.gains[0], self.K, atol=1e-12)
        np.testing.assert_allclose(controller.gains[1:], 0.0, atol=1e-12)
        self.assertEqual(controller.block_matrix().shape, (7, 14))

    def test_realized_loop_matches_state_feedback(self):
        controller = realize_controller(self.resp, self.sys)
        rng = np.random.default_rng(1)
        w_seq = rng.uniform(-0.04, 0.04, size=(5, 2))
        states, inputs = simulate_realized(controller, self.sys, [0.2, -0.3], w_seq)
        x = np.array([0.2, -0.3])
        for i, w in enumerate(w_seq):
            u = self.K @ x
            np.testing.assert_allclose(inputs[i], u, atol=1e-12)
            x = self.sys.step(x, u, w)
            np.testing.assert_allclose(states[i + 1], x, atol=1e-12)

    def test_long_realization_needs_fir(self):
        with self.assertRaises(FirRequired):
            realize_controller(self.resp, self.sys, horizon=10)

    def test_error_trajectory_follows_error_dynamics(self):
        w_seq = np.random.default_rng(2).uniform(-0.04, 0.04, size=(4, 2))
        errors, controls = error_trajectory(self.resp, w_seq)
        e = np.zeros(2)
        for i, w in enumerate(w_seq):
            k = self.K @ e
            np.testing.assert_allclose(controls[i], k, atol=1e-12)
            e = self.sys.A @ e + self.sys.B @ k + w
            np.testing.assert_allclose(errors[i + 1], e, atol=1e-12)

    def test_error_trajectory_past_horizon_needs_fir(self):
        with self.assertRaises(FirRequired):
            error_trajectory(self.resp, np.zeros((8, 2)))


class OptimizedRealizationTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.sys = benchmark_system(0.04)
        cost = benchmark_cost(cls.sys)
        terminal = make_terminal('scaled-pi', cls.sys, lqr_gain(cls.sys.A, cls.sys.B, cost.Q, cost.R))
        cls.resp = solve_fir_sltmpc(cls.sys, BENCHMARK_X0, cost, terminal, N=10).responses

    def test_realized_loop_matches_convolution(self):
        controller = realize_controller(self.resp, self.sys)
        z, v = self.resp.nominal(BENCHMARK_X0)
        rng = np.random.default_rng(5)
        for _ in range(3):
            w_seq = rng.uniform([-0.04, -0.1], [0.04, 0.1], size=(10, 2))
            states, inputs = simulate_realized(controller, self.sys, BENCHMARK_X0, w_seq)
            errors, controls = error_trajectory(self.resp, w_seq)
            np.testing.assert_allclose(states, z + errors, atol=1e-6)
            np.testing.assert_allclose(inputs, v + controls, atol=1e-6)

    def test_realized_gain_is_lower_triangular_toeplitz(self):
        controller = realize_controller(self.resp, self.sys)
        K = controller.block_matrix()
        self.assertEqual(K.shape, (11, 22))
        np.testing.assert_array_equal(K[:1, 2:], 0.0)
        np.testing.assert_allclose(K[5:6, 4:6], controller.gains[3])
