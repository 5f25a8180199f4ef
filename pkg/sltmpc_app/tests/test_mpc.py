import numpy as np
from django.test import SimpleTestCase, tag
from scipy.linalg import solve_discrete_are

from sltmpc_app.exceptions import (BackendCapability, Infeasible, NotConvex, NotTwoDimensional, UnsupportedKind,
                                   UnsupportedTerminal)
from sltmpc_app.mpc import (CtMpcController, FirSltmpcController, NominalMpcController, OfflineSltmpcController,
                            RpiTubeMpcController, TerminalSpec, build_fir_sltmpc, candidate_violation,
                            dual_tightenings, lqr_gain, make_controller, make_terminal, nominal_mpc,
                            quadratic_cost, riccati, shift_candidate, solve_fir_sltmpc, support_tightenings,
                            synthesize_tubes)
from sltmpc_app.polytope import Polytope, extreme_points, tightening
from sltmpc_app.sldrs import sldrs_tightenings
from sltmpc_app.slp import LtiSystem, static_gain_responses
from sltmpc_app.solvers import CvxpyBackend, QpBuilder, solve_or_raise

from .fixtures import (BENCHMARK_X0, DEADBEAT_K, benchmark_cost, benchmark_system, deadbeat_system,
                       feasible_starts, nominal_benchmark)


def lp_disturbance_set(W):
    """Same set as W with a redundant oblique row, so supports go through the LP path"""
    return Polytope(np.vstack([W.H, [[1.0, 1.0]]]), np.append(W.h, 10.0))


class GainTests(SimpleTestCase):

    def test_riccati_matches_scipy(self):
        sys = benchmark_system()
        Q, R = 100.0 * np.eye(2), 10.0 * np.eye(1)
        K, P = riccati(sys.A, sys.B, Q, R)
        P_ref = solve_discrete_are(sys.A, sys.B, Q, R)
        np.testing.assert_allclose(P, P_ref, rtol=1e-8)
        np.testing.assert_allclose(K, -np.linalg.solve(R + sys.B.T @ P_ref @ sys.B, sys.B.T @ P_ref @ sys.A),
                                   rtol=1e-8)
        self.assertLess(max(abs(np.linalg.eigvals(sys.closed_loop(K)))), 1.0)

    def test_terminal_weight_for_given_gain(self):
        sys = benchmark_system()
        K = np.array([[-0.6, -0.9]])
        cost = quadratic_cost(sys, np.eye(2), np.eye(1), K=K)
        A_K = sys.closed_loop(K)
        residual = A_K.T @ cost.P_f @ A_K - cost.P_f + np.eye(2) + K.T @ K
        np.testing.assert_allclose(residual, 0.0, atol=1e-10)

    def test_stage_cost(self):
        cost = benchmark_cost(benchmark_system())
        self.assertAlmostEqual(cost.stage([1.0, -1.0], [0.5]), 200.0 + 2.5)

    def test_weights_must_be_convex(self):
        sys = benchmark_system()
        with self.assertRaises(NotConvex):
            quadratic_cost(sys, np.eye(2), -np.eye(1))
        with self.assertRaises(NotConvex):
            quadratic_cost(sys, [[1.0, 2.0], [0.0, 1.0]], np.eye(1))
        with self.assertRaises(NotConvex):
            quadratic_cost(sys, np.eye(2), np.zeros((1, 1)))


class TerminalTests(SimpleTestCase):

    def test_unknown_kind(self):
        with self.assertRaises(UnsupportedKind):
            TerminalSpec('ellipsoid', np.zeros((1, 2)))

    def test_implicit_terminal_needs_longer_horizon(self):
        sys = benchmark_system()
        K = lqr_gain(sys.A, sys.B, np.eye(2), np.eye(1))
        with self.assertRaises(UnsupportedTerminal):
            make_terminal('implicit-nominal', sys, K, N=10, N_mpc=10)

    def test_scaled_terminal_base_is_invariant(self):
        sys = benchmark_system()
        K = lqr_gain(sys.A, sys.B, 100.0 * np.eye(2), 10.0 * np.eye(1))
        terminal = make_terminal('scaled-pi', sys, K)
        S = terminal.base
        A_K = sys.closed_loop(K)
        for row, offset in zip(S.H, S.h):
            self.assertLessEqual(S.support(A_K.T @ row), offset + 1e-7)
        self.assertTrue(terminal.scaled(0.5).contains(np.zeros(2)))


class QpLayerTests(SimpleTestCase):

    def test_quadratic_terms(self):
        b = QpBuilder().add_variable('x', 2)
        b.quadratic(np.diag([1.0, 2.0]), [(np.eye(2), b.columns('x'))], offset=[1.0, 0.0])
        qp = b.build()
        np.testing.assert_allclose(qp.P.toarray(), np.diag([2.0, 4.0]))
        self.assertAlmostEqual(qp.objective(np.zeros(2)), 1.0)
        self.assertAlmostEqual(qp.objective(np.ones(2)), 6.0)
        self.assertTrue(qp.check_convex())

    def test_solve_and_feasibility(self):
        b = QpBuilder().add_variable('x', 1)
        b.quadratic([[1.0]], [(np.eye(1), b.columns('x'))], offset=[-1.0])
        b.inequality([(np.eye(1), b.columns('x'))], [0.5])
        qp = b.build()
        backend = CvxpyBackend()
        result = solve_or_raise(backend, qp)
        self.assertAlmostEqual(result.x[0], 0.5, places=6)
        self.assertAlmostEqual(result.objective, 0.25, places=6)
        self.assertTrue(backend.feasible(qp))

        b.inequality([(-np.eye(1), b.columns('x'))], [-1.0])
        infeasible = b.build()
        self.assertFalse(backend.feasible(infeasible))
        with self.assertRaises(Infeasible):
            solve_or_raise(backend, infeasible)

    def test_non_convex_objective_rejected_before_solving(self):
        b = QpBuilder().add_variable('x', 2)
        b.quadratic(np.diag([1.0, -1.0]), [(np.eye(2), b.columns('x'))])
        b.inequality([(np.eye(2), b.columns('x'))], [1.0, 1.0])
        qp = b.build()
        with self.assertRaises(NotConvex):
            qp.check_convex()
        with self.assertRaises(NotConvex):
            solve_or_raise(CvxpyBackend(), qp)

    def test_capabilities(self):
        backend = CvxpyBackend(capabilities={'qp'})
        with self.assertRaises(BackendCapability):
            backend.require('sdp')


class FirSltmpcTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.sys = benchmark_system(0.04)
        cls.cost = benchmark_cost(cls.sys)
        cls.K = lqr_gain(cls.sys.A, cls.sys.B, cls.cost.Q, cls.cost.R)
        cls.terminal = make_terminal('scaled-pi', cls.sys, cls.K)
        cls.solution = solve_fir_sltmpc(cls.sys, BENCHMARK_X0, cls.cost, cls.terminal, N=10)

    def test_solution_at_benchmark_start(self):
        solution = self.solution
        self.assertTrue(self.sys.U.contains(solution.u0, tol=1e-7))
        self.assertTrue(solution.responses.fir)
        self.assertEqual(solution.z.shape, (11, 2))
        self.assertEqual(solution.v.shape, (10, 1))
        np.testing.assert_allclose(solution.z[0], BENCHMARK_X0, atol=1e-9)
        self.assertGreaterEqual(solution.lambda_f, -1e-9)
        self.assertGreater(solution.objective, 0.0)

    def test_problem_variables(self):
        qp = build_fir_sltmpc(self.sys, BENCHMARK_X0, self.cost, self.terminal, 10)
        for name in ('phi_z', 'phi_v', 'Phi_e', 'Phi_k', 'Lambda_e', 'Lambda_k', 'lambda_f'):
            self.assertIn(name, qp.index)
        self.assertTrue(qp.check_convex(tol=1e-6))

    def test_dual_tightenings_match_support_lps(self):
        state, inputs = dual_tightenings(self.solution)
        W_lp = lp_disturbance_set(self.sys.W)
        resp = self.solution.responses
        for i in range(1, 11):
            expected_x = tightening(self.sys.X.H, list(resp.Phi_e[:i]), W_lp)
            expected_u = tightening(self.sys.U.H, list(resp.Phi_k[:i]), W_lp)
            np.testing.assert_allclose(state[i], expected_x, atol=1e-6)
            np.testing.assert_allclose(inputs[i], expected_u, atol=1e-6)

    def test_raw_multipliers_bound_the_tightening(self):
        raw = solve_fir_sltmpc(self.sys, BENCHMARK_X0, self.cost, self.terminal, N=10, polish=False)
        state, inputs = dual_tightenings(raw)
        tubes = support_tightenings(raw, self.sys)
        self.assertTrue(np.all(state >= tubes.state_offsets - 1e-6))
        self.assertTrue(np.all(inputs >= tubes.input_offsets - 1e-6))

    def test_shift_candidate_is_feasible(self):
        for w in extreme_points(self.sys.W):
            candidate = shift_candidate(self.solution, self.sys, BENCHMARK_X0, w)
            np.testing.assert_allclose(candidate.z[0], candidate.x_next, atol=1e-9)
            self.assertLessEqual(candidate_violation(candidate, self.solution, self.sys), 1e-6)

    @tag('slow')
    def test_shift_candidate_on_random_solutions(self):
        for x0 in feasible_starts(100, seed=3):
            solution = solve_fir_sltmpc(self.sys, x0, self.cost, self.terminal, N=10)
            for w in extreme_points(self.sys.W):
                candidate = shift_candidate(solution, self.sys, x0, w)
                self.assertLessEqual(candidate_violation(candidate, solution, self.sys), 1e-6)

    @tag('slow')
    def test_dual_exactness_on_random_solutions(self):
        W_lp = lp_disturbance_set(self.sys.W)
        for x0 in feasible_starts(50, seed=4):
            solution = solve_fir_sltmpc(self.sys, x0, self.cost, self.terminal, N=10)
            state, _ = dual_tightenings(solution)
            expected = tightening(self.sys.X.H, list(solution.responses.Phi_e[:10]), W_lp)
            np.testing.assert_allclose(state[10], expected, atol=1e-6)

    def test_controller_feasibility_check(self):
        controller = FirSltmpcController(self.sys, self.cost, 10, K=self.K, terminal=self.terminal)
        self.assertTrue(controller.is_feasible(BENCHMARK_X0))
        self.assertFalse(controller.is_feasible(np.array([0.9, 0.0])))
        np.testing.assert_allclose(controller(BENCHMARK_X0), self.solution.u0, atol=1e-5)

    def test_other_terminal_kinds(self):
        x0 = np.array([-0.3, 0.2])
        steady = make_terminal('steady-state-set', self.sys, self.K)
        solution = solve_fir_sltmpc(self.sys, x0, self.cost, steady, N=10, polish=False)
        residual = (self.sys.A - np.eye(2)) @ solution.z[-1] + self.sys.B @ solution.u_s
        np.testing.assert_allclose(residual, 0.0, atol=1e-6)

        implicit = make_terminal('implicit-nominal', self.sys, self.K, N=10, N_mpc=20)
        solution = solve_fir_sltmpc(self.sys, x0, self.cost, implicit, N=10, polish=False)
        self.assertEqual(solution.horizon, 20)
        np.testing.assert_allclose(solution.z[-1], 0.0, atol=1e-6)

    def test_rpi_terminal_mode(self):
        controller = FirSltmpcController(self.sys, self.cost, 10, K=self.K, mode='non-fir-rpi')
        self.assertEqual(controller.method, 'sltmpc-rpi')
        solution = controller.solve(np.array([-0.3, 0.2]))
        self.assertFalse(solution.responses.fir)


class NominalEquivalenceTests(SimpleTestCase):

    def check_equivalence(self, starts):
        sys = nominal_benchmark()
        cost = benchmark_cost(sys)
        K = lqr_gain(sys.A, sys.B, cost.Q, cost.R)
        terminal = make_terminal('scaled-pi', sys, K)
        for x0 in starts:
            robust = solve_fir_sltmpc(sys, x0, cost, terminal, N=10, polish=False)
            plain = nominal_mpc(sys, x0, cost, terminal, N=10)
            np.testing.assert_allclose(robust.objective, plain.objective, rtol=1e-6, atol=1e-6)

    def test_zero_disturbance_gives_nominal_objective(self):
        self.check_equivalence(feasible_starts(5, seed=1))

    @tag('slow')
    def test_zero_disturbance_on_many_starts(self):
        self.check_equivalence(feasible_starts(50, seed=2))


class DeadbeatComparisonTests(SimpleTestCase):

    def test_ct_mpc_and_offline_tubes_agree(self):
        sys = deadbeat_system()
        cost = quadratic_cost(sys, np.eye(2), np.eye(1))
        tubes = sldrs_tightenings(static_gain_responses(sys.A, sys.B, DEADBEAT_K, 5), sys)
        terminal_set = Polytope.box(1.0, 1.0)
        ct = CtMpcController(sys, cost, 5, K=DEADBEAT_K, terminal_set=terminal_set)
        offline = OfflineSltmpcController(sys, cost, 5, K=DEADBEAT_K, tubes=tubes,
                                          terminal=TerminalSpec('fixed-polytope', DEADBEAT_K, base=terminal_set))
        np.testing.assert_allclose(ct.tubes.state_offsets, tubes.state_offsets, atol=1e-8)
        for x0 in ([1.0, -0.5], [-2.0, 1.5], [3.0, 0.0]):
            np.testing.assert_allclose(ct.solve(np.array(x0)).objective, offline.solve(np.array(x0)).objective,
                                       rtol=1e-6, atol=1e-6)


class BaselineControllerTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.sys = benchmark_system(0.04)
        cls.cost = benchmark_cost(cls.sys)

    def test_rpi_tube_starts_inside_error_set(self):
        controller = RpiTubeMpcController(self.sys, self.cost, 10)
        x0 = np.array([-0.3, 0.2])
        solution = controller.solve(x0)
        self.assertTrue(controller.omega.contains(x0 - solution.z0, tol=1e-6))
        np.testing.assert_allclose(solution.u0, solution.v[0] + controller.K @ (x0 - solution.z0))

    def test_ct_mpc_tubes_grow(self):
        controller = CtMpcController(self.sys, self.cost, 10)
        self.assertTrue(controller.tubes.is_monotone())
        self.assertEqual(controller.tubes.source, 'drs-baseline')
        solution = controller.solve(np.array([-0.3, 0.2]))
        self.assertTrue(self.sys.U.contains(solution.u0, tol=1e-7))

    def test_offline_controller_synthesizes_tubes(self):
        controller = OfflineSltmpcController(self.sys, self.cost, 10)
        self.assertEqual(controller.tubes.source, 'offline-synthesis')
        solution = controller.solve(np.array([-0.3, 0.2]))
        self.assertTrue(self.sys.U.contains(solution.u0, tol=1e-7))

    def test_nominal_controller_is_callable(self):
        controller = NominalMpcController(nominal_benchmark(), self.cost, 10)
        self.assertEqual(controller(np.zeros(2)).shape, (1,))

    def test_rpi_tube_needs_planar_state_without_omega(self):
        sys3 = LtiSystem(0.5 * np.eye(3), np.array([[1.0], [0.0], [0.0]]), Polytope.box(1.0, 1.0, 1.0),
                         Polytope.box(1.0), Polytope.box(0.1, 0.1, 0.1))
        with self.assertRaises(NotTwoDimensional):
            RpiTubeMpcController(sys3, quadratic_cost(sys3, np.eye(3), np.eye(1)), 5)

    def test_make_controller(self):
        self.assertIsInstance(make_controller('ct-mpc', self.sys, self.cost, 10), CtMpcController)
        with self.assertRaises(UnsupportedKind):
            make_controller('lqr', self.sys, self.cost, 10)


class TubeSynthesisTests(SimpleTestCase):

    def test_min_tightening_gives_smallest_tightening(self):
        sys = benchmark_system(0.04)
        best = synthesize_tubes(sys, 10, 'min-tightening')

        def size(design):
            return np.abs(design.tubes.state_at(10)).max() + np.abs(design.tubes.input_at(10)).max()

        self.assertAlmostEqual(size(best), best.objective, delta=1e-4)
        for kind in ('lqr', 'l1', 'induced-inf-gain'):
            self.assertGreaterEqual(size(synthesize_tubes(sys, 10, kind)), size(best) - 1e-4)

    def test_weights_separate_l1_from_induced_gain(self):
        sys = benchmark_system(0.04)
        weights = (100.0 * np.eye(2), 10.0 * np.eye(1))
        l1 = synthesize_tubes(sys, 10, 'l1', weights=weights)
        induced = synthesize_tubes(sys, 10, 'induced-inf-gain', weights=weights)
        self.assertGreaterEqual(l1.objective, 10.0 - 1e-6)
        self.assertGreater(abs(l1.objective - induced.objective), 1e-3)
        unweighted = synthesize_tubes(sys, 10, 'l1')
        self.assertAlmostEqual(unweighted.objective, induced.objective, delta=1e-5)

    def test_large_disturbance_is_infeasible(self):
        with self.assertRaises(Infeasible):
            synthesize_tubes(benchmark_system(0.5), 10)

    def test_scaling_factors_checked(self):
        with self.assertRaises(ValueError):
            synthesize_tubes(benchmark_system(), 10, rho_x=0.0)

    def test_hinf_without_sdp_backend(self):
        backend = CvxpyBackend(capabilities={'qp', 'socp'})
        with self.assertRaises(BackendCapability):
            synthesize_tubes(benchmark_system(), 10, 'hinf', backend=backend)
        design = synthesize_tubes(benchmark_system(), 10, 'hinf', backend=backend, allow_fallback=True)
        self.assertTrue(design.fallback)
