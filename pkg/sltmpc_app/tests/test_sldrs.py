import itertools

import numpy as np
from django.test import SimpleTestCase, tag

from sltmpc_app.exceptions import FirRequired, NotTwoDimensional, ValidationFailed, WrongHistoryLength
from sltmpc_app.mpc import lqr_gain, synthesize_tubes
from sltmpc_app.polytope import Polytope, drs_tightenings, extreme_points
from sltmpc_app.sldrs import (invariance_control, set_recursion_gap, sldrs_tightenings, tube_polytopes_2d,
                              verify_containment)
from sltmpc_app.slp import LtiSystem, error_trajectory, static_gain_responses

from .fixtures import DEADBEAT_K, benchmark_system, deadbeat_system


def brute_force_offsets(H, maps, W):
    """max over all vertex combinations of sum_j M_j w_j, row by row"""
    vertices = extreme_points(W)
    best = np.full(H.shape[0], -np.inf)
    for combination in itertools.product(vertices, repeat=len(maps)):
        point = sum(M @ w for M, w in zip(maps, combination))
        best = np.maximum(best, H @ point)
    return best


class DeadbeatTubeTests(SimpleTestCase):

    def setUp(self):
        self.sys = deadbeat_system()
        self.resp = static_gain_responses(self.sys.A, self.sys.B, DEADBEAT_K, 4)

    def test_tubes_match_reachable_sets(self):
        tubes = sldrs_tightenings(self.resp, self.sys)
        baseline = drs_tightenings(self.sys.A, self.sys.W, self.sys.X, self.sys.U, DEADBEAT_K, 4)
        np.testing.assert_allclose(tubes.state_offsets, baseline.state_offsets, atol=1e-8)
        np.testing.assert_allclose(tubes.input_offsets, baseline.input_offsets, atol=1e-8)
        for i in range(1, 5):
            maps = [np.linalg.matrix_power(self.sys.A, j) for j in range(i)]
            np.testing.assert_allclose(tubes.state_at(i), brute_force_offsets(self.sys.X.H, maps, self.sys.W),
                                       atol=1e-8)

    def test_tubes_stop_growing_after_nilpotency_index(self):
        tubes = sldrs_tightenings(self.resp, self.sys)
        np.testing.assert_allclose(tubes.state_at(2), tubes.state_at(4), atol=1e-12)
        self.assertEqual(tubes.source, 'offline-synthesis')

    def test_non_fir_responses_rejected(self):
        sys = benchmark_system()
        resp = static_gain_responses(sys.A, sys.B, lqr_gain(sys.A, sys.B, np.eye(2), np.eye(1)), 4)
        with self.assertRaises(ValidationFailed):
            sldrs_tightenings(resp, sys)
        self.assertTrue(sldrs_tightenings(resp, sys, require_fir=False).is_monotone())

    def test_invariance_control(self):
        history = np.array([[0.1, 0.0], [0.0, -0.1], [0.05, 0.05], [0.0, 0.1]])
        self.assertEqual(invariance_control(self.resp, history).shape, (1,))
        with self.assertRaises(WrongHistoryLength):
            invariance_control(self.resp, history[:2])
        sys = benchmark_system()
        with self.assertRaises(FirRequired):
            invariance_control(static_gain_responses(sys.A, sys.B, np.array([[-0.5, -0.5]]), 2), history[:2])

    def test_planar_export_needed(self):
        sys3 = LtiSystem(np.zeros((3, 3)), np.ones((3, 1)), Polytope.box(1, 1, 1), Polytope.box(1.0),
                         Polytope.box(0.1, 0.1, 0.1))
        resp = static_gain_responses(sys3.A, sys3.B, np.zeros((1, 3)), 2)
        with self.assertRaises(NotTwoDimensional):
            tube_polytopes_2d(sldrs_tightenings(resp, sys3), resp, sys3, 1)


class SynthesizedTubeTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.sys = benchmark_system(0.04)
        cls.design = synthesize_tubes(cls.sys, 10)

    def test_tubes_fit_inside_constraints(self):
        tubes = self.design.tubes
        self.assertTrue(tubes.is_monotone())
        self.assertTrue(np.all(tubes.state_at(10) <= self.sys.X.h + 1e-7))
        self.assertTrue(np.all(tubes.input_at(10) <= self.sys.U.h + 1e-7))

    def test_set_recursion_holds(self):
        self.assertLessEqual(set_recursion_gap(self.design.responses, self.sys, self.design.tubes), 1e-9)

    def test_containment_on_short_run(self):
        report = verify_containment(self.design.responses, self.sys, n_steps=25, n_samples=40, seed=7,
                                    n_walks=60, tubes=self.design.tubes)
        self.assertTrue(report.passed, report.as_dict())
        self.assertEqual(report.as_dict()['n_walks'], 60)

    def test_worst_rollout_reported_for_both_tubes(self):
        report = verify_containment(self.design.responses, self.sys, n_steps=20, n_samples=10, seed=3,
                                    n_walks=10, tubes=self.design.tubes)
        worst = report.as_dict()['worst_rollout']
        self.assertEqual(set(worst), {'state', 'input'})
        for side in ('state', 'input'):
            self.assertLess(worst[side]['rollout'], 20)
            self.assertLessEqual(worst[side]['gap'], report.tolerance)
        self.assertLess(worst['input']['row'], self.sys.U.n_rows)
        self.assertAlmostEqual(max(worst['input']['gap'], 0.0), report.max_input_violation)
        self.assertAlmostEqual(max(worst['state']['gap'], 0.0), report.max_state_violation)

    def test_containment_needs_two_horizons(self):
        with self.assertRaises(ValueError):
            verify_containment(self.design.responses, self.sys, n_steps=15, n_samples=1, seed=0)

    def test_exported_tube_contains_sampled_errors(self):
        state_set, input_set = tube_polytopes_2d(self.design.tubes, self.design.responses, self.sys, 10)
        rng = np.random.default_rng(11)
        for _ in range(20):
            errors, controls = error_trajectory(self.design.responses, rng.uniform([-0.04, -0.1], [0.04, 0.1],
                                                                                   size=(10, 2)))
            self.assertTrue(state_set.contains(errors[-1], tol=1e-8))
            self.assertTrue(input_set.contains(controls[-1], tol=1e-8))

    @tag('slow')
    def test_containment_at_full_scale(self):
        report = verify_containment(self.design.responses, self.sys, n_steps=50, n_samples=500, seed=0,
                                    n_walks=1000, tubes=self.design.tubes)
        self.assertLessEqual(report.max_violation, 1e-6)
