"""Shared systems for the test suite"""

import numpy as np

from sltmpc_app.mpc import quadratic_cost
from sltmpc_app.polytope import Polytope
from sltmpc_app.slp import LtiSystem

BENCHMARK_A = [[1.05, 0.15], [0.0, 1.0]]
BENCHMARK_B = [[0.5], [0.5]]
BENCHMARK_X0 = np.array([-1.0, -0.5])


def benchmark_system(theta=0.04, w2=0.1):
    """Double-integrator-like benchmark with w_1 in [-theta, theta] and w_2 in [-w2, w2]"""
    return LtiSystem(
        np.array(BENCHMARK_A), np.array(BENCHMARK_B),
        X=Polytope.from_bounds([-1.0, -1.5], [0.5, 1.5]),
        U=Polytope.from_bounds([-0.5], [0.5]),
        W=Polytope.from_bounds([-theta, -w2], [theta, w2]),
    )


def nominal_benchmark():
    """The benchmark with W = {0}"""
    return benchmark_system(theta=0.0, w2=0.0)


def benchmark_cost(sys):
    return quadratic_cost(sys, 100.0 * np.eye(2), 10.0 * np.eye(1))


def deadbeat_system(w=0.1):
    """A + B K nilpotent of index 2 for K = 0"""
    return LtiSystem(
        np.array([[0.0, 1.0], [0.0, 0.0]]), np.array([[0.0], [1.0]]),
        X=Polytope.box(5.0, 5.0),
        U=Polytope.box(2.0),
        W=Polytope.box(w, w),
    )


DEADBEAT_K = np.zeros((1, 2))


def feasible_starts(n, seed=0):
    """Starting points well inside the benchmark RoA"""
    rng = np.random.default_rng(seed)
    return rng.uniform([-0.5, -0.5], [0.2, 0.5], size=(n, 2))
