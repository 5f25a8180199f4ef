"""
System level disturbance reachable sets.

F_{e,i} = Phi_e^0 W + ... + Phi_e^(i-1) W and the matching input sets F_{k,i},
stored as offsets against the state and input constraint normals.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .app_settings import sltmpc_setting
from .exceptions import FirRequired, NotTwoDimensional, ValidationFailed, WrongHistoryLength
from .polytope import Polytope, TubeSequence, extreme_points, outer_polytope_2d, sample_uniform, tightening
from .slp import validate_responses

logger = logging.getLogger(__name__)

__all__ = [
    'TubeSequence', 'ContainmentReport', 'sldrs_tightenings', 'invariance_control',
    'verify_containment', 'set_recursion_gap', 'tube_polytopes_2d',
]


def sldrs_tightenings(resp, sys, source='offline-synthesis', require_fir=True):
    validate_responses(resp, sys).raise_if_failed()
    if require_fir and not resp.fir:
        raise ValidationFailed("SL-DRS tubes need FIR responses")
    N = resp.N
    state = np.zeros((N + 1, sys.X.n_rows))
    inputs = np.zeros((N + 1, sys.U.n_rows))
    for i in range(1, N + 1):
        state[i] = state[i - 1] + tightening(sys.X.H, [resp.Phi_e[i - 1]], sys.W)
        inputs[i] = inputs[i - 1] + tightening(sys.U.H, [resp.Phi_k[i - 1]], sys.W)
    return TubeSequence(N, state, inputs, source=source, responses=resp)


def invariance_control(resp, w_history):
    """
    Input that keeps the error inside F_{e,N} once the horizon has passed.
    w_history holds the last N disturbances, oldest first.
    """
    if not resp.fir:
        raise FirRequired("The invariance control law needs FIR responses")
    w_history = np.asarray(w_history, dtype=float).reshape(-1, resp.n) if len(w_history) else np.zeros((0, resp.n))
    if w_history.shape[0] != resp.N:
        raise WrongHistoryLength(f"Expected {resp.N} past disturbances, got {w_history.shape[0]}")
    return np.einsum('jmn,jn->m', resp.Phi_k[:resp.N], w_history[::-1])


@dataclass
class ContainmentReport:
    n_steps: int
    n_samples: int
    n_walks: int
    seed: int
    max_state_violation: float
    max_input_violation: float
    tolerance: float
    worst_rollout: dict = field(default_factory=dict)

    @property
    def max_violation(self):
        return max(self.max_state_violation, self.max_input_violation)

    @property
    def passed(self):
        return self.max_violation <= self.tolerance

    def as_dict(self):
        return {
            'n_steps': self.n_steps,
            'n_samples': self.n_samples,
            'n_walks': self.n_walks,
            'seed': self.seed,
            'max_state_violation': self.max_state_violation,
            'max_input_violation': self.max_input_violation,
            'max_violation': self.max_violation,
            'tolerance': self.tolerance,
            'passed': self.passed,
            'worst_rollout': self.worst_rollout,
        }


def _rollout_errors(resp, sys, disturbances):
    """Error dynamics e+ = A e + B k + w under the invariance law, batched over rollouts"""
    runs, steps, n = disturbances.shape
    N = resp.N
    errors = np.zeros((runs, steps + 1, n))
    controls = np.zeros((runs, steps + 1, resp.m))
    for i in range(steps + 1):
        for j in range(min(i, N)):
            controls[:, i] += disturbances[:, i - 1 - j] @ resp.Phi_k[j].T
        if i < steps:
            errors[:, i + 1] = errors[:, i] @ sys.A.T + controls[:, i] @ sys.B.T + disturbances[:, i]
    return errors, controls


def _offset_violation(H, values, offsets):
    return values @ H.T - offsets


def verify_containment(resp, sys, n_steps, n_samples, seed, n_walks=1000, tubes=None, tol=None):
    """Monte-Carlo and vertex-walk check that errors and inputs stay inside their tubes"""
    tol = sltmpc_setting('CONTAINMENT_TOL') if tol is None else tol
    if n_steps < 2 * resp.N:
        raise ValueError(f"n_steps must be at least 2N = {2 * resp.N}")
    tubes = sldrs_tightenings(resp, sys) if tubes is None else tubes

    streams = [np.random.default_rng(child) for child in np.random.SeedSequence(seed).spawn(n_samples + n_walks)]
    vertices = extreme_points(sys.W)
    batches = []
    if n_samples:
        batches.append(np.array([sample_uniform(sys.W, n_steps, rng) for rng in streams[:n_samples]]))
    if n_walks:
        batches.append(np.array([vertices[rng.integers(len(vertices), size=n_steps)]
                                 for rng in streams[n_samples:]]))
    disturbances = np.concatenate(batches) if batches else np.zeros((0, n_steps, sys.n))

    errors, controls = _rollout_errors(resp, sys, disturbances)
    index = np.minimum(np.arange(n_steps + 1), resp.N)
    state_gap = np.einsum('rtn,cn->rtc', errors, sys.X.H) - tubes.state_offsets[index][None]
    input_gap = np.einsum('rtm,cm->rtc', controls, sys.U.H) - tubes.input_offsets[index][None]
    worst = {}
    state_violation = float(max(state_gap.max(initial=0.0), 0.0))
    input_violation = float(max(input_gap.max(initial=0.0), 0.0))
    if disturbances.shape[0]:
        for side, gap in (('state', state_gap), ('input', input_gap)):
            if gap.size == 0:
                continue
            run, step, row = np.unravel_index(np.argmax(gap), gap.shape)
            worst[side] = {'rollout': int(run), 'step': int(step), 'row': int(row),
                           'gap': float(gap[run, step, row]),
                           'kind': 'uniform' if run < n_samples else 'vertex-walk'}

    report = ContainmentReport(n_steps, n_samples, n_walks, seed, state_violation, input_violation, tol, worst)
    logger.info("Containment check over %d rollouts: max violation %.3e", disturbances.shape[0],
                report.max_violation)
    return report


def set_recursion_gap(resp, sys, tubes=None):
    """Largest amount by which Phi_e^j w + F_{e,j} leaves F_{e,j+1} over vertices w of W"""
    tubes = sldrs_tightenings(resp, sys) if tubes is None else tubes
    vertices = extreme_points(sys.W)
    gap = -np.inf
    for j in range(resp.N):
        shifted = vertices @ (sys.X.H @ resp.Phi_e[j]).T
        gap = max(gap, float(np.max(shifted + tubes.state_offsets[j] - tubes.state_offsets[j + 1])))
    return gap


def tube_polytopes_2d(tubes, resp, sys, i):
    """Explicit (F_{e,i}, F_{k,i}) for plotting"""
    if sys.n != 2:
        raise NotTwoDimensional(f"Tube export needs a planar state, got dimension {sys.n}")
    i = min(i, tubes.N)
    W = sys.W

    def state_support(a):
        return sum(W.support(resp.Phi_e[j].T @ a) for j in range(i))

    def input_support(a):
        return sum(W.support(resp.Phi_k[j].T @ a) for j in range(i))

    state_set = outer_polytope_2d(state_support, extra_normals=sys.X.H)
    if sys.m == 1:
        upper = input_support(np.ones(1))
        lower = -input_support(-np.ones(1))
        input_set = Polytope.from_bounds([lower], [upper])
    elif sys.m == 2:
        input_set = outer_polytope_2d(input_support, extra_normals=sys.U.H)
    else:
        raise NotTwoDimensional(f"Input tube export needs at most two inputs, got {sys.m}")
    return state_set, input_set
