"""
Affine system level parameterization with Toeplitz error responses.

A response maps the stacked vector [x0, w_0, w_1, ...] to states and inputs:

    x_i = phi_z[i] + sum_k Phi_e[i - k] delta_k
    u_i = phi_v[i] + sum_k Phi_k[i - k] delta_k

with delta_0 = x0 and delta_{k+1} = w_k. Only one block per delay is stored.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .app_settings import sltmpc_setting
from .exceptions import DimensionMismatch, FirRequired, ValidationFailed
from .polytope import Polytope

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LtiSystem:
    """x+ = A x + B u + w with x in X, u in U, w in W"""
    A: np.ndarray
    B: np.ndarray
    X: Polytope
    U: Polytope
    W: Polytope

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B.reshape(-1, 1)
        n = A.shape[0]
        if A.shape != (n, n):
            raise DimensionMismatch(f"A must be square, got shape {A.shape}")
        if B.shape[0] != n:
            raise DimensionMismatch(f"B has {B.shape[0]} rows, A has {n}")
        if self.X.dim != n or self.W.dim != n:
            raise DimensionMismatch("X and W must live in the state space")
        if self.U.dim != B.shape[1]:
            raise DimensionMismatch("U must live in the input space")
        object.__setattr__(self, 'A', A)
        object.__setattr__(self, 'B', B)

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    def closed_loop(self, K):
        return self.A + self.B @ np.atleast_2d(K)

    def step(self, x, u, w):
        return self.A @ x + self.B @ np.atleast_1d(u) + w

    def with_theta(self, theta, axes=(0,)):
        """Copy with the disturbance half-width on the given axes set to theta"""
        bounds = self.W.axis_bounds
        if bounds is None:
            raise DimensionMismatch("theta can only be applied to a box-shaped W")
        lower, upper = (b.copy() for b in bounds)
        for axis in axes:
            lower[axis], upper[axis] = -theta, theta
        interior = bool(np.all(upper > 0) and np.all(lower < 0))
        return replace(self, W=Polytope.from_bounds(lower, upper, origin_interior=interior))


@dataclass(frozen=True, eq=False)
class SystemResponses:
    N: int
    phi_z: np.ndarray
    phi_v: np.ndarray
    Phi_e: np.ndarray
    Phi_k: np.ndarray
    fir: bool = False

    def __post_init__(self):
        phi_z = np.asarray(self.phi_z, dtype=float)
        phi_v = np.asarray(self.phi_v, dtype=float)
        Phi_e = np.asarray(self.Phi_e, dtype=float)
        Phi_k = np.asarray(self.Phi_k, dtype=float)
        blocks = self.N + 1
        if Phi_e.ndim != 3 or Phi_e.shape[0] != blocks or Phi_e.shape[1] != Phi_e.shape[2]:
            raise DimensionMismatch(f"Phi_e must hold {blocks} square blocks, got shape {Phi_e.shape}")
        n = Phi_e.shape[1]
        if Phi_k.ndim != 3 or Phi_k.shape[0] != blocks or Phi_k.shape[2] != n:
            raise DimensionMismatch(f"Phi_k must hold {blocks} m x {n} blocks, got shape {Phi_k.shape}")
        m = Phi_k.shape[1]
        if phi_z.shape != (blocks, n) or phi_v.shape != (blocks, m):
            raise DimensionMismatch("Nominal columns do not match the error blocks")
        for name, value in (('phi_z', phi_z), ('phi_v', phi_v), ('Phi_e', Phi_e), ('Phi_k', Phi_k)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def n(self):
        return self.Phi_e.shape[1]

    @property
    def m(self):
        return self.Phi_k.shape[1]

    def error_block(self, j):
        """Phi_e^j, zero past the horizon of an FIR response"""
        if j <= self.N:
            return self.Phi_e[j]
        if not self.fir:
            raise FirRequired(f"Delay {j} exceeds horizon {self.N} of a non-FIR response")
        return np.zeros((self.n, self.n))

    def input_block(self, j):
        if j <= self.N:
            return self.Phi_k[j]
        if not self.fir:
            raise FirRequired(f"Delay {j} exceeds horizon {self.N} of a non-FIR response")
        return np.zeros((self.m, self.n))

    def nominal(self, x0):
        """Nominal trajectory z_i = phi_z^i + Phi_e^i x0, v_i = phi_v^i + Phi_k^i x0"""
        x0 = np.asarray(x0, dtype=float).reshape(-1)
        return self.phi_z + self.Phi_e @ x0, self.phi_v + self.Phi_k @ x0

    def as_dict(self):
        return {
            'N': self.N,
            'fir': self.fir,
            'phi_z': self.phi_z.tolist(),
            'phi_v': self.phi_v.tolist(),
            'Phi_e': self.Phi_e.tolist(),
            'Phi_k': self.Phi_k.tolist(),
        }


@dataclass
class ValidationReport:
    residuals: dict = field(default_factory=dict)
    tolerance: float = 1e-7

    @property
    def violations(self):
        return sorted(name for name, value in self.residuals.items() if value > self.tolerance)

    @property
    def passed(self):
        return not self.violations

    def raise_if_failed(self):
        if not self.passed:
            details = ', '.join(f"{name}={self.residuals[name]:.3e}" for name in self.violations)
            raise ValidationFailed(f"System responses violate: {details}", report=self)
        return self


def validate_responses(resp, sys, tol=None):
    """Check the achievability recursions, the initial blocks and, if flagged, the FIR tail"""
    tol = sltmpc_setting('RESIDUAL_TOL') if tol is None else tol
    if resp.n != sys.n or resp.m != sys.m:
        raise DimensionMismatch(
            f"Responses are {resp.n}x{resp.m}, system is {sys.n}x{sys.m}")
    A, B = sys.A, sys.B
    residuals = {
        'phi_z_initial': float(np.max(np.abs(resp.phi_z[0]), initial=0.0)),
        'Phi_e_initial': float(np.max(np.abs(resp.Phi_e[0] - np.eye(sys.n)))),
    }
    nominal = resp.phi_z[1:] - resp.phi_z[:-1] @ A.T - resp.phi_v[:-1] @ B.T
    error = resp.Phi_e[1:] - A @ resp.Phi_e[:-1] - B @ resp.Phi_k[:-1]
    residuals['nominal_recursion'] = float(np.max(np.abs(nominal), initial=0.0))
    residuals['error_recursion'] = float(np.max(np.abs(error), initial=0.0))
    if resp.fir:
        residuals['fir_Phi_e'] = float(np.linalg.norm(resp.Phi_e[-1]))
        residuals['fir_Phi_k'] = float(np.linalg.norm(resp.Phi_k[-1]))
    report = ValidationReport(residuals, tol)
    if not report.passed:
        logger.debug("Response validation failed: %s", report.violations)
    return report


def static_gain_responses(A, B, K, N, tol=1e-12):
    """Responses of the fixed feedback u = K x: Phi_e^j = (A+BK)^j, Phi_k^j = K (A+BK)^j"""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    K = np.asarray(K, dtype=float).reshape(B.shape[1], A.shape[0])
    A_cl = A + B @ K
    powers = [np.eye(A.shape[0])]
    for _ in range(N):
        powers.append(powers[-1] @ A_cl)
    Phi_e = np.array(powers)
    Phi_k = np.einsum('mn,jnk->jmk', K, Phi_e)
    fir = bool(np.linalg.norm(Phi_e[-1]) <= tol and np.linalg.norm(Phi_k[-1]) <= tol)
    return SystemResponses(N, np.zeros((N + 1, A.shape[0])), np.zeros((N + 1, B.shape[1])),
                           Phi_e, Phi_k, fir)


@dataclass(frozen=True, eq=False)
class RealizedController:
    """
    Block-lower-triangular Toeplitz controller u = feedforward + K x realized
    from Phi_u Phi_x^-1. gains[j] multiplies the state j steps in the past.
    """
    gains: np.ndarray
    feedforward: np.ndarray
    responses: SystemResponses = field(repr=False)

    @property
    def horizon(self):
        return self.gains.shape[0] - 1

    def block_matrix(self):
        """The full (L+1)m x (L+1)n lower-triangular gain"""
        L = self.horizon
        m, n = self.gains.shape[1:]
        K = np.zeros(((L + 1) * m, (L + 1) * n))
        for i in range(L + 1):
            for k in range(i + 1):
                K[i * m:(i + 1) * m, k * n:(k + 1) * n] = self.gains[i - k]
        return K

    def control(self, i, states):
        """Input at step i given the states x_0..x_i"""
        u = self.feedforward[i].copy()
        for k in range(i + 1):
            u += self.gains[i - k] @ states[k]
        return u


def _extended_nominal(resp, sys, length):
    phi_z = list(resp.phi_z)
    phi_v = list(resp.phi_v)
    for _ in range(resp.N, length):
        phi_v.append(resp.phi_v[-1])
        phi_z.append(sys.A @ phi_z[-1] + sys.B @ resp.phi_v[-1])
    return np.array(phi_z[:length + 1]), np.array(phi_v[:length + 1])


def realize_controller(resp, sys=None, horizon=None):
    """
    Realize K = Phi_u Phi_x^-1 by series inversion of the unit-lower-triangular
    Toeplitz Phi_x. Horizons past N need an FIR response; the nominal part is
    then continued by holding phi_v^N.
    """
    if sys is not None:
        validate_responses(resp, sys).raise_if_failed()
    elif abs(resp.Phi_e[0] - np.eye(resp.n)).max() > sltmpc_setting('RESIDUAL_TOL'):
        raise ValidationFailed("Phi_e^0 must be the identity for Phi_x to be invertible")
    horizon = resp.N if horizon is None else horizon
    if horizon > resp.N and not resp.fir:
        raise FirRequired(f"Realization beyond horizon {resp.N} needs an FIR response")
    if horizon > resp.N and sys is None:
        raise DimensionMismatch("Extending the nominal part past N needs the system matrices")

    n, m = resp.n, resp.m
    inverse = [np.eye(n)]
    for j in range(1, horizon + 1):
        inverse.append(-sum(resp.error_block(l) @ inverse[j - l] for l in range(1, j + 1)))
    gains = np.array([sum(resp.input_block(l) @ inverse[j - l] for l in range(j + 1))
                      for j in range(horizon + 1)]).reshape(horizon + 1, m, n)

    if horizon > resp.N:
        phi_z, phi_v = _extended_nominal(resp, sys, horizon)
    else:
        phi_z, phi_v = resp.phi_z[:horizon + 1], resp.phi_v[:horizon + 1]
    feedforward = np.array([
        phi_v[i] - sum(gains[i - k] @ phi_z[k] for k in range(i + 1)) for i in range(horizon + 1)
    ])
    return RealizedController(gains, feedforward, resp)


def simulate_realized(controller, sys, x0, w_seq):
    """Propagate x+ = A x + B u + w under a realized controller; returns (states, inputs)"""
    w_seq = np.atleast_2d(np.asarray(w_seq, dtype=float)) if len(w_seq) else np.zeros((0, sys.n))
    steps = w_seq.shape[0]
    if steps > controller.horizon:
        raise DimensionMismatch(
            f"Controller realized for {controller.horizon} steps, {steps} disturbances given")
    states = [np.asarray(x0, dtype=float).reshape(-1)]
    inputs = []
    for i in range(steps):
        u = controller.control(i, states)
        inputs.append(u)
        states.append(sys.step(states[-1], u, w_seq[i]))
    inputs.append(controller.control(steps, states))
    return np.array(states), np.array(inputs)


def error_trajectory(resp, w_seq):
    """
    e_i = sum_j Phi_e^j w_{i-1-j} and k_i = sum_j Phi_k^j w_{i-1-j}, starting
    from e_0 = 0. Both sequences have len(w_seq) + 1 entries.
    """
    w_seq = np.asarray(w_seq, dtype=float).reshape(-1, resp.n) if len(w_seq) else np.zeros((0, resp.n))
    steps = w_seq.shape[0]
    if steps > resp.N and not resp.fir:
        raise FirRequired(f"{steps} disturbances exceed horizon {resp.N} of a non-FIR response")
    errors = np.zeros((steps + 1, resp.n))
    controls = np.zeros((steps + 1, resp.m))
    for i in range(1, steps + 1):
        for j in range(min(i, resp.N + 1)):
            w = w_seq[i - 1 - j]
            errors[i] += resp.Phi_e[j] @ w
            controls[i] += resp.Phi_k[j] @ w
    return errors, controls
