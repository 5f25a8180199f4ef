"""
Tube MPC problems and controllers.

The FIR-constrained SLTMPC problem optimizes the nominal trajectory and the
error responses together; its robust constraints are written with Lagrangian
multipliers per constraint row and delay. Variables are stacked as

    [phi_z | phi_v | Phi_e | Phi_k | Lambda_e | Lambda_k | terminal extras]

with every matrix block flattened row-major. The offline variant, ct-MPC,
RPI-tube MPC and the nominal regulator only optimize (z, v).
"""

import logging
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np
from scipy.linalg import LinAlgError, null_space, solve_discrete_are, solve_discrete_lyapunov, sqrtm

from .exceptions import (BackendCapability, DimensionMismatch, EmptyResult, Infeasible, NotConvex,
                         NotStabilizable, NotTwoDimensional, SolverInaccurate, UnsupportedKind,
                         UnsupportedTerminal)
from .polytope import (Polytope, TubeSequence, drs_tightenings, maximal_pi_set, maximal_rpi_set,
                       mrpi_approx, support_dual, support_many, tightening)
from .sldrs import sldrs_tightenings
from .slp import SystemResponses, validate_responses
from .solvers import OPTIMAL, QpBuilder, QuadraticProgram, SolverBackend, default_backend, solve_or_raise

logger = logging.getLogger(__name__)

MODES = ('fir', 'non-fir-rpi')
TERMINAL_KINDS = ('steady-state-set', 'scaled-pi', 'implicit-nominal', 'fixed-polytope')
COST_KINDS = ('min-tightening', 'induced-inf-gain', 'lqr', 'l1', 'hinf')
METHODS = ('fir-sltmpc', 'fir-sltmpc-offline', 'ct-mpc', 'rpi-tube', 'sltmpc-rpi', 'nominal')

__all__ = [
    'QuadraticProgram', 'SolverBackend', 'CostSpec', 'TerminalSpec', 'MpcSolution', 'TubeDesign',
    'lqr_gain', 'riccati', 'quadratic_cost', 'make_terminal', 'steady_state_set',
    'build_fir_sltmpc', 'solve_fir_sltmpc', 'synth_tubes_offline', 'synthesize_tubes',
    'solve_offline_sltmpc', 'solve_ct_mpc', 'solve_rpi_tube_mpc', 'nominal_mpc',
    'dual_tightenings', 'support_tightenings', 'shift_candidate', 'candidate_violation',
    'FirSltmpcController', 'OfflineSltmpcController', 'CtMpcController', 'RpiTubeMpcController',
    'NominalMpcController', 'make_controller',
]


# Gains and costs

def riccati(A, B, Q, R, tol=1e-10, max_iter=1000):
    """Stabilizing DARE solution P and gain K (u = K x), refined by fixed-point iteration"""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    try:
        P = solve_discrete_are(A, B, Q, R)
    except (LinAlgError, ValueError) as exc:
        raise NotStabilizable(f"Riccati equation has no stabilizing solution: {exc}") from exc

    for _ in range(max_iter):
        gain = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P_next = Q + A.T @ P @ A - A.T @ P @ B @ gain
        P_next = (P_next + P_next.T) / 2
        residual = np.abs(P_next - P).max()
        P = P_next
        if not np.isfinite(residual):
            break
        if residual <= tol * max(1.0, np.linalg.norm(P)):
            break
    else:
        raise NotStabilizable("Riccati iteration did not settle")
    if not np.all(np.isfinite(P)):
        raise NotStabilizable("Riccati iteration diverged")

    K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    radius = max(abs(np.linalg.eigvals(A + B @ K)))
    if radius >= 1:
        raise NotStabilizable(f"LQR closed loop has spectral radius {radius:.4f}")
    return K, P


def lqr_gain(A, B, Q, R):
    return riccati(A, B, Q, R)[0]


@dataclass(frozen=True, eq=False)
class CostSpec:
    """Stage cost z'Qz + v'Rv and terminal cost z'P_f z"""
    Q: np.ndarray
    R: np.ndarray
    P_f: np.ndarray

    def stage(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return float(x @ self.Q @ x + u @ self.R @ u)


def quadratic_cost(sys, Q, R, K=None):
    """Terminal weight from the Riccati solution, or from the Lyapunov equation of a given K"""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    for name, weight, strict in (('Q', Q, False), ('R', R, True)):
        if not np.allclose(weight, weight.T):
            raise NotConvex(f"{name} must be symmetric")
        smallest = np.linalg.eigvalsh(weight).min()
        if smallest < -1e-9 or (strict and smallest <= 1e-12):
            raise NotConvex(f"{name} must be positive {'definite' if strict else 'semidefinite'}")
    if K is None:
        _, P_f = riccati(sys.A, sys.B, Q, R)
    else:
        K = np.atleast_2d(K)
        A_cl = sys.closed_loop(K)
        P_f = solve_discrete_lyapunov(A_cl.T, Q + K.T @ R @ K)
        P_f = (P_f + P_f.T) / 2
    return CostSpec(Q, R, P_f)


# Terminal sets

@dataclass(frozen=True, eq=False)
class TerminalSpec:
    kind: str
    K: np.ndarray
    base: Polytope = None
    N_mpc: int = None
    steady_state_basis: np.ndarray = None

    def __post_init__(self):
        if self.kind not in TERMINAL_KINDS:
            raise UnsupportedKind(f"Unknown terminal kind {self.kind!r}")

    def scaled(self, factor):
        """The terminal set lambda S of a scaled-pi spec"""
        return self.base.scale(factor)


def steady_state_set(sys):
    """{x in X : (A - I) x + B u = 0 for some u}"""
    basis = null_space(np.hstack([sys.A - np.eye(sys.n), sys.B]))
    state_part = basis[:sys.n]
    complement = null_space(state_part.T).T if state_part.size else np.eye(sys.n)
    if complement.size == 0:
        return sys.X, basis
    H = np.vstack([sys.X.H, complement, -complement])
    h = np.concatenate([sys.X.h, np.zeros(2 * complement.shape[0])])
    return Polytope(H, h), basis


def _input_preimage(sys, K, offsets=None):
    """{x : K x in U minus offsets}"""
    h = sys.U.h if offsets is None else sys.U.h - offsets
    return Polytope(sys.U.H @ K, h)


def make_terminal(kind, sys, K, backend=None, N=None, N_mpc=None, base=None):
    if kind not in TERMINAL_KINDS:
        raise UnsupportedKind(f"Unknown terminal kind {kind!r}")
    K = np.atleast_2d(np.asarray(K, dtype=float))
    A_cl = sys.closed_loop(K)
    if kind == 'steady-state-set':
        polytope, basis = steady_state_set(sys)
        return TerminalSpec(kind, K, base=polytope, steady_state_basis=basis)
    if kind == 'scaled-pi':
        S = base if base is not None else maximal_pi_set(A_cl, sys.X.intersect(_input_preimage(sys, K)))
        return TerminalSpec(kind, K, base=S)
    if kind == 'implicit-nominal':
        if N_mpc is None or (N is not None and N_mpc <= N):
            raise UnsupportedTerminal("The implicit terminal set needs N_mpc > N")
        return TerminalSpec(kind, K, N_mpc=N_mpc)
    if base is None:
        base = maximal_rpi_set(A_cl, sys.X.intersect(_input_preimage(sys, K)), sys.W)
    return TerminalSpec(kind, K, base=base)


# Solutions

@dataclass(eq=False)
class MpcSolution:
    z: np.ndarray
    v: np.ndarray
    objective: float
    u0: np.ndarray
    x0: np.ndarray
    method: str
    responses: SystemResponses = None
    Lambda_e: np.ndarray = None
    Lambda_k: np.ndarray = None
    lambda_f: float = None
    u_s: np.ndarray = None
    z0: np.ndarray = None
    tubes: TubeSequence = None
    terminal: TerminalSpec = None
    solve_ms: float = 0.0
    kkt: dict = field(default_factory=dict)
    status: str = OPTIMAL
    h_w: np.ndarray = None

    @property
    def horizon(self):
        return self.v.shape[0]

    def as_dict(self):
        data = {
            'method': self.method,
            'status': self.status,
            'objective': self.objective,
            'x0': self.x0.tolist(),
            'u0': np.atleast_1d(self.u0).tolist(),
            'z': self.z.tolist(),
            'v': self.v.tolist(),
            'solve_ms': self.solve_ms,
        }
        if self.lambda_f is not None:
            data['lambda_f'] = self.lambda_f
        if self.z0 is not None:
            data['z0'] = self.z0.tolist()
        if self.tubes is not None:
            data['tubes'] = self.tubes.as_dict()
        if self.responses is not None:
            data['responses'] = self.responses.as_dict()
        return data


# FIR-constrained SLTMPC

def _dual_tightening_terms(builder, name, hw, rows, delays):
    """Columns and coefficients of sum_{j < delays} lam_{r,j}' h_w for every row r"""
    coefficient = np.kron(np.eye(rows), hw[None, :])
    return [(coefficient, builder.columns(name, j)) for j in range(delays)]


def _add_dual_rows(builder, name, Hc, block_name, delays, Hw, n):
    """H_w' lam_{r,j} = (Hc_r Phi^j)' and lam >= 0"""
    for j in range(delays):
        for r in range(Hc.shape[0]):
            builder.equality([(Hw.T, builder.columns(name, (j, r))),
                              (-np.kron(Hc[r:r + 1], np.eye(n)), builder.columns(block_name, j))],
                             np.zeros(n))
    size = builder.columns(name).size
    if size:
        builder.inequality([(-np.eye(size), builder.columns(name))], np.zeros(size))


def build_fir_sltmpc(sys, x0, cost, terminal, N, mode='fir'):
    """Problem data of the FIR-constrained SLTMPC (mode 'fir') or of the RPI-terminal SLTMPC baseline"""
    if mode not in MODES:
        raise UnsupportedTerminal(f"Unknown mode {mode!r}")
    if mode == 'non-fir-rpi' and terminal.kind != 'fixed-polytope':
        raise UnsupportedTerminal("The non-FIR mode needs a fixed RPI terminal polytope")
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape[0] != sys.n:
        raise DimensionMismatch(f"x0 has length {x0.shape[0]}, system has {sys.n} states")
    if N < 1:
        raise ValueError("Horizon N must be at least 1")
    horizon = N
    if terminal.kind == 'implicit-nominal':
        if terminal.N_mpc is None or terminal.N_mpc <= N:
            raise UnsupportedTerminal("The implicit terminal set needs N_mpc > N")
        horizon = terminal.N_mpc

    n, m = sys.n, sys.m
    Hx, hx = sys.X.H, sys.X.h
    Hu, hu = sys.U.H, sys.U.h
    Hw, hw = sys.W.H, sys.W.h
    nx, nu, nw = Hx.shape[0], Hu.shape[0], Hw.shape[0]
    K = terminal.K
    I_n, I_m = np.eye(n), np.eye(m)

    b = QpBuilder()
    b.add_variable('phi_z', (horizon + 1, n)).add_variable('phi_v', (horizon + 1, m))
    b.add_variable('Phi_e', (N + 1, n, n)).add_variable('Phi_k', (N + 1, m, n))
    b.add_variable('Lambda_e', (N, nx, nw)).add_variable('Lambda_k', (N, nu, nw))
    if terminal.kind == 'scaled-pi':
        b.add_variable('lambda_f', 1)
    elif terminal.kind == 'steady-state-set':
        b.add_variable('u_s', m)
    elif mode == 'non-fir-rpi':
        b.add_variable('Lambda_f', (N, terminal.base.n_rows, nw))

    # achievability of the responses
    b.equality([(I_n, b.columns('phi_z', 0))], np.zeros(n))
    b.equality([(np.eye(n * n), b.columns('Phi_e', 0))], I_n.reshape(-1))
    for i in range(horizon):
        b.equality([(I_n, b.columns('phi_z', i + 1)), (-sys.A, b.columns('phi_z', i)),
                    (-sys.B, b.columns('phi_v', i))], np.zeros(n))
    b.equality([(I_m, b.columns('phi_v', horizon))], np.zeros(m))
    for j in range(N):
        b.equality([(np.eye(n * n), b.columns('Phi_e', j + 1)), (-np.kron(sys.A, I_n), b.columns('Phi_e', j)),
                    (-np.kron(sys.B, I_n), b.columns('Phi_k', j))], np.zeros(n * n))
    if mode == 'fir':
        b.equality([(np.eye(n * n), b.columns('Phi_e', N))], np.zeros(n * n))
    b.equality([(np.eye(m * n), b.columns('Phi_k', N))], np.zeros(m * n))

    _add_dual_rows(b, 'Lambda_e', Hx, 'Phi_e', N, Hw, n)
    _add_dual_rows(b, 'Lambda_k', Hu, 'Phi_k', N, Hw, n)

    x0_map_x = np.kron(I_n, x0[None, :])
    x0_map_u = np.kron(I_m, x0[None, :])
    for i in range(horizon):
        state_terms = [(Hx, b.columns('phi_z', i))]
        input_terms = [(Hu, b.columns('phi_v', i))]
        if i <= N:
            state_terms.append((Hx @ x0_map_x, b.columns('Phi_e', i)))
            input_terms.append((Hu @ x0_map_u, b.columns('Phi_k', i)))
        state_terms += _dual_tightening_terms(b, 'Lambda_e', hw, nx, min(i, N))
        input_terms += _dual_tightening_terms(b, 'Lambda_k', hw, nu, min(i, N))
        b.inequality(state_terms, hx)
        b.inequality(input_terms, hu)

    tight_x = _dual_tightening_terms(b, 'Lambda_e', hw, nx, N)
    tight_u = _dual_tightening_terms(b, 'Lambda_k', hw, nu, N)
    final = b.columns('phi_z', horizon)
    if terminal.kind == 'scaled-pi':
        S = terminal.base
        lam = b.columns('lambda_f')
        b.inequality([(-np.ones((1, 1)), lam)], np.zeros(1))
        b.inequality([(S.H, final), (-S.h[:, None], lam)], np.zeros(S.n_rows))
        b.inequality([(support_many(S, Hx)[:, None], lam)] + tight_x, hx)
        b.inequality([(support_many(S, Hu @ K)[:, None], lam)] + tight_u, hu)
    elif terminal.kind == 'steady-state-set':
        u_s = b.columns('u_s')
        b.equality([(sys.A - I_n, final), (sys.B, u_s)], np.zeros(n))
        b.inequality([(Hx, final)] + tight_x, hx)
        b.inequality([(Hu, u_s)] + tight_u, hu)
    elif terminal.kind == 'implicit-nominal':
        b.equality([(I_n, final)], np.zeros(n))
    elif mode == 'fir':
        Xf = terminal.base
        b.inequality([(Xf.H, final)], Xf.h)
        b.inequality(tight_x, hx - support_many(Xf, Hx))
        b.inequality(tight_u, hu - support_many(Xf, Hu @ K))
    else:
        Xf = terminal.base
        _add_dual_rows(b, 'Lambda_f', Xf.H, 'Phi_e', N, Hw, n)
        terms = [(Xf.H, final), (Xf.H @ x0_map_x, b.columns('Phi_e', N))]
        terms += _dual_tightening_terms(b, 'Lambda_f', hw, Xf.n_rows, N)
        b.inequality(terms, Xf.h)

    for i in range(horizon):
        state = [(I_n, b.columns('phi_z', i))]
        inputs = [(I_m, b.columns('phi_v', i))]
        if i <= N:
            state.append((x0_map_x, b.columns('Phi_e', i)))
            inputs.append((x0_map_u, b.columns('Phi_k', i)))
        b.quadratic(cost.Q, state)
        b.quadratic(cost.R, inputs)
    terminal_terms = [(I_n, final)]
    if mode == 'non-fir-rpi':
        terminal_terms.append((x0_map_x, b.columns('Phi_e', N)))
    b.quadratic(cost.P_f, terminal_terms)

    meta = {'problem': 'fir-sltmpc', 'mode': mode, 'N': N, 'horizon': horizon, 'x0': x0,
            'terminal': terminal}
    return b.build(meta)


def _propagate_responses(sys, qp, x):
    """Re-run the recursions from the optimized inputs so they hold to machine precision"""
    N, horizon = qp.meta['N'], qp.meta['horizon']
    phi_v = qp.value(x, 'phi_v').copy()
    Phi_k = qp.value(x, 'Phi_k').copy()
    phi_z = np.zeros((horizon + 1, sys.n))
    for i in range(horizon):
        phi_z[i + 1] = sys.A @ phi_z[i] + sys.B @ phi_v[i]
    Phi_e = np.zeros((N + 1, sys.n, sys.n))
    Phi_e[0] = np.eye(sys.n)
    for j in range(N):
        Phi_e[j + 1] = sys.A @ Phi_e[j] + sys.B @ Phi_k[j]
    return phi_z, phi_v, Phi_e, Phi_k


def _polish_multipliers(W, Hc, blocks):
    """Smallest multipliers for every (delay, row): the support-LP duals"""
    delays = len(blocks)
    multipliers = np.zeros((delays, Hc.shape[0], W.n_rows))
    for j, block in enumerate(blocks):
        for r in range(Hc.shape[0]):
            multipliers[j, r] = support_dual(W, Hc[r] @ block)[1]
    return multipliers


def solve_fir_sltmpc(sys, x0, cost, terminal, backend=None, N=10, mode='fir', polish=True):
    backend = backend or default_backend()
    qp = build_fir_sltmpc(sys, x0, cost, terminal, N, mode)
    result = solve_or_raise(backend, qp, 'FIR-constrained SLTMPC problem')
    x0 = qp.meta['x0']
    horizon = qp.meta['horizon']

    phi_z, phi_v, Phi_e, Phi_k = _propagate_responses(sys, qp, result.x)
    responses = SystemResponses(N, phi_z[:N + 1], phi_v[:N + 1], Phi_e, Phi_k, fir=(mode == 'fir'))
    report = validate_responses(responses, sys)
    if not report.passed:
        raise SolverInaccurate(f"Optimized responses fail validation: {report.violations}", kkt=result.kkt)

    z = phi_z.copy()
    v = phi_v[:horizon].copy()
    z[:N + 1] += Phi_e @ x0
    v[:min(horizon, N + 1)] += (Phi_k @ x0)[:min(horizon, N + 1)]

    if polish:
        Lambda_e = _polish_multipliers(sys.W, sys.X.H, Phi_e[:N])
        Lambda_k = _polish_multipliers(sys.W, sys.U.H, Phi_k[:N])
    else:
        Lambda_e = np.maximum(qp.value(result.x, 'Lambda_e'), 0.0)
        Lambda_k = np.maximum(qp.value(result.x, 'Lambda_k'), 0.0)

    solution = MpcSolution(
        z=z, v=v, objective=result.objective, u0=v[0], x0=x0,
        method='fir-sltmpc' if mode == 'fir' else 'sltmpc-rpi',
        responses=responses, Lambda_e=Lambda_e, Lambda_k=Lambda_k,
        terminal=terminal, solve_ms=result.solve_ms, kkt=result.kkt,
        h_w=sys.W.h,
    )
    if terminal.kind == 'scaled-pi':
        solution.lambda_f = float(qp.value(result.x, 'lambda_f')[0])
    if terminal.kind == 'steady-state-set':
        solution.u_s = qp.value(result.x, 'u_s').copy()
    if polish:
        solution.tubes = support_tightenings(solution, sys)
    logger.debug("FIR SLTMPC at x0=%s: objective %.6g in %.1f ms", x0, solution.objective, result.solve_ms)
    return solution


def _cumulative(multipliers, hw, N):
    per_delay = multipliers @ hw
    return np.vstack([np.zeros((1, per_delay.shape[1])), np.cumsum(per_delay, axis=0)])[:N + 1]


def dual_tightenings(solution):
    """Per-step tightenings sum_{j<i} lam_{r,j}' h_w rebuilt from the multipliers"""
    if solution.Lambda_e is None or solution.h_w is None:
        raise ValueError("Solution carries no multipliers")
    N = solution.responses.N
    return _cumulative(solution.Lambda_e, solution.h_w, N), _cumulative(solution.Lambda_k, solution.h_w, N)


def support_tightenings(solution, sys):
    """The same tightenings from independent support LPs of the optimized blocks"""
    return sldrs_tightenings(solution.responses, sys, source='online-dual',
                             require_fir=solution.responses.fir)


# Nominal problems: offline SLTMPC, ct-MPC, RPI-tube MPC, nominal MPC

def _offsets_over(offsets, horizon):
    """Rows for steps 0..horizon-1, holding the last row past the end"""
    offsets = np.atleast_2d(offsets)
    index = np.minimum(np.arange(horizon), offsets.shape[0] - 1)
    return offsets[index]


def _build_nominal(sys, x0, cost, N, state_offsets, input_offsets, terminal=None,
                   terminal_offsets=None, initial_set=None, problem='nominal'):
    """min sum l(z_i, v_i) + l_f(z_H) over z, v with constant per-step offsets"""
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape[0] != sys.n:
        raise DimensionMismatch(f"x0 has length {x0.shape[0]}, system has {sys.n} states")
    kind = terminal.kind if isinstance(terminal, TerminalSpec) else ('fixed-polytope' if terminal is not None else None)
    horizon = terminal.N_mpc if kind == 'implicit-nominal' else N
    if kind == 'implicit-nominal' and (horizon is None or horizon <= N):
        raise UnsupportedTerminal("The implicit terminal set needs N_mpc > N")
    state_offsets = _offsets_over(state_offsets, horizon)
    input_offsets = _offsets_over(input_offsets, horizon)
    if terminal_offsets is None:
        terminal_offsets = (np.zeros(sys.X.n_rows), np.zeros(sys.U.n_rows))

    n, m = sys.n, sys.m
    Hx, hx = sys.X.H, sys.X.h
    Hu, hu = sys.U.H, sys.U.h
    I_n, I_m = np.eye(n), np.eye(m)

    b = QpBuilder()
    b.add_variable('z', (horizon + 1, n)).add_variable('v', (horizon, m))
    if kind == 'scaled-pi':
        b.add_variable('lambda_f', 1)
    elif kind == 'steady-state-set':
        b.add_variable('u_s', m)

    if initial_set is None:
        b.equality([(I_n, b.columns('z', 0))], x0)
    else:
        b.inequality([(-initial_set.H, b.columns('z', 0))], initial_set.h - initial_set.H @ x0)
    for i in range(horizon):
        b.equality([(I_n, b.columns('z', i + 1)), (-sys.A, b.columns('z', i)), (-sys.B, b.columns('v', i))],
                   np.zeros(n))
        b.inequality([(Hx, b.columns('z', i))], hx - state_offsets[i])
        b.inequality([(Hu, b.columns('v', i))], hu - input_offsets[i])

    final = b.columns('z', horizon)
    offset_x, offset_u = terminal_offsets
    if kind == 'scaled-pi':
        S, K = terminal.base, terminal.K
        lam = b.columns('lambda_f')
        b.inequality([(-np.ones((1, 1)), lam)], np.zeros(1))
        b.inequality([(S.H, final), (-S.h[:, None], lam)], np.zeros(S.n_rows))
        b.inequality([(support_many(S, Hx)[:, None], lam)], hx - offset_x)
        b.inequality([(support_many(S, Hu @ K)[:, None], lam)], hu - offset_u)
    elif kind == 'steady-state-set':
        u_s = b.columns('u_s')
        b.equality([(sys.A - I_n, final), (sys.B, u_s)], np.zeros(n))
        b.inequality([(Hx, final)], hx - offset_x)
        b.inequality([(Hu, u_s)], hu - offset_u)
    elif kind == 'implicit-nominal':
        b.equality([(I_n, final)], np.zeros(n))
    elif kind == 'fixed-polytope':
        Xf = terminal.base if isinstance(terminal, TerminalSpec) else terminal
        b.inequality([(Xf.H, final)], Xf.h)

    for i in range(horizon):
        b.quadratic(cost.Q, [(I_n, b.columns('z', i))])
        b.quadratic(cost.R, [(I_m, b.columns('v', i))])
    b.quadratic(cost.P_f, [(I_n, final)])
    return b.build({'problem': problem, 'N': N, 'horizon': horizon, 'x0': x0, 'terminal': terminal})


def _nominal_solution(qp, result, method, terminal=None, tubes=None):
    z = qp.value(result.x, 'z').copy()
    v = qp.value(result.x, 'v').copy()
    solution = MpcSolution(z=z, v=v, objective=result.objective, u0=v[0].copy(), x0=qp.meta['x0'],
                           method=method, tubes=tubes, terminal=terminal, z0=z[0].copy(),
                           solve_ms=result.solve_ms, kkt=result.kkt)
    if 'lambda_f' in qp.index:
        solution.lambda_f = float(qp.value(result.x, 'lambda_f')[0])
    if 'u_s' in qp.index:
        solution.u_s = qp.value(result.x, 'u_s').copy()
    return solution


def nominal_mpc(sys, x0, cost, terminal, N=10, backend=None):
    """Plain nominal MPC: no tightening at all"""
    return NominalMpcController(sys, cost, N, terminal=terminal, backend=backend).solve(x0)


def solve_offline_sltmpc(sys, tubes, x0, cost, terminal, backend=None):
    """Nominal problem with precomputed SL-DRS offsets"""
    backend = backend or default_backend()
    terminal_offsets = (tubes.state_at(tubes.N), tubes.input_at(tubes.N))
    qp = _build_nominal(sys, x0, cost, tubes.N, tubes.state_offsets, tubes.input_offsets,
                        terminal, terminal_offsets, problem='fir-sltmpc-offline')
    result = solve_or_raise(backend, qp, 'offline-tube SLTMPC problem')
    return _nominal_solution(qp, result, 'fir-sltmpc-offline', terminal, tubes)


def solve_ct_mpc(sys, K, x0, cost, backend=None, N=10, terminal_set=None):
    return CtMpcController(sys, cost, N, K=K, backend=backend, terminal_set=terminal_set).solve(x0)


def solve_rpi_tube_mpc(sys, K, x0, cost, backend=None, N=10, omega=None, terminal_set=None):
    return RpiTubeMpcController(sys, cost, N, K=K, backend=backend, omega=omega,
                                terminal_set=terminal_set).solve(x0)


# Offline tube synthesis

@dataclass(eq=False)
class TubeDesign:
    responses: SystemResponses
    tubes: TubeSequence
    objective: float
    kind: str
    solve_ms: float = 0.0
    fallback: bool = False


def _project_fir(sys, Phi_k):
    """Least-norm correction of Phi_k^0..Phi_k^(N-1) so that Phi_e^N = 0 exactly"""
    N = Phi_k.shape[0] - 1
    n = sys.n
    blocks = []
    power = np.eye(n)
    for j in reversed(range(N)):
        blocks.append((j, np.kron(power @ sys.B, np.eye(n))))
        power = power @ sys.A
    M = np.hstack([block for _, block in sorted(blocks, key=lambda item: item[0])])
    target = -power.reshape(-1)
    stacked = Phi_k[:N].reshape(-1)
    correction = np.linalg.lstsq(M, M @ stacked - target, rcond=None)[0]
    projected = Phi_k.copy()
    projected[:N] = (stacked - correction).reshape(N, sys.m, n)
    projected[N] = 0.0
    return projected


def _tube_objective(kind, Phi_e, Phi_k, T_e, T_k, N, weights, C):
    Q_half, R_half = weights
    if kind == 'min-tightening':
        return cp.norm(T_e, 'inf') + cp.norm(T_k, 'inf'), 'qp'
    if kind in ('induced-inf-gain', 'l1'):
        C = C if kind == 'induced-inf-gain' else np.block([
            [Q_half, np.zeros((Q_half.shape[0], R_half.shape[1]))],
            [np.zeros((R_half.shape[0], Q_half.shape[1])), R_half]])
        row_sums = sum(cp.sum(cp.abs(C @ cp.vstack([Phi_e[j], Phi_k[j]])), axis=1) for j in range(N))
        return cp.max(row_sums), 'qp'
    if kind == 'lqr':
        return sum(cp.sum_squares(Q_half @ Phi_e[j]) + cp.sum_squares(R_half @ Phi_k[j]) for j in range(N)), 'qp'
    raise UnsupportedKind(f"Unknown tube cost {kind!r}")


def _hinf_operator(Phi_e, Phi_k, N, C):
    """Weighted block-Toeplitz map from N disturbances to N stacked (e, k) samples"""
    rows = []
    for i in range(N):
        row = []
        for k in range(N):
            if i >= k:
                row.append(C @ cp.vstack([Phi_e[i - k], Phi_k[i - k]]))
            else:
                row.append(np.zeros((C.shape[0], Phi_e[0].shape[1])))
        rows.append(row)
    return cp.bmat(rows)


def synthesize_tubes(sys, N, cost_kind='min-tightening', rho_x=1.0, rho_u=1.0, backend=None,
                     C=None, weights=None, allow_fallback=False):
    """FIR responses whose SL-DRS fit inside rho_x X and rho_u U, optimal for the chosen cost"""
    if cost_kind not in COST_KINDS:
        raise UnsupportedKind(f"Unknown tube cost {cost_kind!r}")
    if not (0 < rho_x <= 1 and 0 < rho_u <= 1):
        raise ValueError("rho_x and rho_u must lie in (0, 1]")
    backend = backend or default_backend()
    n, m = sys.n, sys.m
    Hx, hx = sys.X.H, sys.X.h
    Hu, hu = sys.U.H, sys.U.h
    Hw, hw = sys.W.H, sys.W.h
    Q, R = weights if weights is not None else (np.eye(n), np.eye(m))
    Q_half = np.real(sqrtm(np.atleast_2d(Q)))
    R_half = np.real(sqrtm(np.atleast_2d(R)))
    C = np.eye(n + m) if C is None else np.atleast_2d(np.asarray(C, dtype=float))
    if C.shape[1] != n + m:
        raise DimensionMismatch(f"Weighting C must have {n + m} columns")

    Phi_e = [cp.Variable((n, n)) for _ in range(N + 1)]
    Phi_k = [cp.Variable((m, n)) for _ in range(N + 1)]
    Lambda_e = [cp.Variable((Hx.shape[0], Hw.shape[0]), nonneg=True) for _ in range(N)]
    Lambda_k = [cp.Variable((Hu.shape[0], Hw.shape[0]), nonneg=True) for _ in range(N)]
    constraints = [Phi_e[0] == np.eye(n), Phi_e[N] == 0, Phi_k[N] == 0]
    constraints += [Phi_e[j + 1] == sys.A @ Phi_e[j] + sys.B @ Phi_k[j] for j in range(N)]
    constraints += [Lambda_e[j] @ Hw == Hx @ Phi_e[j] for j in range(N)]
    constraints += [Lambda_k[j] @ Hw == Hu @ Phi_k[j] for j in range(N)]
    T_e = sum(Lambda_e[j] @ hw for j in range(N))
    T_k = sum(Lambda_k[j] @ hw for j in range(N))
    constraints += [T_e <= rho_x * hx, T_k <= rho_u * hu]

    fallback = False
    if cost_kind == 'hinf':
        weighting = np.block([[Q_half, np.zeros((n, m))], [np.zeros((m, n)), R_half]]) if weights is not None else C
        operator = _hinf_operator(Phi_e, Phi_k, N, weighting)
        if backend.supports('sdp'):
            objective, capability = cp.sigma_max(operator), 'sdp'
        elif allow_fallback:
            logger.warning("No SDP-capable backend: using the Frobenius bound for the H-infinity tube cost")
            objective, capability, fallback = cp.norm(operator, 'fro'), 'socp', True
        else:
            raise BackendCapability("The H-infinity tube cost needs an SDP-capable backend")
    else:
        objective, capability = _tube_objective(cost_kind, Phi_e, Phi_k, T_e, T_k, N, (Q_half, R_half), C)

    problem = cp.Problem(cp.Minimize(objective), constraints)
    status, elapsed = backend.solve_problem(problem, capability)
    if status == 'infeasible':
        raise Infeasible(f"No FIR response of horizon {N} keeps the tubes inside the scaled constraints")
    if status != OPTIMAL:
        raise SolverInaccurate(f"Tube synthesis ended with status {status}")

    Phi_k_value = _project_fir(sys, np.array([block.value for block in Phi_k]).reshape(N + 1, m, n))
    Phi_e_value = np.zeros((N + 1, n, n))
    Phi_e_value[0] = np.eye(n)
    for j in range(N):
        Phi_e_value[j + 1] = sys.A @ Phi_e_value[j] + sys.B @ Phi_k_value[j]
    Phi_e_value[N] = np.where(np.abs(Phi_e_value[N]) < 1e-12, 0.0, Phi_e_value[N])
    responses = SystemResponses(N, np.zeros((N + 1, n)), np.zeros((N + 1, m)), Phi_e_value, Phi_k_value, fir=True)
    tubes = sldrs_tightenings(responses, sys, source='offline-synthesis')
    logger.info("Tube synthesis (%s, N=%d): objective %.6g in %.1f ms", cost_kind, N, problem.value, elapsed)
    return TubeDesign(responses, tubes, float(problem.value), cost_kind, elapsed, fallback)


def synth_tubes_offline(sys, N, cost_kind='min-tightening', rho_x=1.0, rho_u=1.0, backend=None, **kwargs):
    design = synthesize_tubes(sys, N, cost_kind, rho_x, rho_u, backend, **kwargs)
    return design.responses, design.tubes


# Recursive feasibility candidate

@dataclass(eq=False)
class ShiftCandidate:
    z: np.ndarray
    v: np.ndarray
    x_next: np.ndarray
    w: np.ndarray


def _terminal_input(solution, terminal, sys):
    z_final = solution.z[-1]
    if terminal.kind == 'steady-state-set':
        return solution.u_s
    if terminal.kind == 'implicit-nominal':
        return np.zeros(sys.m)
    return terminal.K @ z_final


def shift_candidate(solution, sys, x0, w, terminal=None):
    """Shifted optimal trajectory corrected by the optimized responses for the realized disturbance"""
    terminal = terminal or solution.terminal
    resp = solution.responses
    if resp is None or not resp.fir:
        raise ValueError("The shift candidate needs an FIR solution of the online problem")
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    w = np.asarray(w, dtype=float).reshape(-1)
    x_next = sys.step(x0, solution.u0, w)
    kappa = _terminal_input(solution, terminal, sys)
    horizon = solution.horizon
    z_hat = np.vstack([solution.z[1:], sys.A @ solution.z[-1] + sys.B @ kappa])
    v_hat = np.vstack([solution.v[1:], kappa[None, :]])
    z_bar = np.array([z_hat[j] + resp.error_block(j) @ w for j in range(horizon + 1)])
    v_bar = np.array([v_hat[j] + resp.input_block(j) @ w for j in range(horizon)])
    return ShiftCandidate(z_bar, v_bar, x_next, w)


def candidate_violation(candidate, solution, sys, terminal=None):
    """Largest constraint violation of the candidate in the problem posed at x_next"""
    terminal = terminal or solution.terminal
    tubes = solution.tubes or support_tightenings(solution, sys)
    z, v = candidate.z, candidate.v
    horizon = v.shape[0]
    gaps = [np.abs(z[0] - candidate.x_next).max(),
            np.abs(z[1:] - z[:-1] @ sys.A.T - v @ sys.B.T).max()]
    for j in range(horizon):
        gaps.append((sys.X.H @ z[j] + tubes.state_at(j) - sys.X.h).max())
        gaps.append((sys.U.H @ v[j] + tubes.input_at(j) - sys.U.h).max())
    final = z[-1]
    if terminal.kind == 'scaled-pi':
        gaps.append((terminal.base.H @ final - solution.lambda_f * terminal.base.h).max())
    elif terminal.kind == 'steady-state-set':
        gaps.append(np.abs((sys.A - np.eye(sys.n)) @ final + sys.B @ solution.u_s).max())
    elif terminal.kind == 'implicit-nominal':
        gaps.append(np.abs(final).max())
    else:
        gaps.append((terminal.base.H @ final - terminal.base.h).max())
    return float(max(0.0, max(gaps)))


# Controllers

class MpcController:
    """Receding-horizon controller: solve(x) returns the optimal solution, u0 is applied"""
    method = None

    def __init__(self, sys, cost, N, K=None, backend=None):
        self.sys = sys
        self.cost = cost
        self.N = N
        self.backend = backend or default_backend()
        self.K = lqr_gain(sys.A, sys.B, cost.Q, cost.R) if K is None else np.atleast_2d(np.asarray(K, dtype=float))

    def __repr__(self):
        return f"{type(self).__name__}(N={self.N})"

    def program(self, x):
        raise NotImplementedError

    def solve(self, x):
        raise NotImplementedError

    def is_feasible(self, x):
        return self.backend.feasible(self.program(x))

    def __call__(self, x):
        return self.solve(x).u0

    def _preimage_terminal(self, state_offsets, input_offsets):
        """Maximal PI set under K inside the tightened state and input constraints"""
        A_cl = self.sys.closed_loop(self.K)
        region = self.sys.X.pontryagin(state_offsets).intersect(_input_preimage(self.sys, self.K, input_offsets))
        return maximal_pi_set(A_cl, region)


class FirSltmpcController(MpcController):
    method = 'fir-sltmpc'

    def __init__(self, sys, cost, N, K=None, backend=None, terminal=None, terminal_kind='scaled-pi',
                 N_mpc=None, mode='fir', polish=False):
        super().__init__(sys, cost, N, K, backend)
        if mode == 'non-fir-rpi':
            self.method = 'sltmpc-rpi'
            terminal_kind = 'fixed-polytope'
        self.mode = mode
        self.polish = polish
        self.terminal = terminal or make_terminal(terminal_kind, sys, self.K, N=N, N_mpc=N_mpc)

    def program(self, x):
        return build_fir_sltmpc(self.sys, x, self.cost, self.terminal, self.N, self.mode)

    def solve(self, x):
        return solve_fir_sltmpc(self.sys, x, self.cost, self.terminal, self.backend, self.N, self.mode,
                                polish=self.polish)


class OfflineSltmpcController(MpcController):
    method = 'fir-sltmpc-offline'

    def __init__(self, sys, cost, N, K=None, backend=None, tubes=None, cost_kind='min-tightening',
                 rho_x=1.0, rho_u=1.0, terminal=None, weights=None):
        super().__init__(sys, cost, N, K, backend)
        if tubes is None:
            tubes = synthesize_tubes(sys, N, cost_kind, rho_x, rho_u, self.backend, weights=weights).tubes
        self.tubes = tubes
        if terminal is None:
            terminal = TerminalSpec('fixed-polytope', self.K,
                                    base=self._preimage_terminal(tubes.state_at(N), tubes.input_at(N)))
        self.terminal = terminal

    def program(self, x):
        tubes = self.tubes
        return _build_nominal(self.sys, x, self.cost, tubes.N, tubes.state_offsets,
                              tubes.input_offsets, self.terminal,
                              (tubes.state_at(tubes.N), tubes.input_at(tubes.N)), problem=self.method)

    def solve(self, x):
        return solve_offline_sltmpc(self.sys, self.tubes, x, self.cost, self.terminal, self.backend)


class CtMpcController(MpcController):
    """Constraint-tightening MPC: DRS offsets of the fixed K and the terminal set X_f minus F_N"""
    method = 'ct-mpc'

    def __init__(self, sys, cost, N, K=None, backend=None, terminal_set=None):
        super().__init__(sys, cost, N, K, backend)
        A_cl = sys.closed_loop(self.K)
        self.tubes = drs_tightenings(A_cl, sys.W, sys.X, sys.U, self.K, N)
        if terminal_set is None:
            robust = maximal_rpi_set(A_cl, sys.X.intersect(_input_preimage(sys, self.K)), sys.W)
            powers = [np.linalg.matrix_power(A_cl, j) for j in range(N)]
            terminal_set = robust.pontryagin(tightening(robust.H, powers, sys.W))
            if terminal_set.is_empty():
                raise EmptyResult("The tightened ct-MPC terminal set is empty")
        self.terminal = TerminalSpec('fixed-polytope', self.K, base=terminal_set)

    def program(self, x):
        return _build_nominal(self.sys, x, self.cost, self.N, self.tubes.state_offsets,
                              self.tubes.input_offsets, self.terminal, problem=self.method)

    def solve(self, x):
        qp = self.program(x)
        result = solve_or_raise(self.backend, qp, 'ct-MPC problem')
        return _nominal_solution(qp, result, self.method, self.terminal, self.tubes)


class RpiTubeMpcController(MpcController):
    """Constant tightening by the minimal RPI set, free initial nominal state z_0 in x - Omega"""
    method = 'rpi-tube'

    def __init__(self, sys, cost, N, K=None, backend=None, omega=None, terminal_set=None, eps=None):
        super().__init__(sys, cost, N, K, backend)
        A_cl = sys.closed_loop(self.K)
        if omega is None and sys.n != 2:
            raise NotTwoDimensional(f"The RPI set is only computed exactly in the plane (dimension {sys.n}); "
                                    "pass omega explicitly")
        self.omega = omega if omega is not None else mrpi_approx(A_cl, sys.W, eps)[0]
        self.state_offset = support_many(self.omega, sys.X.H)
        self.input_offset = support_many(self.omega, sys.U.H @ self.K)
        if terminal_set is None:
            terminal_set = self._preimage_terminal(self.state_offset, self.input_offset)
        self.terminal = TerminalSpec('fixed-polytope', self.K, base=terminal_set)
        constant = np.tile(self.state_offset, (N + 1, 1))
        self.tubes = TubeSequence(N, constant, np.tile(self.input_offset, (N + 1, 1)), source='rpi-constant')

    def program(self, x):
        return _build_nominal(self.sys, x, self.cost, self.N, self.state_offset[None, :],
                              self.input_offset[None, :], self.terminal, initial_set=self.omega,
                              problem=self.method)

    def solve(self, x):
        x = np.asarray(x, dtype=float).reshape(-1)
        qp = self.program(x)
        result = solve_or_raise(self.backend, qp, 'RPI-tube MPC problem')
        solution = _nominal_solution(qp, result, self.method, self.terminal, self.tubes)
        solution.u0 = solution.v[0] + self.K @ (x - solution.z0)
        return solution


class NominalMpcController(MpcController):
    method = 'nominal'

    def __init__(self, sys, cost, N, K=None, backend=None, terminal=None, terminal_kind='scaled-pi', N_mpc=None):
        super().__init__(sys, cost, N, K, backend)
        self.terminal = terminal or make_terminal(terminal_kind, sys, self.K, N=N, N_mpc=N_mpc)

    def program(self, x):
        return _build_nominal(self.sys, x, self.cost, self.N, np.zeros((1, self.sys.X.n_rows)),
                              np.zeros((1, self.sys.U.n_rows)), self.terminal, problem=self.method)

    def solve(self, x):
        qp = self.program(x)
        result = solve_or_raise(self.backend, qp, 'nominal MPC problem')
        return _nominal_solution(qp, result, self.method, self.terminal)


def make_controller(method, sys, cost, N, K=None, backend=None, terminal_kind='scaled-pi', N_mpc=None,
                    tube_cost='min-tightening', rho_x=1.0, rho_u=1.0, tubes=None, weights=None):
    if method == 'fir-sltmpc':
        return FirSltmpcController(sys, cost, N, K, backend, terminal_kind=terminal_kind, N_mpc=N_mpc)
    if method == 'sltmpc-rpi':
        return FirSltmpcController(sys, cost, N, K, backend, mode='non-fir-rpi')
    if method == 'fir-sltmpc-offline':
        return OfflineSltmpcController(sys, cost, N, K, backend, tubes=tubes, cost_kind=tube_cost,
                                       rho_x=rho_x, rho_u=rho_u, weights=weights)
    if method == 'ct-mpc':
        return CtMpcController(sys, cost, N, K, backend)
    if method == 'rpi-tube':
        return RpiTubeMpcController(sys, cost, N, K, backend)
    if method == 'nominal':
        return NominalMpcController(sys, cost, N, K, backend, terminal_kind=terminal_kind, N_mpc=N_mpc)
    raise UnsupportedKind(f"Unknown method {method!r}")
