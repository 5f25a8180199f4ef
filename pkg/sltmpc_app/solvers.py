"""
Solver standard form and the cvxpy-backed solver layer.

Builders in ``mpc`` emit a ``QuadraticProgram``; backends solve it and map
solver statuses onto optimal / infeasible / unbounded / inaccurate.
"""

import logging
import time
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .app_settings import sltmpc_setting
from .exceptions import (BackendCapability, DimensionMismatch, Infeasible, NotConvex, SolverError,
                         SolverInaccurate)

logger = logging.getLogger(__name__)

OPTIMAL = 'optimal'
INFEASIBLE = 'infeasible'
UNBOUNDED = 'unbounded'
INACCURATE = 'inaccurate'

STATUS_MAP = {
    cp.OPTIMAL: OPTIMAL,
    cp.INFEASIBLE: INFEASIBLE,
    cp.INFEASIBLE_INACCURATE: INFEASIBLE,
    cp.UNBOUNDED: UNBOUNDED,
    cp.UNBOUNDED_INACCURATE: UNBOUNDED,
    cp.OPTIMAL_INACCURATE: INACCURATE,
}


@dataclass(eq=False)
class QuadraticProgram:
    """min 0.5 x'Px + q'x + constant  s.t.  Aeq x = beq, Ain x <= bin"""
    P: sp.csc_matrix
    q: np.ndarray
    Aeq: sp.csr_matrix
    beq: np.ndarray
    Ain: sp.csr_matrix
    bin: np.ndarray
    index: dict
    constant: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.q.shape[0]
        if self.P.shape != (n, n):
            raise DimensionMismatch(f"P has shape {self.P.shape}, expected ({n}, {n})")
        if self.Aeq.shape != (self.beq.shape[0], n) or self.Ain.shape != (self.bin.shape[0], n):
            raise DimensionMismatch("Constraint blocks do not match the variable count")

    @property
    def n_vars(self):
        return self.q.shape[0]

    def min_eigenvalue(self):
        """Smallest eigenvalue of P restricted to the variables it touches"""
        active = np.unique(np.concatenate(self.P.nonzero()))
        if active.size == 0:
            return 0.0
        block = self.P[active][:, active].toarray()
        return float(np.linalg.eigvalsh(0.5 * (block + block.T)).min())

    def check_convex(self, tol=1e-9):
        """Raises NotConvex unless P is symmetric PSD, up to tol relative to its largest entry"""
        if not self.P.nnz:
            return True
        tol = tol * max(1.0, float(abs(self.P).max()))
        asymmetry = abs(self.P - self.P.T).max()
        if asymmetry > tol:
            raise NotConvex(f"P is not symmetric (max asymmetry {asymmetry:.2e})")
        if self.min_eigenvalue() < -tol:
            raise NotConvex(f"P is not positive semidefinite (smallest eigenvalue {self.min_eigenvalue():.2e})")
        return True

    def value(self, x, name):
        """Slice of x belonging to the named variable block"""
        start, stop, shape = self.index[name]
        return x[start:stop].reshape(shape)

    def objective(self, x):
        return float(0.5 * x @ (self.P @ x) + self.q @ x + self.constant)


class QpBuilder:
    """Accumulates named variable blocks and sparse constraint rows"""

    def __init__(self):
        self.index = {}
        self.n_vars = 0
        self._eq = ([], [], [], [])
        self._in = ([], [], [], [])
        self._quad = ([], [], [])
        self.q = []
        self.constant = 0.0

    def add_variable(self, name, shape):
        shape = tuple(shape) if np.ndim(shape) else (int(shape),)
        size = int(np.prod(shape))
        self.index[name] = (self.n_vars, self.n_vars + size, shape)
        self.n_vars += size
        return self

    def columns(self, name, position=None):
        """Global column indices of a variable block, or of one entry of it"""
        start, stop, shape = self.index[name]
        cols = np.arange(start, stop).reshape(shape)
        return cols if position is None else cols[position]

    def _add_rows(self, store, terms, rhs):
        rows, cols, vals, rhs_list = store
        rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
        offset = len(rhs_list)
        for coefficient, columns in terms:
            coefficient = np.atleast_2d(np.asarray(coefficient, dtype=float))
            columns = np.asarray(columns).reshape(-1)
            if coefficient.shape != (rhs.shape[0], columns.shape[0]):
                raise DimensionMismatch(
                    f"Coefficient block {coefficient.shape} does not match "
                    f"{rhs.shape[0]} rows x {columns.shape[0]} columns")
            r, c = np.nonzero(coefficient)
            rows.extend(offset + r)
            cols.extend(columns[c])
            vals.extend(coefficient[r, c])
        rhs_list.extend(rhs)

    def equality(self, terms, rhs):
        """sum_k coefficient_k @ x[columns_k] == rhs"""
        self._add_rows(self._eq, terms, rhs)

    def inequality(self, terms, rhs):
        self._add_rows(self._in, terms, rhs)

    def quadratic(self, weight, terms, offset=None):
        """Adds (y + offset)' weight (y + offset) with y = sum_k G_k x[columns_k]"""
        weight = np.atleast_2d(np.asarray(weight, dtype=float))
        G = sp.csr_matrix((weight.shape[0], self.n_vars))
        for coefficient, columns in terms:
            coefficient = np.atleast_2d(np.asarray(coefficient, dtype=float))
            columns = np.asarray(columns).reshape(-1)
            r, c = np.nonzero(coefficient)
            G = G + sp.csr_matrix((coefficient[r, c], (r, columns[c])), shape=G.shape)
        rows, cols, vals = self._quad
        block = (G.T @ sp.csr_matrix(weight) @ G).tocoo()
        rows.extend(block.row)
        cols.extend(block.col)
        vals.extend(2.0 * block.data)
        if offset is not None:
            offset = np.asarray(offset, dtype=float).reshape(-1)
            linear = 2.0 * (G.T @ (weight @ offset))
            self.q.append((np.arange(self.n_vars), np.asarray(linear).reshape(-1)))
            self.constant += float(offset @ weight @ offset)

    def build(self, meta=None):
        n = self.n_vars
        q = np.zeros(n)
        for columns, values in self.q:
            np.add.at(q, columns, values)
        rows, cols, vals = self._quad
        P = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsc()
        P = ((P + P.T) / 2).tocsc()

        def assemble(store):
            r, c, v, rhs = store
            return sp.coo_matrix((v, (r, c)), shape=(len(rhs), n)).tocsr(), np.array(rhs, dtype=float)

        Aeq, beq = assemble(self._eq)
        Ain, bin_ = assemble(self._in)
        return QuadraticProgram(P, q, Aeq, beq, Ain, bin_, dict(self.index), self.constant, meta or {})


@dataclass
class SolveResult:
    status: str
    x: np.ndarray = None
    y_eq: np.ndarray = None
    z_in: np.ndarray = None
    objective: float = None
    solve_ms: float = 0.0
    kkt: dict = field(default_factory=dict)

    @property
    def optimal(self):
        return self.status == OPTIMAL


def kkt_residuals(qp, x, y_eq, z_in):
    """Primal, stationarity and complementarity residuals at (x, y, z)"""
    residuals = {
        'primal_eq': float(np.abs(qp.Aeq @ x - qp.beq).max(initial=0.0)),
        'primal_in': float(np.maximum(qp.Ain @ x - qp.bin, 0.0).max(initial=0.0)),
    }
    if y_eq is not None and z_in is not None:
        gradient = qp.P @ x + qp.q + qp.Aeq.T @ y_eq + qp.Ain.T @ z_in
        residuals['stationarity'] = float(np.abs(gradient).max(initial=0.0))
        residuals['complementarity'] = float(np.abs(z_in * (qp.Ain @ x - qp.bin)).max(initial=0.0))
    return residuals


class SolverBackend:
    """Interface every backend implements"""
    capabilities = frozenset()

    def supports(self, kind):
        return kind in self.capabilities

    def require(self, kind):
        if not self.supports(kind):
            raise BackendCapability(f"Backend {self!r} cannot solve {kind.upper()} problems")

    def solve_qp(self, qp):
        raise NotImplementedError

    def solve_problem(self, problem, kind='qp'):
        raise NotImplementedError

    def feasible(self, qp):
        """Feasibility of the QP constraints alone, through a HiGHS LP"""
        if qp.n_vars == 0:
            return True
        result = linprog(np.zeros(qp.n_vars),
                         A_ub=qp.Ain if qp.Ain.shape[0] else None, b_ub=qp.bin if qp.Ain.shape[0] else None,
                         A_eq=qp.Aeq if qp.Aeq.shape[0] else None, b_eq=qp.beq if qp.Aeq.shape[0] else None,
                         bounds=[(None, None)] * qp.n_vars, method='highs')
        if result.status not in (0, 2):
            logger.warning("Feasibility LP ended with status %d: %s", result.status, result.message)
        return result.status == 0


class CvxpyBackend(SolverBackend):
    def __init__(self, solver=None, sdp_solvers=None, capabilities=None):
        self.solver = solver or sltmpc_setting('QP_SOLVER')
        installed = set(cp.installed_solvers())
        preferred_sdp = sdp_solvers or sltmpc_setting('SDP_SOLVERS')
        self.sdp_solver = next((name for name in preferred_sdp if name in installed), None)
        if capabilities is None:
            capabilities = {'qp', 'socp'} if self.solver in installed else set()
            if self.sdp_solver:
                capabilities.add('sdp')
        self.capabilities = frozenset(capabilities)

    def __repr__(self):
        return f"CvxpyBackend(solver={self.solver!r}, capabilities={sorted(self.capabilities)})"

    def _solve(self, problem, solver):
        options = sltmpc_setting('SOLVER_OPTIONS').get(solver, {})
        started = time.perf_counter()
        try:
            problem.solve(solver=solver, **options)
        except cp.error.SolverError as exc:
            raise SolverError(f"{solver} failed: {exc}") from exc
        elapsed = (time.perf_counter() - started) * 1000.0
        status = STATUS_MAP.get(problem.status, INACCURATE)
        return status, elapsed

    def solve_problem(self, problem, kind='qp'):
        """Solve an already modelled cvxpy problem; returns (status, solve_ms)"""
        self.require(kind)
        solver = self.sdp_solver if kind == 'sdp' else self.solver
        return self._solve(problem, solver)

    def solve_qp(self, qp):
        self.require('qp')
        qp.check_convex()
        x = cp.Variable(qp.n_vars)
        objective = qp.q @ x + qp.constant
        if qp.P.nnz:
            objective = objective + 0.5 * cp.quad_form(x, cp.psd_wrap(qp.P))
        constraints = []
        if qp.Aeq.shape[0]:
            constraints.append(qp.Aeq @ x - qp.beq == 0)
        if qp.Ain.shape[0]:
            constraints.append(qp.Ain @ x - qp.bin <= 0)
        problem = cp.Problem(cp.Minimize(objective), constraints)
        status, elapsed = self._solve(problem, self.solver)
        logger.debug("QP with %d variables: %s in %.1f ms", qp.n_vars, status, elapsed)
        if status not in (OPTIMAL, INACCURATE):
            return SolveResult(status, solve_ms=elapsed)

        value = np.asarray(x.value, dtype=float).reshape(-1)
        y_eq = np.asarray(constraints[0].dual_value).reshape(-1) if qp.Aeq.shape[0] else np.zeros(0)
        z_in = np.asarray(constraints[-1].dual_value).reshape(-1) if qp.Ain.shape[0] else np.zeros(0)
        result = SolveResult(status, value, y_eq, z_in, qp.objective(value), elapsed,
                             kkt_residuals(qp, value, y_eq, z_in))
        return result


def solve_or_raise(backend, qp, what='problem'):
    """Solve and turn non-optimal statuses into exceptions"""
    result = backend.solve_qp(qp)
    if result.status == INFEASIBLE:
        raise Infeasible(f"The {what} is infeasible")
    if result.status == UNBOUNDED:
        raise SolverError(f"The {what} is unbounded")
    if result.status == INACCURATE:
        raise SolverInaccurate(f"The {what} was solved inaccurately", kkt=result.kkt)
    primal = max(result.kkt.get('primal_eq', 0.0), result.kkt.get('primal_in', 0.0))
    if primal > sltmpc_setting('RESIDUAL_TOL'):
        raise SolverInaccurate(f"The {what} solution violates constraints by {primal:.2e}", kkt=result.kkt)
    return result


def default_backend():
    return CvxpyBackend()
