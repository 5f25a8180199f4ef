"""
Closed-loop simulation, region-of-attraction grids and method comparisons.

Random streams are split up front with ``SeedSequence.spawn`` so every run
owns its generator and results do not depend on how work is scheduled.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .app_settings import sltmpc_setting
from .exceptions import ControllerInfeasible, SltmpcError
from .mpc import COST_KINDS, MpcController, synthesize_tubes
from .polytope import extreme_points, sample_uniform, support_many

logger = logging.getLogger(__name__)

DISTURBANCE_MODES = ('uniform', 'vertex-walk')
BOUNDARY_SLACK = 1e-4


def _map(function, items, workers):
    workers = sltmpc_setting('WORKERS') if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [function(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(function, items, chunksize=max(1, len(items) // (4 * workers))))


def disturbance_sequence(W, T, mode, rng):
    """T disturbances drawn uniformly from W or as a random walk over its vertices"""
    if mode == 'uniform':
        return sample_uniform(W, T, rng)
    if mode == 'vertex-walk':
        vertices = extreme_points(W)
        return vertices[rng.integers(len(vertices), size=T)]
    raise ValueError(f"Unknown disturbance mode {mode!r}, expected one of {DISTURBANCE_MODES}")


@dataclass
class SimulationResult:
    """
    Stacked closed-loop runs. Entries after an aborted step are NaN;
    ``aborted_at`` is -1 for runs that completed.
    """
    states: np.ndarray
    inputs: np.ndarray
    disturbances: np.ndarray
    stage_costs: np.ndarray
    solve_ms: np.ndarray
    feasible: np.ndarray
    aborted_at: np.ndarray
    state_violation: np.ndarray
    input_violation: np.ndarray
    seed: int = None
    tolerance: float = 1e-6
    method: str = None
    abort_reasons: list = field(default_factory=list)

    @property
    def n_runs(self):
        return self.states.shape[0]

    @property
    def T(self):
        return self.inputs.shape[1]

    @property
    def costs(self):
        return np.nansum(self.stage_costs, axis=1)

    @property
    def completed(self):
        return self.aborted_at < 0

    @property
    def violated(self):
        return np.maximum(self.state_violation, self.input_violation) > self.tolerance

    @property
    def n_aborted(self):
        return int(np.sum(~self.completed))

    @property
    def mean_cost(self):
        costs = self.costs[self.completed]
        return float(costs.mean()) if costs.size else float('nan')

    @property
    def std_cost(self):
        costs = self.costs[self.completed]
        return float(costs.std()) if costs.size else float('nan')

    @property
    def mean_solve_ms(self):
        return float(np.nanmean(self.solve_ms)) if np.isfinite(self.solve_ms).any() else float('nan')

    @property
    def max_violation(self):
        return float(max(self.state_violation.max(initial=0.0), self.input_violation.max(initial=0.0)))

    def to_frame(self):
        """Long table: one row per (run, t) with states, inputs, disturbances and the stage cost"""
        runs, steps = self.n_runs, self.T
        n, m = self.states.shape[2], self.inputs.shape[2]
        data = {'run': np.repeat(np.arange(runs), steps + 1), 't': np.tile(np.arange(steps + 1), runs)}
        padded_inputs = np.concatenate([self.inputs, np.full((runs, 1, m), np.nan)], axis=1)
        padded_w = np.concatenate([self.disturbances, np.full((runs, 1, n), np.nan)], axis=1)
        padded_cost = np.concatenate([self.stage_costs, np.full((runs, 1), np.nan)], axis=1)
        for k in range(n):
            data[f'x{k + 1}'] = self.states[:, :, k].reshape(-1)
        for k in range(m):
            data[f'u{k + 1}'] = padded_inputs[:, :, k].reshape(-1)
        for k in range(n):
            data[f'w{k + 1}'] = padded_w[:, :, k].reshape(-1)
        data['stage_cost'] = padded_cost.reshape(-1)
        return pd.DataFrame(data)

    def summary(self):
        return {
            'method': self.method,
            'n_runs': self.n_runs,
            'T': self.T,
            'seed': self.seed,
            'mean_cost': self.mean_cost,
            'std_cost': self.std_cost,
            'mean_solve_ms': self.mean_solve_ms,
            'n_aborted': self.n_aborted,
            'n_violated': int(self.violated.sum()),
            'max_violation': self.max_violation,
        }


def _closed_loop_run(task):
    """One receding-horizon run, ended early at the first step the controller cannot solve"""
    sys, controller, x0, disturbances, cost = task
    T = disturbances.shape[0]
    states = np.full((T + 1, sys.n), np.nan)
    inputs = np.full((T, sys.m), np.nan)
    stage = np.full(T, np.nan)
    solve_ms = np.full(T, np.nan)
    state_violation = input_violation = 0.0
    x = np.asarray(x0, dtype=float).reshape(-1)
    states[0] = x
    aborted = -1
    reason = ''
    for t in range(T):
        state_violation = max(state_violation, float(np.max(sys.X.H @ x - sys.X.h)))
        try:
            solution = controller.solve(x)
        except SltmpcError as exc:
            aborted = t
            reason = f"{type(exc).__name__}: {exc}"
            break
        u = np.atleast_1d(solution.u0)
        input_violation = max(input_violation, float(np.max(sys.U.H @ u - sys.U.h)))
        inputs[t] = u
        stage[t] = cost.stage(x, u)
        solve_ms[t] = solution.solve_ms
        x = sys.step(x, u, disturbances[t])
        states[t + 1] = x
    else:
        state_violation = max(state_violation, float(np.max(sys.X.H @ x - sys.X.h)))
    return {
        'states': states, 'inputs': inputs, 'stage': stage, 'solve_ms': solve_ms, 'aborted': aborted,
        'reason': reason,
        'state_violation': max(state_violation, 0.0), 'input_violation': max(input_violation, 0.0),
    }


def _collect(records, disturbances, seed, method, tol):
    return SimulationResult(
        states=np.array([r['states'] for r in records]),
        inputs=np.array([r['inputs'] for r in records]),
        disturbances=np.asarray(disturbances),
        stage_costs=np.array([r['stage'] for r in records]),
        solve_ms=np.array([r['solve_ms'] for r in records]),
        feasible=np.array([np.isfinite(r['stage']) for r in records]),
        aborted_at=np.array([r['aborted'] for r in records], dtype=int),
        state_violation=np.array([r['state_violation'] for r in records]),
        input_violation=np.array([r['input_violation'] for r in records]),
        seed=seed, tolerance=tol, method=method,
        abort_reasons=[r['reason'] for r in records])


def simulate_closed_loop(sys, controller, x0, T=30, n_runs=200, disturbance_mode='uniform', seed=0,
                         cost=None, workers=None, strict=False, tol=None):
    """
    Monte-Carlo closed loop: the controller is re-solved from the measured
    state at every step and its first input applied.

    With ``strict`` the first aborted run raises ControllerInfeasible;
    otherwise aborted runs are flagged in the result.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    tol = sltmpc_setting('CONTAINMENT_TOL') if tol is None else tol
    cost = controller.cost if cost is None else cost
    streams = [np.random.default_rng(child) for child in np.random.SeedSequence(seed).spawn(n_runs)]
    disturbances = np.array([disturbance_sequence(sys.W, T, disturbance_mode, rng) for rng in streams])
    if disturbances.size == 0:
        disturbances = np.zeros((n_runs, T, sys.n))

    tasks = [(sys, controller, x0, disturbances[run], cost) for run in range(n_runs)]
    records = _map(_closed_loop_run, tasks, workers)
    result = _collect(records, disturbances, seed, getattr(controller, 'method', None), tol)

    for run in np.flatnonzero(~result.completed):
        step = int(result.aborted_at[run])
        reason = result.abort_reasons[run]
        logger.warning("Run %d aborted at step %d: %s", run, step, reason)
        if strict:
            raise ControllerInfeasible(f"Controller failed at step {step} of run {run}: {reason}", step=step)
    logger.info("Simulated %d runs of %d steps (%s): mean cost %.2f, %d aborted",
                n_runs, T, result.method, result.mean_cost, result.n_aborted)
    return result


def nominal_rollout(controller, x0, T):
    """Disturbance-free closed loop of the controller"""
    sys = controller.sys
    record = _closed_loop_run((sys, controller, x0, np.zeros((T, sys.n)), controller.cost))
    return _collect([record], np.zeros((1, T, sys.n)), None, controller.method, sltmpc_setting('CONTAINMENT_TOL'))


@dataclass
class RoaResult:
    resolution: int
    axes: list
    inside: np.ndarray
    feasible: np.ndarray
    theta: float = None
    method: str = None
    design_error: str = None

    @property
    def coverage(self):
        """Percentage of grid points inside X for which the one-shot problem is feasible"""
        total = int(self.inside.sum())
        if total == 0 or self.design_error:
            return 0.0
        return 100.0 * float(np.sum(self.feasible & self.inside)) / total

    @property
    def flagged(self):
        return self.design_error is not None

    def points(self):
        mesh = np.meshgrid(*self.axes, indexing='ij')
        return np.stack([axis.reshape(-1) for axis in mesh], axis=1)

    def to_frame(self):
        """Grid points inside X with their feasibility"""
        points = self.points()[self.inside.reshape(-1)]
        data = {f'x{k + 1}': points[:, k] for k in range(points.shape[1])}
        data['feasible'] = self.feasible.reshape(-1)[self.inside.reshape(-1)]
        return pd.DataFrame(data)


def _is_feasible(task):
    controller, x = task
    return bool(controller.is_feasible(x))


def roa_grid(sys, controller, resolution=50, theta=None, theta_axes=(0,), workers=None, method=None):
    """
    Feasibility of the one-shot MPC problem on a regular grid over X.

    ``controller`` is an MpcController, or a callable building one from a
    system; a callable is required when ``theta`` rescales W. A failed
    design gives zero coverage and a flagged result.
    """
    if resolution < 10:
        raise ValueError("resolution must be at least 10 per axis")
    if theta is not None:
        sys = sys.with_theta(theta, theta_axes)
    lower = -support_many(sys.X, -np.eye(sys.n))
    upper = support_many(sys.X, np.eye(sys.n))
    axes = [np.linspace(lo, hi, resolution) for lo, hi in zip(lower, upper)]
    mesh = np.meshgrid(*axes, indexing='ij')
    points = np.stack([axis.reshape(-1) for axis in mesh], axis=1)
    grid_shape = (resolution,) * sys.n
    inside = np.all(points @ sys.X.H.T <= sys.X.h + sltmpc_setting('SET_TOL'), axis=1)
    feasible = np.zeros(points.shape[0], dtype=bool)

    method = method or getattr(controller, 'method', None)
    if not isinstance(controller, MpcController):
        try:
            controller = controller(sys)
        except SltmpcError as exc:
            logger.warning("No controller for theta=%s: %s", theta, exc)
            return RoaResult(resolution, axes, inside.reshape(grid_shape), feasible.reshape(grid_shape),
                             theta, method, design_error=f"{type(exc).__name__}: {exc}")
        method = controller.method

    candidates = np.flatnonzero(inside)
    verdicts = _map(_is_feasible, [(controller, points[i]) for i in candidates], workers)
    feasible[candidates] = verdicts
    result = RoaResult(resolution, axes, inside.reshape(grid_shape), feasible.reshape(grid_shape), theta, method)
    logger.info("RoA grid %s (theta=%s): coverage %.1f%%", method, theta, result.coverage)
    return result


@dataclass
class ComparisonReport:
    table: pd.DataFrame
    roa: dict = field(default_factory=dict)
    simulations: dict = field(default_factory=dict)

    def max_feasible_theta(self):
        """Largest theta with non-zero coverage, per method"""
        feasible = self.table[self.table['coverage_pct'] > 0]
        maxima = feasible.groupby('method')['theta'].max().to_dict()
        return {method: maxima.get(method, float('nan')) for method in self.table['method'].unique()}

    def coverage_table(self):
        return self.table.pivot(index='theta', columns='method', values='coverage_pct')


def compare_methods(config, methods=None, thetas=None, workers=None, simulate=True):
    """
    RoA coverage for every (method, theta) pair, plus a closed-loop
    simulation from the configured x0 at the configured theta. A failing
    method is recorded in the table and the others continue.
    """
    methods = list(methods or config.methods)
    thetas = list(config.roa.theta_sweep if thetas is None else thetas)
    if simulate and config.theta not in thetas:
        thetas.append(config.theta)
    rows, roa, simulations = [], {}, {}
    for method in methods:
        for theta in sorted(thetas):
            row = {'method': method, 'theta': float(theta), 'coverage_pct': 0.0, 'mean_cost': float('nan'),
                   'std_cost': float('nan'), 'mean_solve_ms': float('nan'), 'n_aborted': 0, 'error': ''}
            try:
                sys = config.build_system(theta)
                result = roa_grid(sys, lambda s, method=method: config.make_controller(s, method),
                                  config.roa.resolution, workers=workers, method=method)
                result.theta = float(theta)
                roa[(method, float(theta))] = result
                row['coverage_pct'] = result.coverage
                if result.flagged:
                    row['error'] = result.design_error
                elif simulate and theta == config.theta:
                    controller = config.make_controller(sys, method)
                    sim = simulate_closed_loop(sys, controller, config.x0, config.simulation.T,
                                               config.simulation.n_runs, config.simulation.disturbance_mode,
                                               config.simulation.seed, workers=workers)
                    simulations[method] = sim
                    row.update(mean_cost=sim.mean_cost, std_cost=sim.std_cost,
                               mean_solve_ms=sim.mean_solve_ms, n_aborted=sim.n_aborted)
            except SltmpcError as exc:
                logger.error("Method %s failed at theta=%s: %s", method, theta, exc, exc_info=True)
                row['error'] = f"{type(exc).__name__}: {exc}"
            rows.append(row)
    table = pd.DataFrame(rows, columns=['method', 'theta', 'coverage_pct', 'mean_cost', 'std_cost',
                                        'mean_solve_ms', 'n_aborted', 'error'])
    return ComparisonReport(table, roa, simulations)


def tube_cost_study(sys, N, kinds=COST_KINDS, rho_x=1.0, rho_u=1.0, backend=None, allow_fallback=False,
                    weights=None):
    """
    Terminal tube offsets F_{e,N}, F_{k,N} for each tube cost kind, and
    whether the input tube reaches the boundary of U.
    Returns (table, designs) with designs keyed by kind.
    """
    rows, designs = [], {}
    for kind in kinds:
        row = {'kind': kind, 'objective': float('nan'), 'solve_ms': float('nan'), 'fallback': False,
               'min_input_slack': float('nan'), 'touches_input_boundary': False, 'error': ''}
        try:
            design = synthesize_tubes(sys, N, kind, rho_x, rho_u, backend, weights=weights,
                                      allow_fallback=allow_fallback)
        except SltmpcError as exc:
            logger.warning("Tube synthesis with %s cost failed: %s", kind, exc)
            row['error'] = f"{type(exc).__name__}: {exc}"
            rows.append(row)
            continue
        designs[kind] = design
        slack = sys.U.h - design.tubes.input_at(N)
        row.update(objective=design.objective, solve_ms=design.solve_ms, fallback=design.fallback,
                   min_input_slack=float(slack.min()),
                   touches_input_boundary=bool(slack.min() <= BOUNDARY_SLACK))
        row.update({f'state_offset_{r + 1}': value for r, value in enumerate(design.tubes.state_at(N))})
        row.update({f'input_offset_{r + 1}': value for r, value in enumerate(design.tubes.input_at(N))})
        rows.append(row)
    return pd.DataFrame(rows), designs
