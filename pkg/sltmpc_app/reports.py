"""
Result files written by the ``sltmpc`` command.

Every JSON file carries a top-level ``schema_version``; every CSV file
carries it as a constant leading column.
"""

import json
import logging
import math
from pathlib import Path

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from .app_settings import sltmpc_setting
from .polytope import vertices_2d
from .sldrs import tube_polytopes_2d

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ['method', 'theta', 'coverage_pct', 'mean_cost', 'std_cost', 'mean_solve_ms']
METHOD_COLORS = {
    'fir-sltmpc': '#1f77b4',
    'fir-sltmpc-offline': '#2ca02c',
    'rpi-tube': '#ff7f0e',
    'ct-mpc': '#d62728',
    'sltmpc-rpi': '#9467bd',
    'nominal': '#7f7f7f',
}


def plain(value):
    """JSON-safe copy: numpy scalars and arrays become Python values, NaN becomes null"""
    if isinstance(value, dict):
        return {str(key): plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [plain(item) for item in value]
    if isinstance(value, np.ndarray):
        return plain(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def write_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = {'schema_version': sltmpc_setting('SCHEMA_VERSION'), **plain(payload)}
    path.write_text(json.dumps(document, indent=2, allow_nan=False) + '\n', encoding='utf-8')
    logger.debug("Wrote %s", path)
    return path


def write_csv(path, frame):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = frame.copy()
    frame.insert(0, 'schema_version', sltmpc_setting('SCHEMA_VERSION'))
    frame.to_csv(path, index=False, lineterminator='\n')
    logger.debug("Wrote %s (%d rows)", path, len(frame))
    return path


def write_trajectories(out_dir, simulation):
    return write_csv(Path(out_dir) / 'trajectories.csv', simulation.to_frame())


def write_roa(out_dir, roa):
    return write_csv(Path(out_dir) / 'roa.csv', roa.to_frame())


def write_roa_sweep(out_dir, table):
    return write_csv(Path(out_dir) / 'roa_sweep.csv', table[['method', 'theta', 'coverage_pct', 'error']])


def write_tube_costs(out_dir, table):
    return write_csv(Path(out_dir) / 'tube_costs.csv', table)


def write_tubes(out_dir, tubes, responses=None, extra=None):
    payload = tubes.as_dict()
    if responses is not None:
        payload['responses'] = responses.as_dict()
    payload.update(extra or {})
    return write_json(Path(out_dir) / 'tubes.json', payload)


def report_rows(table):
    """Rows of report.json from a comparison table or a list of row dicts"""
    frame = pd.DataFrame(table)
    rows = []
    for record in frame.to_dict(orient='records'):
        row = {column: record.get(column) for column in REPORT_COLUMNS}
        if record.get('error'):
            row['error'] = record['error']
        rows.append(row)
    return rows


def write_report(out_dir, table, extra=None):
    return write_json(Path(out_dir) / 'report.json', {'rows': report_rows(table), **(extra or {})})


def write_containment(out_dir, report, extra=None):
    return write_json(Path(out_dir) / 'containment.json', {**report.as_dict(), **(extra or {})})


def write_solution(out_dir, solution):
    return write_json(Path(out_dir) / 'solution.json', solution.as_dict())


# Figures

def _fill(ax, polytope, **kwargs):
    loop = vertices_2d(polytope)
    if len(loop.vertices):
        ax.fill(loop.vertices[:, 0], loop.vertices[:, 1], **kwargs)


def plot_roa(out_dir, results, sys, path='roa.png'):
    """Feasible grid points of each method over the state constraint set"""
    fig, ax = plt.subplots(figsize=(7, 6), dpi=100)
    _fill(ax, sys.X, facecolor='none', edgecolor='black', linewidth=1.5, label='X')
    for offset, (method, roa) in enumerate(results.items()):
        frame = roa.to_frame()
        feasible = frame[frame['feasible']]
        ax.scatter(feasible['x1'], feasible['x2'], s=6 + 6 * offset, marker='s', alpha=0.35,
                   color=METHOD_COLORS.get(method, None), label=f"{method} ({roa.coverage:.1f}%)")
    ax.set_xlabel('x1', fontsize=12, fontweight='bold')
    ax.set_ylabel('x2', fontsize=12, fontweight='bold')
    ax.set_title('Region of attraction', fontsize=14, fontweight='bold')
    ax.legend(loc='upper right')
    ax.grid(True, alpha=0.3)
    return _save(fig, Path(out_dir) / path)


def plot_coverage(out_dir, table, path='coverage.png'):
    fig, ax = plt.subplots(figsize=(8, 5), dpi=100)
    for method, rows in table.groupby('method', sort=False):
        ax.plot(rows['theta'], rows['coverage_pct'], marker='o', color=METHOD_COLORS.get(method), label=method)
    ax.set_xlabel('theta', fontsize=12, fontweight='bold')
    ax.set_ylabel('RoA coverage (%)', fontsize=12, fontweight='bold')
    ax.set_ylim(0, 100)
    ax.legend()
    ax.grid(True, alpha=0.3)
    return _save(fig, Path(out_dir) / path)


def plot_tubes(out_dir, tubes, responses, sys, path='tubes.png'):
    """Nested state tubes F_{e,i} inside X"""
    fig, ax = plt.subplots(figsize=(7, 6), dpi=100)
    _fill(ax, sys.X, facecolor='none', edgecolor='black', linewidth=1.5)
    colors = plt.cm.viridis(np.linspace(0.1, 0.9, tubes.N))
    for i in range(tubes.N, 0, -1):
        state_set, _ = tube_polytopes_2d(tubes, responses, sys, i)
        _fill(ax, state_set, facecolor=colors[i - 1], edgecolor='white', alpha=0.8)
    ax.set_xlabel('e1', fontsize=12, fontweight='bold')
    ax.set_ylabel('e2', fontsize=12, fontweight='bold')
    ax.set_title('State tubes', fontsize=14, fontweight='bold')
    ax.set_aspect('equal', adjustable='datalim')
    return _save(fig, Path(out_dir) / path)


def plot_trajectories(out_dir, simulation, sys, path='trajectories.png', max_runs=50):
    fig, ax = plt.subplots(figsize=(7, 6), dpi=100)
    _fill(ax, sys.X, facecolor='none', edgecolor='black', linewidth=1.5)
    for run in range(min(simulation.n_runs, max_runs)):
        states = simulation.states[run]
        ax.plot(states[:, 0], states[:, 1], color='#1f77b4', alpha=0.3, linewidth=0.8)
    ax.set_xlabel('x1', fontsize=12, fontweight='bold')
    ax.set_ylabel('x2', fontsize=12, fontweight='bold')
    ax.set_title(f"Closed-loop trajectories (mean cost {simulation.mean_cost:.1f})", fontsize=14, fontweight='bold')
    ax.grid(True, alpha=0.3)
    return _save(fig, Path(out_dir) / path)


def _save(fig, path):
    path.parent.mkdir(parents=True, exist_ok=True)
    plt.tight_layout()
    fig.savefig(path, dpi=150, bbox_inches='tight')
    plt.close(fig)
    logger.debug("Saved figure %s", path)
    return path
