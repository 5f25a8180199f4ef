from django.conf import settings

DEFAULTS = {
    'LP_TOL': 1e-9,
    'SET_TOL': 1e-8,
    'MAX_ITER': 500,
    'MRPI_EPS': 1e-3,
    'RESIDUAL_TOL': 1e-7,
    'CONTAINMENT_TOL': 1e-6,
    'QP_SOLVER': 'CLARABEL',
    'SOLVER_OPTIONS': {
        'CLARABEL': {'tol_feas': 1e-9, 'tol_gap_abs': 1e-9, 'tol_gap_rel': 1e-9},
        'SCS': {'eps_abs': 1e-6, 'eps_rel': 1e-6, 'max_iters': 100000},
    },
    'SDP_SOLVERS': ('MOSEK', 'SCS'),
    'FAN_DIRECTIONS': 64,
    'WORKERS': 1,
    'RECORD_RUNS': True,
    'SCHEMA_VERSION': 1,
}


def sltmpc_setting(name):
    """Look up a numerical default, falling back when Django is not configured"""
    if settings.configured:
        return getattr(settings, 'SLTMPC', {}).get(name, DEFAULTS[name])
    return DEFAULTS[name]
