"""
Experiment configuration: JSON text validated by ``serializers.ExperimentSerializer``.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, ParseError, SchemaError
from .mpc import make_controller, quadratic_cost
from .polytope import Polytope
from .serializers import ExperimentSerializer, flatten_errors
from .slp import LtiSystem

logger = logging.getLogger(__name__)

DEFAULT_CONFIG = Path(__file__).resolve().parent / 'configs' / 'default.json'


@dataclass(frozen=True)
class SimulationSettings:
    T: int = 30
    n_runs: int = 200
    seed: int = 0
    disturbance_mode: str = 'uniform'


@dataclass(frozen=True)
class RoaSettings:
    resolution: int = 50
    theta_sweep: tuple = (0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09, 0.10)


@dataclass(frozen=True)
class VerifySettings:
    n_steps: int = 50
    n_samples: int = 500
    n_walks: int = 1000


def _polytope(block):
    if 'box' in block:
        bounds = np.asarray(block['box'], dtype=float)
        return Polytope.from_bounds(bounds[:, 0], bounds[:, 1])
    return Polytope(np.asarray(block['H'], dtype=float), np.asarray(block['h'], dtype=float))


def _polytope_dict(P):
    bounds = P.axis_bounds
    if bounds is not None and np.all(np.isfinite(bounds[0])) and np.all(np.isfinite(bounds[1])):
        return {'box': [[float(lo), float(hi)] for lo, hi in zip(*bounds)]}
    return {'H': P.H.tolist(), 'h': P.h.tolist()}


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    A: np.ndarray
    B: np.ndarray
    X: Polytope
    U: Polytope
    W: Polytope
    theta_axes: tuple = (0,)
    N: int = 10
    theta: float = 0.04
    x0: np.ndarray = None
    method: str = 'fir-sltmpc'
    methods: tuple = ('fir-sltmpc', 'fir-sltmpc-offline', 'rpi-tube', 'ct-mpc')
    terminal_kind: str = 'scaled-pi'
    N_mpc: int = None
    tube_cost: str = 'min-tightening'
    rho_x: float = 1.0
    rho_u: float = 1.0
    Q: np.ndarray = None
    R: np.ndarray = None
    simulation: SimulationSettings = field(default_factory=SimulationSettings)
    roa: RoaSettings = field(default_factory=RoaSettings)
    verify: VerifySettings = field(default_factory=VerifySettings)

    def __eq__(self, other):
        if not isinstance(other, ExperimentConfig):
            return NotImplemented
        return self.as_dict() == other.as_dict()

    def as_dict(self):
        W = _polytope_dict(self.W)
        W['theta_axes'] = list(self.theta_axes)
        data = {
            'system': {
                'A': self.A.tolist(), 'B': self.B.tolist(),
                'X': _polytope_dict(self.X), 'U': _polytope_dict(self.U), 'W': W,
            },
            'N': self.N,
            'theta': self.theta,
            'x0': self.x0.tolist(),
            'method': self.method,
            'methods': list(self.methods),
            'terminal_kind': self.terminal_kind,
            'N_mpc': self.N_mpc,
            'tube_cost': self.tube_cost,
            'rho_x': self.rho_x,
            'rho_u': self.rho_u,
            'Q': self.Q.tolist(),
            'R': self.R.tolist(),
            'simulation': asdict(self.simulation),
            'roa': {**asdict(self.roa), 'theta_sweep': list(self.roa.theta_sweep)},
            'verify': asdict(self.verify),
        }
        return data

    def with_overrides(self, seed=None, theta=None, method=None, resolution=None):
        """Copy with command-line overrides applied"""
        config = self
        if seed is not None:
            config = replace(config, simulation=replace(config.simulation, seed=seed))
        if theta is not None:
            config = replace(config, theta=theta)
        if method is not None:
            config = replace(config, method=method)
        if resolution is not None:
            config = replace(config, roa=replace(config.roa, resolution=resolution))
        return config

    def build_system(self, theta=None):
        """The plant with W scaled by theta (the configured theta when omitted)"""
        sys = LtiSystem(self.A, self.B, self.X, self.U, self.W)
        if not self.theta_axes:
            return sys
        return sys.with_theta(self.theta if theta is None else theta, self.theta_axes)

    def cost(self, sys):
        return quadratic_cost(sys, self.Q, self.R)

    @property
    def weights(self):
        return self.Q, self.R

    def make_controller(self, sys=None, method=None, backend=None, tubes=None):
        sys = self.build_system() if sys is None else sys
        return make_controller(method or self.method, sys, self.cost(sys), self.N, backend=backend,
                               terminal_kind=self.terminal_kind, N_mpc=self.N_mpc, tube_cost=self.tube_cost,
                               rho_x=self.rho_x, rho_u=self.rho_u, tubes=tubes, weights=self.weights)


def config_from_dict(data):
    serializer = ExperimentSerializer(data=data)
    if not serializer.is_valid():
        path, message = flatten_errors(serializer.errors)[0]
        raise SchemaError(path, message)
    attrs = serializer.validated_data
    system = attrs['system']
    A = np.asarray(system['A'], dtype=float)
    B = np.asarray(system['B'], dtype=float)
    n, m = B.shape
    return ExperimentConfig(
        A=A, B=B,
        X=_polytope(system['X']), U=_polytope(system['U']), W=_polytope(system['W']),
        theta_axes=tuple(system['W']['theta_axes']),
        N=attrs['N'],
        theta=attrs['theta'],
        x0=np.asarray(attrs.get('x0', np.zeros(n)), dtype=float),
        method=attrs['method'],
        methods=tuple(attrs['methods']),
        terminal_kind=attrs['terminal_kind'],
        N_mpc=attrs['N_mpc'],
        tube_cost=attrs['tube_cost'],
        rho_x=attrs['rho_x'],
        rho_u=attrs['rho_u'],
        Q=np.asarray(attrs['Q'], dtype=float) if 'Q' in attrs else np.eye(n),
        R=np.asarray(attrs['R'], dtype=float) if 'R' in attrs else np.eye(m),
        simulation=SimulationSettings(**attrs['simulation']),
        roa=RoaSettings(attrs['roa']['resolution'], tuple(attrs['roa']['theta_sweep'])),
        verify=VerifySettings(**attrs['verify']),
    )


def parse_config(text):
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno, column=exc.colno) from exc
    if not isinstance(data, dict):
        raise SchemaError('<root>', 'The configuration must be a JSON object.')
    return config_from_dict(data)


def load_config(path=None):
    """Read and validate an experiment config; the shipped default when no path is given"""
    path = Path(path) if path is not None else DEFAULT_CONFIG
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as exc:
        raise ConfigError(f"Cannot read config {path}: {exc}") from exc
    config = parse_config(text)
    logger.info("Loaded config %s (N=%d, theta=%g, method=%s)", path, config.N, config.theta, config.method)
    return config


def serialize(config):
    return json.dumps(config.as_dict(), indent=2)
