"""
H-representation polytopes and the set computations built on them.

Every set operation the controllers need (Pontryagin differences and Minkowski
sums of linear images) is carried out as support-function offsets against a
fixed set of constraint normals. Vertices are only enumerated in 2-D, for
figure export and disturbance vertex walks.
"""

import itertools
import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.optimize import linprog

from .app_settings import sltmpc_setting
from .exceptions import (DimensionMismatch, EmptyResult, Infeasible, NotConverged,
                         NotTwoDimensional, Unbounded, Unstable)

logger = logging.getLogger(__name__)


def _as_matrix(value, name):
    matrix = np.atleast_2d(np.asarray(value, dtype=float))
    if matrix.ndim != 2:
        raise DimensionMismatch(f"{name} must be a matrix, got shape {matrix.shape}")
    return matrix


@dataclass(frozen=True, eq=False)
class Polytope:
    """The set {x : H x <= h}"""
    H: np.ndarray
    h: np.ndarray
    origin_interior: bool = False

    def __post_init__(self):
        H = _as_matrix(self.H, 'H')
        h = np.asarray(self.h, dtype=float).reshape(-1)
        if h.shape[0] != H.shape[0]:
            raise DimensionMismatch(f"H has {H.shape[0]} rows but h has {h.shape[0]} entries")
        if not (np.all(np.isfinite(H)) and np.all(np.isfinite(h))):
            raise ValueError("Polytope data must be finite")
        if self.origin_interior and not np.all(h > 0):
            raise ValueError("Origin must lie strictly inside the polytope (h > 0)")
        H.setflags(write=False)
        h.setflags(write=False)
        object.__setattr__(self, 'H', H)
        object.__setattr__(self, 'h', h)

    @classmethod
    def from_bounds(cls, lower, upper, origin_interior=False):
        lower = np.asarray(lower, dtype=float).reshape(-1)
        upper = np.asarray(upper, dtype=float).reshape(-1)
        if lower.shape != upper.shape:
            raise DimensionMismatch("Lower and upper bounds differ in length")
        eye = np.eye(lower.shape[0])
        return cls(np.vstack([eye, -eye]), np.concatenate([upper, -lower]), origin_interior)

    @classmethod
    def box(cls, *half_widths, origin_interior=False):
        """Symmetric box [-h_1, h_1] x ... x [-h_n, h_n]"""
        half_widths = np.asarray(half_widths, dtype=float).reshape(-1)
        return cls.from_bounds(-half_widths, half_widths, origin_interior)

    @property
    def dim(self):
        return self.H.shape[1]

    @property
    def n_rows(self):
        return self.H.shape[0]

    @cached_property
    def axis_bounds(self):
        """(lower, upper) when every row is an axis-aligned bound, else None"""
        lower = np.full(self.dim, -np.inf)
        upper = np.full(self.dim, np.inf)
        for row, offset in zip(self.H, self.h):
            nonzero = np.flatnonzero(row)
            if nonzero.size != 1:
                return None
            axis = nonzero[0]
            bound = offset / row[axis]
            if row[axis] > 0:
                upper[axis] = min(upper[axis], bound)
            else:
                lower[axis] = max(lower[axis], bound)
        if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
            return None
        return lower, upper

    @property
    def is_box(self):
        return self.axis_bounds is not None

    def contains(self, x, tol=0.0):
        return contains(self, x, tol)

    def support(self, direction):
        return support(self, direction)

    def intersect(self, other):
        if other.dim != self.dim:
            raise DimensionMismatch(f"Cannot intersect sets of dimension {self.dim} and {other.dim}")
        return Polytope(np.vstack([self.H, other.H]), np.concatenate([self.h, other.h]))

    def scale(self, factor):
        """factor * P for factor >= 0"""
        if factor < 0:
            raise ValueError("Scaling factor must be nonnegative")
        return Polytope(self.H, factor * self.h)

    def pontryagin(self, offsets):
        """P minus the set whose support along the rows of H is given by offsets"""
        offsets = np.asarray(offsets, dtype=float).reshape(-1)
        if offsets.shape[0] != self.n_rows:
            raise DimensionMismatch(f"Expected {self.n_rows} offsets, got {offsets.shape[0]}")
        return Polytope(self.H, self.h - offsets)

    def is_empty(self):
        result = linprog(np.zeros(self.dim), A_ub=self.H, b_ub=self.h,
                         bounds=[(None, None)] * self.dim, method='highs')
        return result.status == 2

    def prune(self, tol=None):
        """Drop rows that do not change the set"""
        tol = sltmpc_setting('SET_TOL') if tol is None else tol
        norms = np.linalg.norm(self.H, axis=1)
        keep = ~((norms <= 1e-12) & (self.h >= -tol))
        for i in range(self.n_rows):
            if not keep[i]:
                continue
            keep[i] = False
            others = Polytope(self.H[keep], self.h[keep]) if keep.any() else None
            try:
                redundant = others is not None and support(others, self.H[i]) <= self.h[i] + tol
            except Unbounded:
                redundant = False
            keep[i] = not redundant
        return Polytope(self.H[keep], self.h[keep], self.origin_interior)

    def __repr__(self):
        return f"Polytope(dim={self.dim}, rows={self.n_rows})"


TighteningVector = np.ndarray


def support(P, direction):
    """max_{x in P} a^T x"""
    a = np.asarray(direction, dtype=float).reshape(-1)
    if a.shape[0] != P.dim:
        raise DimensionMismatch(f"Direction has length {a.shape[0]}, polytope has dimension {P.dim}")
    if not np.any(a):
        return 0.0
    bounds = P.axis_bounds
    if bounds is not None:
        lower, upper = bounds
        if np.any(lower > upper + sltmpc_setting('LP_TOL')):
            raise Infeasible("Support of an empty polytope")
        return float(np.sum(np.maximum(a * upper, a * lower)))
    result = linprog(-a, A_ub=P.H, b_ub=P.h, bounds=[(None, None)] * P.dim, method='highs')
    if result.status == 2:
        raise Infeasible("Support of an empty polytope")
    if result.status == 3:
        raise Unbounded(f"Polytope is unbounded along {a}")
    if result.status != 0:
        raise NotConverged(f"Support LP failed: {result.message}")
    return float(-result.fun)


def support_dual(P, direction):
    """Support value and a multiplier lam >= 0 with H^T lam = a and lam^T h = support"""
    a = np.asarray(direction, dtype=float).reshape(-1)
    if a.shape[0] != P.dim:
        raise DimensionMismatch(f"Direction has length {a.shape[0]}, polytope has dimension {P.dim}")
    if not np.any(a):
        return 0.0, np.zeros(P.n_rows)
    if P.is_box:
        multipliers = np.zeros(P.n_rows)
        for axis, component in enumerate(a):
            if component == 0:
                continue
            coefficients = P.H[:, axis]
            rows = np.flatnonzero(coefficients * component > 0)
            ratios = P.h[rows] / np.abs(coefficients[rows])
            best = rows[np.argmin(ratios)]
            multipliers[best] = component / coefficients[best]
        return float(multipliers @ P.h), multipliers
    result = linprog(-a, A_ub=P.H, b_ub=P.h, bounds=[(None, None)] * P.dim, method='highs')
    if result.status == 2:
        raise Infeasible("Support of an empty polytope")
    if result.status == 3:
        raise Unbounded(f"Polytope is unbounded along {a}")
    if result.status != 0:
        raise NotConverged(f"Support LP failed: {result.message}")
    return float(-result.fun), np.maximum(-result.ineqlin.marginals, 0.0)


def support_many(P, directions):
    directions = _as_matrix(directions, 'directions')
    return np.array([support(P, row) for row in directions])


def tightening(Hc, maps, W):
    """Row-wise support of the Minkowski sum of M_j W along the constraint normals Hc"""
    Hc = _as_matrix(Hc, 'Hc')
    offsets = np.zeros(Hc.shape[0])
    for j, M in enumerate(maps):
        M = _as_matrix(M, f'maps[{j}]')
        if M.shape[0] != Hc.shape[1] or M.shape[1] != W.dim:
            raise DimensionMismatch(
                f"maps[{j}] has shape {M.shape}, expected ({Hc.shape[1]}, {W.dim})")
        offsets += support_many(W, Hc @ M)
    return offsets


def contains(P, x, tol=0.0):
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != P.dim:
        raise DimensionMismatch(f"Point has length {x.shape[0]}, polytope has dimension {P.dim}")
    return bool(np.all(P.H @ x <= P.h + tol))


def _invariant_iteration(A_cl, Xc, W, max_iter, tol):
    A_cl = _as_matrix(A_cl, 'A_cl')
    if A_cl.shape != (Xc.dim, Xc.dim):
        raise DimensionMismatch(f"A_cl has shape {A_cl.shape}, Xc has dimension {Xc.dim}")
    if Xc.is_empty():
        raise EmptyResult("Constraint set is empty")

    H0, h0 = Xc.H, Xc.h
    current = Xc.prune(tol)
    power = np.eye(Xc.dim)
    accumulated = np.zeros(Xc.n_rows)
    for k in range(1, max_iter + 1):
        if W is not None:
            accumulated += support_many(W, H0 @ power)
        power = power @ A_cl
        new_H = H0 @ power
        new_h = h0 - accumulated
        values = support_many(current, new_H)
        binding = values > new_h + tol
        logger.debug("Invariant-set iteration %d: %d binding rows", k, int(binding.sum()))
        if not binding.any():
            logger.info("Invariant set converged after %d iterations with %d rows", k, current.n_rows)
            return current
        candidate = Polytope(np.vstack([current.H, new_H[binding]]),
                             np.concatenate([current.h, new_h[binding]]))
        if candidate.is_empty():
            raise EmptyResult(f"Invariant-set iteration collapsed at step {k}")
        current = candidate.prune(tol)
    raise NotConverged(f"Invariant-set iteration did not converge in {max_iter} steps")


def maximal_pi_set(A_cl, Xc, max_iter=None, tol=None):
    """Largest S in Xc with A_cl S contained in S"""
    max_iter = sltmpc_setting('MAX_ITER') if max_iter is None else max_iter
    tol = sltmpc_setting('SET_TOL') if tol is None else tol
    return _invariant_iteration(A_cl, Xc, None, max_iter, tol)


def maximal_rpi_set(A_cl, Xc, W, max_iter=None, tol=None):
    """Largest S in Xc with A_cl S + W contained in S"""
    max_iter = sltmpc_setting('MAX_ITER') if max_iter is None else max_iter
    tol = sltmpc_setting('SET_TOL') if tol is None else tol
    if W.dim != Xc.dim:
        raise DimensionMismatch(f"W has dimension {W.dim}, Xc has dimension {Xc.dim}")
    return _invariant_iteration(A_cl, Xc, W, max_iter, tol)


def is_degenerate_origin(W, tol=1e-12):
    """True when W = {0}"""
    return all(abs(support(W, d)) <= tol for d in np.vstack([np.eye(W.dim), -np.eye(W.dim)]))


def _unit_rows(rows):
    rows = np.atleast_2d(rows)
    norms = np.linalg.norm(rows, axis=1)
    rows = rows[norms > 1e-12] / norms[norms > 1e-12, None]
    unique = []
    for row in rows:
        if not any(np.allclose(row, other, atol=1e-9) for other in unique):
            unique.append(row)
    return np.array(unique)


def _image_normals(W, M):
    """Edge normals of the planar polygon M W"""
    rank = np.linalg.matrix_rank(M, tol=1e-10)
    if rank == 2:
        return W.H @ np.linalg.inv(M)
    if rank == 1:
        left, _, _ = np.linalg.svd(M)
        direction = left[:, 0]
        perpendicular = np.array([-direction[1], direction[0]])
        return np.vstack([perpendicular, -perpendicular])
    return np.empty((0, 2))


def mrpi_approx(A_cl, W, eps=None, max_s=None):
    """
    Invariant outer approximation (1 - alpha)^-1 (W + A W + ... + A^(s-1) W)
    of the minimal RPI set, with s the first power where A^s W lies in alpha W
    and alpha is small enough for an eps-accurate bound.

    In the plane the facets of every summand are enumerated, so the returned
    H-representation is exact and RPI. In higher dimensions only a finite
    set of candidate normals is used: the result is an outer bound of the
    set above and is not guaranteed to be RPI.
    """
    eps = sltmpc_setting('MRPI_EPS') if eps is None else eps
    max_s = sltmpc_setting('MAX_ITER') if max_s is None else max_s
    A_cl = _as_matrix(A_cl, 'A_cl')
    if A_cl.shape != (W.dim, W.dim):
        raise DimensionMismatch(f"A_cl has shape {A_cl.shape}, W has dimension {W.dim}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if is_degenerate_origin(W):
        return W, 1, 0.0
    spectral_radius = max(abs(np.linalg.eigvals(A_cl)))
    if spectral_radius >= 1:
        raise Unstable(f"Closed loop has spectral radius {spectral_radius:.4f}")

    n = W.dim
    unit = np.eye(n)
    plus_sums = np.zeros(n)
    minus_sums = np.zeros(n)
    powers = [np.eye(n)]
    for s in range(1, max_s + 1):
        previous = powers[-1]
        plus_sums += support_many(W, unit @ previous)
        minus_sums += support_many(W, -unit @ previous)
        bound = max(plus_sums.max(), minus_sums.max())
        current = previous @ A_cl
        ratios = []
        for row, offset in zip(W.H, W.h):
            value = support(W, current.T @ row)
            if offset > 1e-12:
                ratios.append(value / offset)
            elif value > 1e-12:
                ratios.append(np.inf)
        alpha = max(ratios) if ratios else 0.0
        if alpha <= eps / (eps + bound):
            break
        powers.append(current)
    else:
        raise NotConverged(f"mRPI approximation did not converge for s <= {max_s}")

    alpha = max(alpha, 0.0)
    if n == 2:
        normals = _unit_rows(np.vstack([_image_normals(W, M) for M in powers]))
    else:
        logger.warning("mRPI H-representation in dimension %d is an outer bound", n)
        candidates = [W.H] + [W.H @ np.linalg.pinv(M) for M in powers[1:]
                              if np.linalg.matrix_rank(M) == n]
        normals = _unit_rows(np.vstack(candidates))
    offsets = tightening(normals, powers, W) / (1.0 - alpha)
    logger.info("mRPI approximation: s=%d, alpha=%.3e, %d rows", len(powers), alpha, normals.shape[0])
    return Polytope(normals, offsets), len(powers), float(alpha)


@dataclass(frozen=True, eq=False)
class TubeSequence:
    """Per-step tightening offsets F_0..F_N against the X and U constraint normals"""
    N: int
    state_offsets: np.ndarray
    input_offsets: np.ndarray
    source: str = 'drs-baseline'
    responses: object = field(default=None, repr=False)

    SOURCES = ('online-dual', 'offline-synthesis', 'drs-baseline', 'rpi-constant')

    def __post_init__(self):
        state = np.atleast_2d(np.asarray(self.state_offsets, dtype=float))
        inputs = np.atleast_2d(np.asarray(self.input_offsets, dtype=float))
        if state.shape[0] != self.N + 1 or inputs.shape[0] != self.N + 1:
            raise DimensionMismatch(f"Expected {self.N + 1} offset rows per tube")
        if self.source not in self.SOURCES:
            raise ValueError(f"Unknown tube source {self.source!r}")
        object.__setattr__(self, 'state_offsets', state)
        object.__setattr__(self, 'input_offsets', inputs)

    def state_at(self, i):
        return self.state_offsets[min(i, self.N)]

    def input_at(self, i):
        return self.input_offsets[min(i, self.N)]

    def is_monotone(self, tol=1e-9):
        return bool(np.all(np.diff(self.state_offsets, axis=0) >= -tol)
                    and np.all(np.diff(self.input_offsets, axis=0) >= -tol))

    def tightened_sets(self, X, U, i):
        return X.pontryagin(self.state_at(i)), U.pontryagin(self.input_at(i))

    def as_dict(self):
        return {
            'N': self.N,
            'source': self.source,
            'state_offsets': self.state_offsets.tolist(),
            'input_offsets': self.input_offsets.tolist(),
        }


def drs_tightenings(A_cl, W, X, U, K, N):
    """Disturbance reachable set offsets F_i = W + A_cl W + ... + A_cl^(i-1) W"""
    if N < 1:
        raise ValueError("Horizon N must be at least 1")
    A_cl = _as_matrix(A_cl, 'A_cl')
    K = _as_matrix(K, 'K')
    if A_cl.shape != (X.dim, X.dim) or K.shape != (U.dim, X.dim) or W.dim != X.dim:
        raise DimensionMismatch("A_cl, K, W, X and U dimensions disagree")
    state = np.zeros((N + 1, X.n_rows))
    inputs = np.zeros((N + 1, U.n_rows))
    power = np.eye(X.dim)
    for i in range(1, N + 1):
        state[i] = state[i - 1] + tightening(X.H, [power], W)
        inputs[i] = inputs[i - 1] + tightening(U.H, [K @ power], W)
        power = power @ A_cl
    return TubeSequence(N, state, inputs, source='drs-baseline')


@dataclass(frozen=True)
class VertexLoop:
    vertices: np.ndarray
    redundant_rows: tuple = ()


def vertices_2d(P, tol=1e-8):
    """Counter-clockwise vertex loop of a bounded planar polytope"""
    if P.dim != 2:
        raise NotTwoDimensional(f"Vertex enumeration needs a planar polytope, got dimension {P.dim}")
    try:
        for direction in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            support(P, direction)
    except Infeasible as exc:
        raise EmptyResult("Polytope is empty") from exc

    points = []
    for i, j in itertools.combinations(range(P.n_rows), 2):
        pair = P.H[[i, j]]
        if abs(np.linalg.det(pair)) < 1e-12:
            continue
        point = np.linalg.solve(pair, P.h[[i, j]])
        if contains(P, point, tol):
            if not any(np.allclose(point, other, atol=1e-9) for other in points):
                points.append(point)
    if not points:
        raise EmptyResult("Polytope has no vertices")

    vertices = np.array(points)
    centre = vertices.mean(axis=0)
    angles = np.arctan2(vertices[:, 1] - centre[1], vertices[:, 0] - centre[0])
    vertices = vertices[np.argsort(angles)]
    slack = np.abs(P.H @ vertices.T - P.h[:, None])
    redundant = tuple(int(r) for r in np.flatnonzero(~np.any(slack <= 1e-7, axis=1)))
    return VertexLoop(vertices, redundant)


def extreme_points(P):
    """Vertices of a box in any dimension, or of a planar polytope"""
    bounds = P.axis_bounds
    if bounds is not None:
        lower, upper = bounds
        corners = np.array(list(itertools.product(*zip(lower, upper))))
        return np.unique(corners, axis=0)
    return vertices_2d(P).vertices


def sample_uniform(P, n_samples, rng, batch=4096, max_batches=1000):
    """Uniform samples from P by rejection from its bounding box"""
    lower = -support_many(P, -np.eye(P.dim))
    upper = support_many(P, np.eye(P.dim))
    if P.is_box:
        return rng.uniform(lower, upper, size=(n_samples, P.dim))
    accepted = []
    count = 0
    for _ in range(max_batches):
        candidates = rng.uniform(lower, upper, size=(batch, P.dim))
        inside = np.all(candidates @ P.H.T <= P.h + 1e-12, axis=1)
        accepted.append(candidates[inside])
        count += int(inside.sum())
        if count >= n_samples:
            return np.vstack(accepted)[:n_samples]
    raise NotConverged("Rejection sampling accepted too few points")


def direction_fan(n_directions):
    angles = np.linspace(0.0, 2.0 * np.pi, n_directions, endpoint=False)
    return np.column_stack([np.cos(angles), np.sin(angles)])


def outer_polytope_2d(support_fn, extra_normals=None, n_fan=None):
    """Planar polytope {x : a^T x <= support_fn(a)} over a fan of directions plus extra normals"""
    n_fan = sltmpc_setting('FAN_DIRECTIONS') if n_fan is None else n_fan
    normals = direction_fan(n_fan)
    if extra_normals is not None and len(extra_normals):
        normals = _unit_rows(np.vstack([normals, np.atleast_2d(extra_normals)]))
    offsets = np.array([support_fn(a) for a in normals])
    return Polytope(normals, offsets)
