"""Legendre-Gauss-Lobatto machinery: nodes, weights, differentiation, interpolation."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

MAX_ORDER = 256
NEWTON_TOL = 1e-14
NEWTON_MAXITER = 100


class ConvergenceError(RuntimeError):
    """Raised when the LGL node iteration fails to converge."""


def legendre_eval(order: int, t):
    """Evaluate the Legendre polynomial ``L_order`` and its derivative at ``t``.

    Uses the three-term recurrence.  ``t`` may be a scalar or an array; the
    endpoint values are exact (``L_N(1) = 1``, ``L_N(-1) = (-1)^N``).

    Returns
    -------
    value, derivative : same shape as ``t``
    """
    if order < 0:
        raise ValueError(f"order must be non-negative, got {order}")
    t_arr = np.asarray(t, dtype=float)
    if np.any(np.abs(t_arr) > 1.0 + 1e-12):
        raise ValueError("legendre_eval is defined on [-1, 1]")

    p_prev = np.ones_like(t_arr)
    dp_prev = np.zeros_like(t_arr)
    if order == 0:
        return _unwrap(p_prev, t), _unwrap(dp_prev, t)
    p = t_arr.copy()
    dp = np.ones_like(t_arr)
    for k in range(1, order):
        # (k+1) L_{k+1} = (2k+1) t L_k - k L_{k-1}
        p_next = ((2 * k + 1) * t_arr * p - k * p_prev) / (k + 1)
        # L'_{k+1} = L'_{k-1} + (2k+1) L_k
        dp_next = dp_prev + (2 * k + 1) * p
        p_prev, p = p, p_next
        dp_prev, dp = dp, dp_next
    return _unwrap(p, t), _unwrap(dp, t)


def _unwrap(arr, like):
    return float(arr) if np.ndim(like) == 0 else arr


@dataclass(frozen=True)
class LglGrid:
    """LGL nodes, weights and differentiation matrix on the reference interval [-1, 1].

    The grid has ``order + 1`` nodes.  Instances are immutable and cached by
    :func:`lgl_grid`, so the arrays must not be modified in place.
    """

    order: int
    nodes: np.ndarray
    weights: np.ndarray
    diff_matrix: np.ndarray
    bary_weights: np.ndarray

    @property
    def size(self) -> int:
        return self.order + 1


@dataclass(frozen=True)
class AffineMap:
    """Affine bijection from [-1, 1] onto [a, b]."""

    a: float = -1.0
    b: float = 1.0

    def __post_init__(self):
        if not self.b > self.a:
            raise ValueError(f"AffineMap needs b > a, got [{self.a}, {self.b}]")

    @property
    def scale(self) -> float:
        """Jacobian ``(b - a) / 2`` of the map."""
        return 0.5 * (self.b - self.a)

    def forward(self, tau):
        return self.a + self.scale * (np.asarray(tau, dtype=float) + 1.0)

    def inverse(self, t):
        return (np.asarray(t, dtype=float) - self.a) / self.scale - 1.0


REFERENCE = AffineMap(-1.0, 1.0)


def _lgl_nodes(order: int) -> np.ndarray:
    # Newton on (1 - t^2) L'_N(t), seeded with Chebyshev-Gauss-Lobatto points.
    # With q = (1 - t^2) L'_N we have q' = -N(N+1) L_N, so the update is
    # t <- t + (1 - t^2) L'_N / (N (N+1) L_N) for the interior nodes.
    n = order
    t = -np.cos(np.pi * np.arange(n + 1) / n)
    interior = t[1:-1].copy()
    for _ in range(NEWTON_MAXITER):
        p, dp = legendre_eval(n, interior)
        step = (1.0 - interior**2) * dp / (n * (n + 1) * p)
        interior = interior + step
        if np.max(np.abs(step), initial=0.0) < NEWTON_TOL:
            break
    else:
        raise ConvergenceError(f"LGL node iteration did not converge for N={order}")
    t[1:-1] = interior
    # enforce exact symmetry
    t = 0.5 * (t - t[::-1])
    t[0], t[-1] = -1.0, 1.0
    if n % 2 == 0:
        t[n // 2] = 0.0
    return t


@lru_cache(maxsize=64)
def lgl_grid(order: int) -> LglGrid:
    """Build the LGL grid of polynomial order ``order`` (``order + 1`` nodes)."""
    if not isinstance(order, (int, np.integer)) or order < 1:
        raise ValueError(f"LGL order must be an integer >= 1, got {order!r}")
    if order > MAX_ORDER:
        raise ValueError(f"LGL order {order} exceeds the supported maximum {MAX_ORDER}")
    order = int(order)
    nodes = _lgl_nodes(order)
    l_at_nodes, _ = legendre_eval(order, nodes)
    weights = 2.0 / (order * (order + 1) * l_at_nodes**2)

    # off-diagonal D_jk = L_N(t_j) / (L_N(t_k) (t_j - t_k)); diagonal by negative row sum
    diff = nodes[:, None] - nodes[None, :]
    np.fill_diagonal(diff, 1.0)
    dmat = (l_at_nodes[:, None] / l_at_nodes[None, :]) / diff
    np.fill_diagonal(dmat, 0.0)
    np.fill_diagonal(dmat, -dmat.sum(axis=1))

    # barycentric weights 1 / prod_{k != j}(t_j - t_k), normalised
    bary = 1.0 / np.prod(diff, axis=1)
    bary = bary / np.max(np.abs(bary))

    for arr in (nodes, weights, dmat, bary):
        arr.setflags(write=False)
    return LglGrid(order, nodes, weights, dmat, bary)


def _check_len(values, grid: LglGrid) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.shape[0] != grid.size:
        raise ValueError(f"expected {grid.size} samples along axis 0, got {values.shape[0]}")
    return values


def quadrature(values, grid: LglGrid, amap: AffineMap = REFERENCE):
    """Integrate node samples over ``[amap.a, amap.b]``.

    Exact for polynomials of degree <= 2N - 1.  Extra trailing axes of
    ``values`` are integrated independently.
    """
    values = _check_len(values, grid)
    return amap.scale * np.tensordot(grid.weights, values, axes=(0, 0))


def differentiate(values, grid: LglGrid, amap: AffineMap = REFERENCE) -> np.ndarray:
    """Derivative of the interpolant of ``values`` at the mapped nodes."""
    values = _check_len(values, grid)
    return (grid.diff_matrix @ values) / amap.scale


def interpolation_matrix(grid: LglGrid, t, amap: AffineMap = REFERENCE) -> np.ndarray:
    """Matrix ``E`` with ``E @ values`` = interpolant evaluated at points ``t``."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    slack = 1e-9 * max(1.0, abs(amap.a), abs(amap.b))
    if np.any(t < amap.a - slack) or np.any(t > amap.b + slack):
        raise ValueError(f"interpolation point outside [{amap.a}, {amap.b}]")
    tau = np.clip(amap.inverse(t), -1.0, 1.0)
    diff = tau[:, None] - grid.nodes[None, :]
    exact = diff == 0.0
    diff[exact] = 1.0
    terms = grid.bary_weights[None, :] / diff
    mat = terms / terms.sum(axis=1, keepdims=True)
    hit_rows = np.any(exact, axis=1)
    if np.any(hit_rows):
        mat[hit_rows] = exact[hit_rows].astype(float)
    return mat


def interpolate(values, grid: LglGrid, amap: AffineMap, t):
    """Barycentric Lagrange interpolation of node samples at ``t``.

    Scalar ``t`` returns a scalar (or a trailing-axis vector); array ``t``
    returns one row per point.
    """
    values = _check_len(values, grid)
    mat = interpolation_matrix(grid, t, amap)
    out = np.tensordot(mat, values, axes=(1, 0))
    if np.ndim(t) == 0:
        out = out[0]
        return float(out) if np.ndim(out) == 0 else out
    return out


def tensor_grid(grids, maps):
    """Tensor-product nodes and weights for a box of parameter grids.

    Returns ``(points, weights)`` with ``points`` of shape ``(K, d)`` where the
    last dimension varies fastest, and product weights scaled to the box.
    """
    if len(grids) == 0:
        return np.zeros((1, 0)), np.ones(1)
    axes = [m.forward(g.nodes) for g, m in zip(grids, maps)]
    wts = [g.weights * m.scale for g, m in zip(grids, maps)]
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([m.ravel() for m in mesh], axis=1)
    wmesh = np.meshgrid(*wts, indexing="ij")
    weights = np.prod(np.stack([w.ravel() for w in wmesh], axis=1), axis=1)
    return points, weights
