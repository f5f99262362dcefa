"""Multidimensional pseudospectral transcription of ensemble optimal control problems.

States are sampled on a tensor grid of LGL time nodes and LGL parameter nodes,
controls on the time nodes only.  The decision vector is laid out as

    [ X (N+1, K, n) | U (N+1, m) | T (free horizon only) ]

with ``K`` the number of parameter samples (last parameter axis fastest).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .spectral import AffineMap, LglGrid, interpolation_matrix, lgl_grid, tensor_grid

FD_STEP = 1e-7


@dataclass
class EnsembleProblem:
    """Ensemble optimal control problem over a box of parameters.

    All callbacks are vectorised: they receive arrays whose last axis is the
    vector axis and must broadcast over any leading axes.

    dynamics(t, s, x, u) -> xdot
    initial_state(s) -> x0                 (None: node 0 left to endpoint constraints)
    terminal_cost(T, xT) -> per-sample cost, integrated over the parameter box
    running_cost(x, u) -> cost density; ``x`` is None unless
        ``running_cost_uses_state`` is set, in which case the running cost is
        integrated over the box as well as over time
    endpoint_constraints(x0, xT) -> residuals, one row per sample (== 0)
    path_constraints(x, u) -> residuals (<= 0)

    ``horizon`` is either a fixed ``T`` or a ``(T_min, T_max)`` pair for a
    free terminal time.  ``control_bound`` bounds the Euclidean norm of u at
    the nodes and, with ``bound_oversample = r > 1``, also at ``r N + 1``
    evenly spaced points of the control interpolant, which otherwise may
    overshoot the bound between nodes.
    ``control_smoothness`` adds ``weight * int |d^p u/dt^p|^2 dt`` of the
    control interpolant to the cost, ``p = smoothness_order`` (exact under
    LGL quadrature); without it the optimiser can exploit high-degree control
    content that the grid does not resolve.

    ``resolution_penalty`` adds ``weight * mean_s sum_k |xhat_k(s)|^2`` over
    the top ``resolution_modes`` Legendre coefficients of each state
    trajectory.  That tail measures how well the time grid resolves the
    states, so the penalty keeps the optimiser away from trajectories whose
    collocation solution is not trustworthy.
    """

    state_dim: int
    control_dim: int
    dynamics: Callable
    param_box: Sequence[tuple[float, float]] = ()
    initial_state: Optional[Callable] = None
    terminal_cost: Optional[Callable] = None
    running_cost: Optional[Callable] = None
    running_cost_uses_state: bool = False
    endpoint_constraints: Optional[Callable] = None
    endpoint_dim: int = 0
    path_constraints: Optional[Callable] = None
    path_dim: int = 0
    control_bound: Optional[float] = None
    horizon: Union[float, tuple[float, float]] = 1.0
    # optional analytic derivatives
    dynamics_jacobian: Optional[Callable] = None
    terminal_cost_grad: Optional[Callable] = None
    running_cost_grad: Optional[Callable] = None
    time_dependent: bool = True
    linear_in_state: bool = False
    control_smoothness: float = 0.0
    smoothness_order: int = 1
    smoothness_kind: str = "sobolev"
    resolution_penalty: float = 0.0
    resolution_modes: int = 4
    bound_oversample: int = 1

    def __post_init__(self):
        self.param_box = [tuple(map(float, b)) for b in self.param_box]
        for a, b in self.param_box:
            if not b >= a:
                raise ValueError(f"empty parameter interval [{a}, {b}]")
        if self.state_dim < 1 or self.control_dim < 1:
            raise ValueError("state_dim and control_dim must be positive")
        if self.control_bound is not None and not self.control_bound > 0:
            raise ValueError("control_bound must be positive")
        if self.free_horizon:
            lo, hi = self.horizon
            if not 0 < lo < hi:
                raise ValueError(f"free horizon needs 0 < T_min < T_max, got {self.horizon}")
        elif not float(self.horizon) > 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if self.endpoint_constraints is not None and self.endpoint_dim < 1:
            raise ValueError("endpoint_dim must be set with endpoint_constraints")
        if self.path_constraints is not None and self.path_dim < 1:
            raise ValueError("path_dim must be set with path_constraints")
        if self.control_smoothness < 0 or self.resolution_penalty < 0:
            raise ValueError("penalty weights must be non-negative")
        if self.smoothness_order < 1 or self.resolution_modes < 1 or self.bound_oversample < 1:
            raise ValueError("smoothness_order and resolution_modes must be positive")

    @property
    def free_horizon(self) -> bool:
        return isinstance(self.horizon, (tuple, list))

    @property
    def param_dim(self) -> int:
        return len(self.param_box)


@dataclass
class CollocationGrid:
    """LGL time grid plus tensor LGL parameter grid."""

    time_grid: LglGrid
    time_map: Optional[AffineMap]
    param_grids: list
    param_maps: list
    param_points: np.ndarray
    param_weights: np.ndarray

    @property
    def N(self) -> int:
        return self.time_grid.order

    @property
    def num_samples(self) -> int:
        return self.param_points.shape[0]


def build_grid(problem: EnsembleProblem, N: int, param_orders: Sequence[int] = ()) -> CollocationGrid:
    """Collocation grid of time order ``N`` and one LGL order per parameter.

    A degenerate parameter interval (``a == b``) contributes a single sample
    with unit weight; its order is ignored.
    """
    if N < 2:
        raise ValueError(f"time order N must be >= 2, got {N}")
    param_orders = list(param_orders)
    if len(param_orders) != problem.param_dim:
        raise ValueError(
            f"expected {problem.param_dim} parameter orders, got {len(param_orders)}"
        )
    if any(o < 1 for o in param_orders):
        raise ValueError(f"parameter orders must be >= 1, got {param_orders}")
    grids, maps = [], []
    for (a, b), order in zip(problem.param_box, param_orders):
        if b == a:
            grids.append(None)
            maps.append(a)
        else:
            grids.append(lgl_grid(order))
            maps.append(AffineMap(a, b))
    points, weights = _param_tensor(grids, maps)
    time_map = None if problem.free_horizon else AffineMap(0.0, float(problem.horizon))
    return CollocationGrid(lgl_grid(N), time_map, grids, maps, points, weights)


def _param_tensor(grids, maps):
    axes, wts = [], []
    for g, m in zip(grids, maps):
        if g is None:
            axes.append(np.array([float(m)]))
            wts.append(np.array([1.0]))
        else:
            axes.append(m.forward(g.nodes))
            wts.append(g.weights * m.scale)
    if not axes:
        return np.zeros((1, 0)), np.ones(1)
    mesh = np.meshgrid(*axes, indexing="ij")
    wmesh = np.meshgrid(*wts, indexing="ij")
    points = np.stack([m.ravel() for m in mesh], axis=1)
    weights = np.prod(np.stack([w.ravel() for w in wmesh], axis=1), axis=1)
    return points, weights


@dataclass
class Layout:
    """Index map of the decision vector."""

    N: int
    K: int
    n: int
    m: int
    free_horizon: bool

    @property
    def nx(self) -> int:
        return (self.N + 1) * self.K * self.n

    @property
    def nu(self) -> int:
        return (self.N + 1) * self.m

    @property
    def num_vars(self) -> int:
        return self.nx + self.nu + int(self.free_horizon)

    def state_index(self, k: int, j: int, i: int) -> int:
        return (k * self.K + j) * self.n + i

    def control_index(self, k: int, i: int) -> int:
        return self.nx + k * self.m + i

    def unpack(self, z):
        z = np.asarray(z, dtype=float)
        if z.shape != (self.num_vars,):
            raise ValueError(f"decision vector must have length {self.num_vars}, got {z.shape}")
        X = z[: self.nx].reshape(self.N + 1, self.K, self.n)
        U = z[self.nx : self.nx + self.nu].reshape(self.N + 1, self.m)
        T = z[-1] if self.free_horizon else None
        return X, U, T

    def pack(self, X, U, T=None) -> np.ndarray:
        parts = [np.asarray(X, dtype=float).ravel(), np.asarray(U, dtype=float).ravel()]
        if self.free_horizon:
            if T is None:
                raise ValueError("free-horizon layout needs T")
            parts.append(np.array([float(T)]))
        return np.concatenate(parts)


@dataclass
class NlpProblem:
    """Algebraic NLP: min f(z) s.t. c(z) = 0, g(z) <= 0, lower <= z <= upper.

    Derivative callbacks are optional; the solver falls back to finite
    differences when they are absent.  ``eq_vjp(z, v)`` returns ``J_c(z)^T v``.
    """

    num_vars: int
    objective: Callable
    gradient: Optional[Callable] = None
    eq_constraints: Optional[Callable] = None
    eq_vjp: Optional[Callable] = None
    num_eq: int = 0
    ineq_constraints: Optional[Callable] = None
    ineq_vjp: Optional[Callable] = None
    num_ineq: int = 0
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    layout: Optional[Layout] = None
    objective_parts: Optional[Callable] = None

    def __post_init__(self):
        if self.lower is None:
            self.lower = np.full(self.num_vars, -np.inf)
        if self.upper is None:
            self.upper = np.full(self.num_vars, np.inf)

    def eq(self, z) -> np.ndarray:
        return np.zeros(0) if self.eq_constraints is None else np.asarray(self.eq_constraints(z))

    def ineq(self, z) -> np.ndarray:
        return np.zeros(0) if self.ineq_constraints is None else np.asarray(self.ineq_constraints(z))

    def jacobians(self, z, step: float = FD_STEP):
        """Dense ``(J_eq, J_ineq)``, from the VJPs if present, else forward differences."""
        z = np.asarray(z, dtype=float)
        out = []
        for fun, vjp, count in (
            (self.eq, self.eq_vjp, self.num_eq),
            (self.ineq, self.ineq_vjp, self.num_ineq),
        ):
            if count == 0:
                out.append(np.zeros((0, self.num_vars)))
            elif vjp is not None:
                out.append(np.stack([vjp(z, e) for e in np.eye(count)]))
            else:
                out.append(fd_jacobian(fun, z, step))
        return tuple(out)


def fd_jacobian(fun, z, step: float = FD_STEP) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    f0 = np.asarray(fun(z))
    jac = np.empty((f0.size, z.size))
    for i in range(z.size):
        h = step * (1.0 + abs(z[i]))
        zp = z.copy()
        zp[i] += h
        jac[:, i] = (np.asarray(fun(zp)) - f0) / h
    return jac


class InitialGuess(str, Enum):
    zero_controls = "zero_controls"
    given_controls = "given_controls"
    linear_state = "linear_state"


def _fd_partials(fun, args, which, step):
    """Forward-difference partials of a vectorised callback.

    Differentiates ``fun(*args)`` with respect to the vector argument
    ``args[which]`` one component at a time; returns ``(..., out, in)``.
    """
    base = np.asarray(fun(*args), dtype=float)
    x = np.asarray(args[which], dtype=float)
    cols = []
    for i in range(x.shape[-1]):
        h = step * (1.0 + np.abs(x[..., i]))
        xp = x.copy()
        xp[..., i] += h
        a = list(args)
        a[which] = xp
        d = (np.asarray(fun(*a), dtype=float) - base)
        cols.append(d / (h[..., None] if d.ndim > h.ndim else h))
    return np.stack(cols, axis=-1)


class Transcription:
    """Evaluators of the discretised problem for one (problem, grid) pair."""

    def __init__(self, problem: EnsembleProblem, grid: CollocationGrid,
                 collocate_all_nodes: bool = False, fd_step: float = FD_STEP,
                 form: str = "integral"):
        if form not in ("integral", "differential"):
            raise ValueError(f"unknown constraint form {form!r}")
        if collocate_all_nodes and form == "integral":
            raise ValueError("the integral form requires node 0 to be left uncollocated")
        self.problem = problem
        self.grid = grid
        self.fd_step = fd_step
        self.form = form
        N, K = grid.N, grid.num_samples
        self.layout = Layout(N, K, problem.state_dim, problem.control_dim, problem.free_horizon)
        self.rows = np.arange(N + 1) if collocate_all_nodes else np.arange(1, N + 1)
        self.D = grid.time_grid.diff_matrix
        self.D_rows = self.D[self.rows]
        if problem.smoothness_kind == "sobolev":
            Dp = np.linalg.matrix_power(self.D, problem.smoothness_order)
            self._Q = Dp.T @ (grid.time_grid.weights[:, None] * Dp)
        elif problem.smoothness_kind == "modal":
            # Legendre coefficients of the interpolant, damped by (k/N)^(2p)
            V = np.polynomial.legendre.legvander(grid.time_grid.nodes, N)
            Vinv = np.linalg.inv(V)
            f = (np.arange(N + 1) / N) ** (2 * problem.smoothness_order)
            self._Q = Vinv.T @ (f[:, None] * Vinv)
        else:
            raise ValueError(f"unknown smoothness_kind {problem.smoothness_kind!r}")
        modes = min(problem.resolution_modes, N)
        V = np.polynomial.legendre.legvander(grid.time_grid.nodes, N)
        self._tail = np.linalg.inv(V)[N + 1 - modes:]
        self._tail_w = grid.param_weights / grid.param_weights.sum()
        # D restricted to nodes 1..N is invertible on {p : p(-1) = 0}
        self.D_inv = None if collocate_all_nodes else np.linalg.inv(self.D[1:, 1:])
        self.tau = grid.time_grid.nodes
        self.w = grid.time_grid.weights
        self.s = grid.param_points
        self.wp = grid.param_weights
        self.x0 = None
        if problem.initial_state is not None:
            x0 = problem.initial_state(self.s) if callable(problem.initial_state) else problem.initial_state
            self.x0 = np.broadcast_to(np.asarray(x0, dtype=float), (K, problem.state_dim)).copy()
        n, m = problem.state_dim, problem.control_dim
        self.n_colloc = len(self.rows) * K * n
        self.n_init = K * n if self.x0 is not None else 0
        self.n_endpoint = K * problem.endpoint_dim if problem.endpoint_constraints else 0
        self.num_eq = self.n_colloc + self.n_init + self.n_endpoint
        self.n_path = (N + 1) * K * problem.path_dim if problem.path_constraints else 0
        self._E = np.eye(N + 1)
        if problem.bound_oversample > 1:
            extra = interpolation_matrix(grid.time_grid, np.linspace(-1.0, 1.0, problem.bound_oversample * N + 1))
            self._E = np.vstack([self._E, extra])
        self.n_bound = len(self._E) if problem.control_bound is not None else 0
        self.num_ineq = self.n_path + self.n_bound

    # -- helpers -----------------------------------------------------------

    def horizon(self, T=None) -> float:
        if self.problem.free_horizon:
            return float(T)
        return float(self.problem.horizon)

    def times(self, T=None) -> np.ndarray:
        return 0.5 * self.horizon(T) * (self.tau + 1.0)

    def _dyn_args(self, X, U, T):
        t = self.times(T)[:, None]
        return t, self.s[None, :, :], X, U[:, None, :]

    def _f(self, X, U, T):
        args = self._dyn_args(X, U, T)
        return np.broadcast_to(self.problem.dynamics(*args), X.shape)

    def _f_jac(self, X, U, T):
        p = self.problem
        args = self._dyn_args(X, U, T)
        if p.dynamics_jacobian is not None:
            jx, ju = p.dynamics_jacobian(*args)
        else:
            fun = lambda *a: np.broadcast_to(p.dynamics(*a), np.broadcast_shapes(a[2].shape, X.shape))
            jx = _fd_partials(fun, args, 2, self.fd_step)
            uu = np.broadcast_to(args[3], X.shape[:-1] + (U.shape[-1],))
            ju = _fd_partials(fun, (args[0], args[1], X, uu), 3, self.fd_step)
        shape = X.shape[:-1]
        jx = np.broadcast_to(jx, shape + (X.shape[-1], X.shape[-1]))
        ju = np.broadcast_to(ju, shape + (X.shape[-1], U.shape[-1]))
        return jx, ju

    def _smoothing_form(self, c):
        if self.problem.smoothness_kind == "sobolev":
            return c ** (1 - 2 * self.problem.smoothness_order) * self._Q
        return self._Q

    # -- objective -----------------------------------------------------------

    def objective_parts(self, z) -> dict:
        X, U, T = self.layout.unpack(z)
        p = self.problem
        c = 0.5 * self.horizon(T)
        terminal = 0.0
        if p.terminal_cost is not None:
            vals = np.broadcast_to(p.terminal_cost(self.horizon(T), X[-1]), (self.layout.K,))
            terminal = float(np.dot(self.wp, vals))
        running = 0.0
        if p.running_cost is not None:
            if p.running_cost_uses_state:
                dens = np.broadcast_to(p.running_cost(X, U[:, None, :]), X.shape[:-1])
                running = float(c * (self.w @ dens @ self.wp))
            else:
                dens = np.broadcast_to(p.running_cost(None, U), (self.layout.N + 1,))
                running = float(c * np.dot(self.w, dens))
        smooth = 0.0
        if p.control_smoothness:
            smooth = float(p.control_smoothness * np.sum(U * (self._smoothing_form(c) @ U)))
        resolution = 0.0
        if p.resolution_penalty:
            C = np.einsum("ik,kjn->ijn", self._tail, X)
            resolution = float(p.resolution_penalty * np.einsum("j,ijn,ijn->", self._tail_w, C, C))
        return {"terminal": terminal, "running": running, "smoothness": smooth,
                "resolution": resolution, "total": terminal + running + smooth + resolution}

    def objective(self, z) -> float:
        return self.objective_parts(z)["total"]

    def gradient(self, z) -> np.ndarray:
        X, U, T = self.layout.unpack(z)
        p = self.problem
        gX = np.zeros_like(X)
        gU = np.zeros_like(U)
        gT = 0.0
        Th = self.horizon(T)
        c = 0.5 * Th
        if p.terminal_cost is not None:
            if p.terminal_cost_grad is not None:
                gphi = np.asarray(p.terminal_cost_grad(Th, X[-1]), dtype=float)
            else:
                fun = lambda Tv, x: np.broadcast_to(p.terminal_cost(Tv, x), x.shape[:-1])
                gphi = _fd_partials(fun, (Th, X[-1]), 1, self.fd_step)
            gX[-1] += self.wp[:, None] * np.broadcast_to(gphi, X[-1].shape)
            if p.free_horizon:
                h = self.fd_step * (1.0 + abs(Th))
                d = np.asarray(p.terminal_cost(Th + h, X[-1])) - np.asarray(p.terminal_cost(Th, X[-1]))
                gT += float(np.dot(self.wp, np.broadcast_to(d / h, (self.layout.K,))))
        if p.running_cost is not None:
            if p.running_cost_uses_state:
                Ub = np.broadcast_to(U[:, None, :], X.shape[:-1] + (U.shape[-1],))
                if p.running_cost_grad is not None:
                    dx, du = p.running_cost_grad(X, Ub)
                else:
                    fun = lambda x, u: np.broadcast_to(p.running_cost(x, u), x.shape[:-1])
                    dx = _fd_partials(fun, (X, Ub), 0, self.fd_step)
                    du = _fd_partials(fun, (X, Ub), 1, self.fd_step)
                W = c * self.w[:, None] * self.wp[None, :]
                gX += W[..., None] * dx
                gU += np.einsum("kj,kji->ki", W, du)
                dens = np.broadcast_to(p.running_cost(X, U[:, None, :]), X.shape[:-1])
                gT += 0.5 * float(self.w @ dens @ self.wp)
            else:
                if p.running_cost_grad is not None:
                    _, du = p.running_cost_grad(None, U)
                else:
                    fun = lambda x, u: np.broadcast_to(p.running_cost(None, u), u.shape[:-1])
                    du = _fd_partials(fun, (None, U), 1, self.fd_step)
                gU += c * self.w[:, None] * du
                dens = np.broadcast_to(p.running_cost(None, U), (self.layout.N + 1,))
                gT += 0.5 * float(np.dot(self.w, dens))
        if p.resolution_penalty:
            C = np.einsum("ik,kjn->ijn", self._tail, X)
            gX += (2.0 * p.resolution_penalty) * np.einsum("ik,ijn->kjn", self._tail, C * self._tail_w[None, :, None])
        if p.control_smoothness:
            Q = self._smoothing_form(c)
            gU += 2.0 * p.control_smoothness * (Q @ U)
            if p.smoothness_kind == "sobolev":
                # Q scales as c^(1 - 2p)
                dlog = 0.5 * (1 - 2 * p.smoothness_order) / c
                gT += p.control_smoothness * dlog * float(np.sum(U * (Q @ U)))
        return self.layout.pack(gX, gU, gT if p.free_horizon else None)

    # -- equality constraints -------------------------------------------------

    def collocation_residual(self, z) -> np.ndarray:
        """``(2/T) D X - F`` at the collocated nodes, shape ``(rows, K, n)``."""
        X, U, T = self.layout.unpack(z)
        c = 0.5 * self.horizon(T)
        F = self._f(X, U, T)
        DX = np.tensordot(self.D_rows, X, axes=(1, 0)) / c
        return DX - F[self.rows]

    def integral_residual(self, z) -> np.ndarray:
        """``X_k - X_0 - (T/2) sum_l Dinv_kl F_l`` for k = 1..N.

        An invertible linear transform of :meth:`collocation_residual`, so
        the feasible set is identical; it is far better conditioned.
        """
        X, U, T = self.layout.unpack(z)
        c = 0.5 * self.horizon(T)
        F = self._f(X, U, T)[1:]
        return (X[1:] - X[0]) - c * np.tensordot(self.D_inv, F, axes=(1, 0))

    def eq(self, z) -> np.ndarray:
        X, U, T = self.layout.unpack(z)
        if self.form == "integral":
            parts = [self.integral_residual(z).ravel()]
        else:
            parts = [self.collocation_residual(z).ravel()]
        if self.x0 is not None:
            parts.append((X[0] - self.x0).ravel())
        if self.n_endpoint:
            parts.append(np.asarray(self.problem.endpoint_constraints(X[0], X[-1]), dtype=float).ravel())
        return np.concatenate(parts)

    def eq_vjp(self, z, v) -> np.ndarray:
        X, U, T = self.layout.unpack(z)
        p = self.problem
        K, n = self.layout.K, self.layout.n
        Th = self.horizon(T)
        c = 0.5 * Th
        v = np.asarray(v, dtype=float)
        V = v[: self.n_colloc].reshape(len(self.rows), K, n)
        jx, ju = self._f_jac(X, U, T)
        jx, ju = jx[self.rows], ju[self.rows]
        gU = np.zeros_like(U)
        gT = 0.0
        if self.form == "integral":
            gX = np.zeros_like(X)
            gX[1:] += V
            gX[0] -= V.sum(axis=0)
            W = c * np.tensordot(self.D_inv, V, axes=(0, 0))
            if p.free_horizon:
                F = self._f(X, U, T)[1:]
                gT -= 0.5 * float(np.sum(V * np.tensordot(self.D_inv, F, axes=(1, 0))))
        else:
            gX = np.tensordot(self.D_rows, V, axes=(0, 0)) / c
            W = V
            if p.free_horizon:
                DX = np.tensordot(self.D_rows, X, axes=(1, 0))
                gT -= 0.5 * float(np.sum(V * DX)) / c**2
        gX[self.rows] -= np.einsum("kjab,kja->kjb", jx, W)
        gU[self.rows] -= np.einsum("kjab,kja->kb", ju, W)
        if p.free_horizon and p.time_dependent:
            h = self.fd_step * (1.0 + abs(Th))
            dF = (self._f(X, U, Th + h) - self._f(X, U, Th))[self.rows] / h
            gT -= float(np.sum(W * dF))
        off = self.n_colloc
        if self.x0 is not None:
            gX[0] += v[off : off + self.n_init].reshape(K, n)
            off += self.n_init
        if self.n_endpoint:
            ve = v[off : off + self.n_endpoint].reshape(K, p.endpoint_dim)
            e = p.endpoint_constraints
            for which, idx in ((0, 0), (1, -1)):
                args = (X[0], X[-1])
                jac = _fd_partials(lambda a, b: np.asarray(e(a, b), dtype=float), args, which, self.fd_step)
                gX[idx] += np.einsum("jab,ja->jb", jac, ve)
        return self.layout.pack(gX, gU, gT if p.free_horizon else None)

    # -- inequality constraints -----------------------------------------------

    def ineq(self, z) -> np.ndarray:
        X, U, T = self.layout.unpack(z)
        parts = []
        if self.n_path:
            Ub = np.broadcast_to(U[:, None, :], X.shape[:-1] + (U.shape[-1],))
            parts.append(np.asarray(self.problem.path_constraints(X, Ub), dtype=float).ravel())
        if self.n_bound:
            EU = self._E @ U
            parts.append(np.sum(EU * EU, axis=1) - self.problem.control_bound**2)
        return np.concatenate(parts) if parts else np.zeros(0)

    def ineq_vjp(self, z, v) -> np.ndarray:
        X, U, T = self.layout.unpack(z)
        gX = np.zeros_like(X)
        gU = np.zeros_like(U)
        v = np.asarray(v, dtype=float)
        off = 0
        if self.n_path:
            p = self.problem
            Vp = v[: self.n_path].reshape(X.shape[:-1] + (p.path_dim,))
            Ub = np.broadcast_to(U[:, None, :], X.shape[:-1] + (U.shape[-1],))
            g = lambda x, u: np.asarray(p.path_constraints(x, u), dtype=float)
            jx = _fd_partials(g, (X, Ub), 0, self.fd_step)
            ju = _fd_partials(g, (X, Ub), 1, self.fd_step)
            gX += np.einsum("kjab,kja->kjb", jx, Vp)
            gU += np.einsum("kjab,kja->kb", ju, Vp)
            off = self.n_path
        if self.n_bound:
            gU += 2.0 * self._E.T @ ((self._E @ U) * v[off : off + self.n_bound, None])
        return self.layout.pack(gX, gU, 0.0 if self.problem.free_horizon else None)

    # -- NLP -----------------------------------------------------------------

    def bounds(self):
        lo = np.full(self.layout.num_vars, -np.inf)
        hi = np.full(self.layout.num_vars, np.inf)
        if self.problem.free_horizon:
            lo[-1], hi[-1] = self.problem.horizon
        return lo, hi

    def nlp(self) -> NlpProblem:
        lo, hi = self.bounds()
        return NlpProblem(
            num_vars=self.layout.num_vars,
            objective=self.objective,
            gradient=self.gradient,
            eq_constraints=self.eq,
            eq_vjp=self.eq_vjp,
            num_eq=self.num_eq,
            ineq_constraints=self.ineq if self.num_ineq else None,
            ineq_vjp=self.ineq_vjp if self.num_ineq else None,
            num_ineq=self.num_ineq,
            lower=lo,
            upper=hi,
            layout=self.layout,
            objective_parts=self.objective_parts,
        )


def transcribe(problem: EnsembleProblem, grid: CollocationGrid, collocate_all_nodes: bool = False,
               fd_step: float = FD_STEP, check_guess=None, form: Optional[str] = None) -> NlpProblem:
    """Discretise ``problem`` on ``grid`` into an :class:`NlpProblem`.

    Dynamics are collocated at nodes 1..N by default, leaving node 0 to the
    initial state / endpoint constraints; ``collocate_all_nodes`` imposes
    them at every node instead (differential form only).  ``form`` selects
    how the collocation equalities are stated: ``"differential"`` gives
    ``(2/T) D X - F``, ``"integral"`` (default) the equivalent
    ``X_k - X_0 - (T/2) Dinv F``.  If ``check_guess`` is given, every callback
    is evaluated there and a ``ValueError`` is raised on non-finite output.
    """
    if form is None:
        form = "differential" if collocate_all_nodes else "integral"
    tr = Transcription(problem, grid, collocate_all_nodes, fd_step, form)
    nlp = tr.nlp()
    nlp.transcription = tr
    if check_guess is not None:
        z = np.asarray(check_guess, dtype=float)
        for name, fun in (("objective", nlp.objective), ("equality constraints", nlp.eq),
                          ("inequality constraints", nlp.ineq)):
            if not np.all(np.isfinite(fun(z))):
                raise ValueError(f"non-finite {name} at the initial guess")
    return nlp


# -- initial guesses ----------------------------------------------------------


def rk4_states(problem: EnsembleProblem, grid: CollocationGrid, control_fn: Callable,
               T: float, x0=None, substeps: int = 20) -> np.ndarray:
    """Sample RK4 trajectories of every ensemble member at the LGL time nodes."""
    tnodes = 0.5 * T * (grid.time_grid.nodes + 1.0)
    s = grid.param_points
    K = s.shape[0]
    if x0 is None:
        if problem.initial_state is None:
            raise ValueError("initial state needed to simulate an initial guess")
        x0 = problem.initial_state(s) if callable(problem.initial_state) else problem.initial_state
    x = np.broadcast_to(np.asarray(x0, dtype=float), (K, problem.state_dim)).copy()
    out = np.empty((len(tnodes), K, problem.state_dim))
    out[0] = x

    def f(t, x):
        u = np.asarray(control_fn(np.atleast_1d(t)), dtype=float).reshape(1, -1)
        return np.broadcast_to(problem.dynamics(t, s, x, u), x.shape)

    for k in range(1, len(tnodes)):
        t0, t1 = tnodes[k - 1], tnodes[k]
        h = (t1 - t0) / substeps
        t = t0
        for _ in range(substeps):
            k1 = f(t, x)
            k2 = f(t + h / 2, x + h / 2 * k1)
            k3 = f(t + h / 2, x + h / 2 * k2)
            k4 = f(t + h, x + h * k3)
            x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            t += h
        if not np.all(np.isfinite(x)):
            raise FloatingPointError("initial-guess simulation blew up")
        out[k] = x
    return out


def initial_guess(problem: EnsembleProblem, grid: CollocationGrid,
                  strategy: Union[InitialGuess, str] = InitialGuess.zero_controls,
                  controls: Optional[Callable] = None, target=None,
                  horizon: Optional[float] = None) -> np.ndarray:
    """Starting decision vector.

    zero_controls: u = 0, states from RK4 simulation of every sample.
    given_controls: ``controls(t) -> (len(t), m)`` drives the simulation.
    linear_state: states interpolate linearly from x0 to ``target``, u = 0.
    """
    strategy = InitialGuess(strategy)
    N, K, n, m = grid.N, grid.num_samples, problem.state_dim, problem.control_dim
    layout = Layout(N, K, n, m, problem.free_horizon)
    if problem.free_horizon:
        T = problem.horizon[1] if horizon is None else float(horizon)
    else:
        T = float(problem.horizon)
    tnodes = 0.5 * T * (grid.time_grid.nodes + 1.0)
    if strategy is InitialGuess.zero_controls:
        U = np.zeros((N + 1, m))
        X = rk4_states(problem, grid, lambda t: np.zeros((len(t), m)), T)
    elif strategy is InitialGuess.given_controls:
        if controls is None:
            raise ValueError("given_controls needs a control callable")
        U = np.asarray(controls(tnodes), dtype=float).reshape(N + 1, m)
        X = rk4_states(problem, grid, controls, T)
    else:
        if target is None:
            raise ValueError("linear_state needs a target state")
        x0 = problem.initial_state(grid.param_points) if callable(problem.initial_state) else problem.initial_state
        x0 = np.broadcast_to(np.asarray(x0, dtype=float), (K, n))
        xt = np.broadcast_to(np.asarray(target, dtype=float), (K, n))
        lam = (grid.time_grid.nodes + 1.0) / 2.0
        X = (1 - lam)[:, None, None] * x0[None] + lam[:, None, None] * xt[None]
        U = np.zeros((N + 1, m))
    return layout.pack(X, U, T if problem.free_horizon else None)


# -- solutions ----------------------------------------------------------------


@dataclass
class PulseSolution:
    """Optimised controls and states at the collocation nodes."""

    times: np.ndarray
    controls: np.ndarray
    states: np.ndarray
    horizon: float
    objective_value: float
    cost_breakdown: dict
    param_points: np.ndarray
    dynamics_residual: float
    solver_stats: dict = field(default_factory=dict)
    grid: Optional[CollocationGrid] = None

    @property
    def time_map(self) -> AffineMap:
        return AffineMap(0.0, self.horizon)

    def control_at(self, t) -> np.ndarray:
        """Interpolated controls at times ``t``, shape ``(len(t), m)``."""
        E = interpolation_matrix(self.grid.time_grid, t, self.time_map)
        return E @ self.controls

    def state_at(self, t) -> np.ndarray:
        """Interpolated states at times ``t``, shape ``(len(t), K, n)``."""
        E = interpolation_matrix(self.grid.time_grid, t, self.time_map)
        return np.tensordot(E, self.states, axes=(1, 0))

    @property
    def terminal_states(self) -> np.ndarray:
        return self.states[-1]

    @property
    def max_control_norm(self) -> float:
        return float(np.max(np.linalg.norm(self.controls, axis=1)))


def dynamics_residual_norm(tr: Transcription, z) -> float:
    """Discrete L2 norm of ``(2/T) D x - f`` over time and parameters.

    Weighted by the LGL time weights on [0, T] and the parameter weights,
    normalised by the parameter-box volume.
    """
    X, U, T = tr.layout.unpack(z)
    c = 0.5 * tr.horizon(T)
    R = np.tensordot(tr.D, X, axes=(1, 0)) / c - tr._f(X, U, T)
    if len(tr.rows) == tr.layout.N:
        # node 0 is not collocated; it is fixed by the boundary conditions
        R[0] = 0.0
    sq = np.sum(R * R, axis=-1)
    val = c * (tr.w @ sq @ tr.wp) / np.sum(tr.wp)
    return float(np.sqrt(val))


def extract_solution(nlp: NlpProblem, decision, grid: CollocationGrid,
                     problem: Optional[EnsembleProblem] = None, stats: Optional[dict] = None) -> PulseSolution:
    """Unpack a decision vector into a :class:`PulseSolution`."""
    tr: Transcription = nlp.transcription
    X, U, T = tr.layout.unpack(decision)
    Th = tr.horizon(T)
    parts = tr.objective_parts(decision)
    return PulseSolution(
        times=tr.times(T),
        controls=U.copy(),
        states=X.copy(),
        horizon=Th,
        objective_value=parts["total"],
        cost_breakdown=parts,
        param_points=grid.param_points.copy(),
        dynamics_residual=dynamics_residual_norm(tr, decision),
        solver_stats=dict(stats or {}),
        grid=grid,
    )
