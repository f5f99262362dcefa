"""Augmented-Lagrangian NLP solver with a limited-memory BFGS inner loop.

Equalities and inequalities enter a Powell-Hestenes-Rockafellar augmented
Lagrangian; simple bounds are handled by the projected L-BFGS-B inner
minimiser from scipy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.optimize import minimize

from .transcription import NlpProblem

log = logging.getLogger(__name__)

MULTIPLIER_CLIP = 1e8


class Status(str, Enum):
    optimal = "optimal"
    feasible_stalled = "feasible_stalled"
    infeasible = "infeasible"
    iteration_cap = "iteration_cap"


@dataclass
class SolverConfig:
    feasibility_tol: float = 1e-6
    optimality_tol: float = 1e-6
    max_outer: int = 50
    max_inner: int = 500
    penalty_init: float = 10.0
    penalty_growth: float = 10.0
    penalty_max: float = 1e10
    fd_step: float = 1e-7
    memory: int = 20
    seed: int = 0

    def __post_init__(self):
        for name in ("feasibility_tol", "optimality_tol", "penalty_init", "fd_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.penalty_growth > 1:
            raise ValueError("penalty_growth must exceed 1")
        if self.max_outer < 1 or self.max_inner < 1:
            raise ValueError("iteration limits must be positive")


@dataclass
class SolveReport:
    status: Status
    kkt_residual: float
    constraint_violation: float
    outer_iters: int
    inner_iters: int
    objective: float
    objective_history: list = field(default_factory=list)
    violation_history: list = field(default_factory=list)
    eq_multipliers: np.ndarray = None
    ineq_multipliers: np.ndarray = None

    def as_dict(self) -> dict:
        return {
            "status": self.status.value,
            "kkt_residual": self.kkt_residual,
            "constraint_violation": self.constraint_violation,
            "outer_iters": self.outer_iters,
            "inner_iters": self.inner_iters,
            "objective": self.objective,
        }


def _fd_gradient(fun, z, step):
    f0 = fun(z)
    g = np.empty_like(z)
    for i in range(z.size):
        h = step * (1.0 + abs(z[i]))
        zp = z.copy()
        zp[i] += h
        g[i] = (fun(zp) - f0) / h
    return g


class _Derivatives:
    """Gradient and transposed-Jacobian products with finite-difference fallback."""

    def __init__(self, nlp: NlpProblem, step: float):
        self.nlp = nlp
        self.step = step

    def grad(self, z):
        if self.nlp.gradient is not None:
            return np.asarray(self.nlp.gradient(z), dtype=float)
        return _fd_gradient(self.nlp.objective, z, self.step)

    def _vjp(self, fun, vjp, z, v):
        if v.size == 0:
            return np.zeros_like(z)
        if vjp is not None:
            return np.asarray(vjp(z, v), dtype=float)
        return _fd_gradient(lambda y: float(np.dot(v, fun(y))), z, self.step)

    def eq_vjp(self, z, v):
        return self._vjp(self.nlp.eq, self.nlp.eq_vjp, z, v)

    def ineq_vjp(self, z, v):
        return self._vjp(self.nlp.ineq, self.nlp.ineq_vjp, z, v)


def constraint_violation(nlp: NlpProblem, z) -> float:
    c = nlp.eq(z)
    g = nlp.ineq(z)
    viol = 0.0
    if c.size:
        viol = max(viol, float(np.max(np.abs(c))))
    if g.size:
        viol = max(viol, float(np.max(g, initial=0.0)))
    return viol


def kkt_residual(nlp: NlpProblem, decision, eq_multipliers=None, ineq_multipliers=None,
                 fd_step: float = 1e-7) -> float:
    """Max-norm KKT measure.

    Combines projected stationarity of ``f + lam.c + mu.g`` (projection onto
    the simple bounds), complementarity ``|mu_i g_i|``, dual feasibility
    ``max(0, -mu)`` and primal violation.
    """
    z = np.asarray(decision, dtype=float)
    der = _Derivatives(nlp, fd_step)
    lam = np.zeros(nlp.num_eq) if eq_multipliers is None else np.asarray(eq_multipliers, dtype=float)
    mu = np.zeros(nlp.num_ineq) if ineq_multipliers is None else np.asarray(ineq_multipliers, dtype=float)
    grad = der.grad(z) + der.eq_vjp(z, lam) + der.ineq_vjp(z, mu)
    stationarity = np.abs(_projected_step(z, grad, nlp.lower, nlp.upper))
    res = float(np.max(stationarity, initial=0.0))
    g = nlp.ineq(z)
    if g.size:
        res = max(res, float(np.max(np.abs(mu * g))), float(np.max(-mu, initial=0.0)))
    return max(res, constraint_violation(nlp, z))


def _projected_step(z, grad, lower, upper):
    # z - P(z - grad): zero at a bound when the gradient pushes outward
    return z - np.clip(z - grad, lower, upper)


def solve(nlp: NlpProblem, x0, config: SolverConfig | None = None):
    """Minimise ``nlp`` starting from ``x0``.

    Returns ``(decision, report)``.  The run is deterministic: no randomness
    is used unless ``config.seed`` is non-zero, in which case the starting
    point receives a seeded perturbation of relative size 1e-6.
    """
    config = config or SolverConfig()
    z = np.clip(np.asarray(x0, dtype=float).copy(), nlp.lower, nlp.upper)
    if z.shape != (nlp.num_vars,):
        raise ValueError(f"x0 must have length {nlp.num_vars}")
    if not np.all(np.isfinite(z)):
        raise ValueError("x0 must be finite")
    if config.seed:
        rng = np.random.default_rng(config.seed)
        z = np.clip(z + 1e-6 * (1 + np.abs(z)) * rng.standard_normal(z.size), nlp.lower, nlp.upper)

    der = _Derivatives(nlp, config.fd_step)
    lam = np.zeros(nlp.num_eq)
    mu = np.zeros(nlp.num_ineq)
    rho = config.penalty_init
    bounds = list(zip(np.where(np.isfinite(nlp.lower), nlp.lower, None),
                      np.where(np.isfinite(nlp.upper), nlp.upper, None)))
    has_bounds = any(b != (None, None) for b in bounds)

    obj_hist, viol_hist = [], []
    inner_total = 0
    best = None
    state = {"bad": 0}

    def aug(y):
        f = float(nlp.objective(y))
        c = nlp.eq(y)
        g = nlp.ineq(y)
        if not (np.isfinite(f) and np.all(np.isfinite(c)) and np.all(np.isfinite(g))):
            state["bad"] += 1
            return np.inf, np.zeros_like(y)
        shifted = np.maximum(0.0, mu + rho * g)
        val = f + lam @ c + 0.5 * rho * (c @ c) + (shifted @ shifted - mu @ mu) / (2.0 * rho)
        grad = der.grad(y) + der.eq_vjp(y, lam + rho * c) + der.ineq_vjp(y, shifted)
        return val, grad

    prev_viol = constraint_violation(nlp, z)
    status = Status.iteration_cap
    outer = 0
    for outer in range(1, config.max_outer + 1):
        res = minimize(
            aug, z, jac=True, method="L-BFGS-B", bounds=bounds if has_bounds else None,
            options={"maxiter": config.max_inner, "maxcor": config.memory,
                     "gtol": 0.1 * config.optimality_tol, "ftol": 1e-15, "maxls": 40},
        )
        inner_total += int(res.nit)
        if np.all(np.isfinite(res.x)) and np.isfinite(res.fun):
            z = res.x
        elif state["bad"] > 0 and best is None:
            status = Status.infeasible
            break

        c = nlp.eq(z)
        g = nlp.ineq(z)
        viol = constraint_violation(nlp, z)
        lam = np.clip(lam + rho * c, -MULTIPLIER_CLIP, MULTIPLIER_CLIP)
        mu = np.clip(np.maximum(0.0, mu + rho * g), 0.0, MULTIPLIER_CLIP)
        f = float(nlp.objective(z))
        obj_hist.append(f)
        viol_hist.append(viol)
        kkt = kkt_residual(nlp, z, lam, mu, config.fd_step)
        log.debug("outer %d: f=%.10g viol=%.3e kkt=%.3e rho=%.1e inner=%d",
                  outer, f, viol, kkt, rho, res.nit)
        if viol <= config.feasibility_tol and (best is None or f < best[1] or best[2] > config.feasibility_tol):
            best = (z.copy(), f, viol, kkt, lam.copy(), mu.copy())
        if viol <= config.feasibility_tol and kkt <= config.optimality_tol:
            status = Status.optimal
            break
        if viol > 0.25 * prev_viol and viol > config.feasibility_tol:
            rho = min(rho * config.penalty_growth, config.penalty_max)
        prev_viol = viol

    if status is not Status.optimal:
        if best is not None:
            z, _, _, _, lam, mu = best
            if status is Status.iteration_cap:
                status = Status.feasible_stalled
        elif status is not Status.infeasible:
            status = Status.iteration_cap if constraint_violation(nlp, z) <= 1e3 * config.feasibility_tol else Status.infeasible

    viol = constraint_violation(nlp, z)
    kkt = kkt_residual(nlp, z, lam, mu, config.fd_step)
    report = SolveReport(
        status=status,
        kkt_residual=kkt,
        constraint_violation=viol,
        outer_iters=outer,
        inner_iters=inner_total,
        objective=float(nlp.objective(z)),
        objective_history=obj_hist,
        violation_history=viol_hist,
        eq_multipliers=lam,
        ineq_multipliers=mu,
    )
    return z, report
