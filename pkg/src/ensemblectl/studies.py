"""Bloch-ensemble pulse design studies.

Four experiments are provided: a broadband, rf-robust inversion pulse; a
three-stage sequence robust to the initial conditions it inherits; a
single-spin pi/2 transfer under a time-varying frequency with three cost
choices; and a convergence sweep over time and frequency orders.  Every
reported score comes from re-simulating the optimised controls with the RK4
validator in :mod:`ensemblectl.bloch` on a grid denser than the collocation
grid, never from the collocation states themselves.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import bloch
from .bloch import AXES, BlochParams
from .elimination import StagedNlp, reduce
from .solver import SolverConfig, Status, solve
from .transcription import (
    EnsembleProblem,
    PulseSolution,
    build_grid,
    extract_solution,
    initial_guess,
    transcribe,
)

log = logging.getLogger(__name__)

STUDY_NAMES = ("robust_pi", "three_stage", "time_varying", "convergence")
THREE_STAGE_MODES = ("concatenated", "simultaneous")
COST_CHOICES = ("terminal_only", "energy", "time")
DEFAULT_STAGES = (("z->y", 1 / 3), ("y->-y", 1 / 3), ("-y->z", 1 / 3))
VALIDATION_FACTOR = 4
THREADS_ENV = "ENSEMBLECTL_THREADS"


def thread_count(requested: Optional[int] = None) -> int:
    """Worker count: ``requested`` (default: CPU count) capped by ``ENSEMBLECTL_THREADS``."""
    n = requested or os.cpu_count() or 1
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            cap = int(env)
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be a positive integer, got {env!r}") from None
        if cap < 1:
            raise ValueError(f"{THREADS_ENV} must be a positive integer, got {env!r}")
        n = min(n, cap)
    return max(1, n)


def parse_transfer(text: str) -> tuple[np.ndarray, np.ndarray]:
    """``"z->y"`` to a pair of unit vectors."""
    try:
        a, b = (p.strip() for p in text.split("->"))
        return AXES[a], AXES[b]
    except (ValueError, KeyError):
        raise ValueError(f"bad transfer {text!r}; expected e.g. 'z->y' with axes in {sorted(AXES)}") from None


@dataclass
class Regularization:
    """Penalties that keep optimised pulses inside what the grid resolves.

    ``resolution_penalty`` weighs the energy in the top ``resolution_modes``
    Legendre coefficients of the state trajectories (``None``: a quarter of
    the time order).  ``control_smoothness`` weighs ``int |d^p u/dt^p|^2``
    with ``p = smoothness_order``.  The amplitude bound is imposed on a
    ``bound_oversample``-times denser grid of the control interpolant.
    """

    resolution_penalty: float = 3000.0
    resolution_modes: Optional[int] = None
    control_smoothness: float = 1e-4
    smoothness_order: int = 2
    bound_oversample: int = 10

    def __post_init__(self):
        if self.resolution_penalty < 0 or self.control_smoothness < 0:
            raise ValueError("regularization weights must be non-negative")
        if self.smoothness_order < 1 or self.bound_oversample < 1:
            raise ValueError("smoothness_order and bound_oversample must be >= 1")
        if self.resolution_modes is not None and self.resolution_modes < 1:
            raise ValueError("resolution_modes must be >= 1")

    def modes(self, N: int) -> int:
        return self.resolution_modes if self.resolution_modes is not None else max(1, N // 4)


def default_regularization(name: str) -> Regularization:
    # the H^2 control penalty is stiff (eigenvalues grow like N^8) and stalls
    # the solver at N = 40; a light H^1 penalty keeps the sweep well resolved
    if name == "convergence":
        return Regularization(control_smoothness=1e-5, smoothness_order=1)
    return Regularization()


@dataclass
class StudySpec:
    """Configuration of one study.

    ``orders`` is ``(N, N_omega, N_epsilon)``.  ``cost_weights`` is
    ``(terminal, energy, time)``; the terminal term is the ensemble average
    of the score, so it does not grow with the size of the parameter box.
    ``validation_points`` overrides the dense validation lattice, by default
    ``4 * order + 1`` points per non-degenerate parameter.
    """

    name: str
    bloch: BlochParams = field(default_factory=BlochParams)
    orders: tuple = (32, 10, 4)
    cost_weights: tuple = (1.0, 1e-3, 0.0)
    stages: Optional[list] = None
    sweep: Optional[dict] = None
    mode: str = "simultaneous"
    cost_choice: str = "terminal_only"
    horizon_min: float = 0.05
    regularization: Optional[Regularization] = None
    validation_points: Optional[tuple] = None
    validation_steps: int = 4000
    threshold: Optional[float] = None
    threads: Optional[int] = None

    def __post_init__(self):
        if self.name not in STUDY_NAMES:
            raise ValueError(f"name must be one of {STUDY_NAMES}, got {self.name!r}")
        self.orders = tuple(int(o) for o in self.orders)
        if len(self.orders) != 3:
            raise ValueError("orders must be (N, N_omega, N_epsilon)")
        if self.orders[0] < 2:
            raise ValueError(f"time order N must be >= 2, got {self.orders[0]}")
        if min(self.orders[1:]) < 1:
            raise ValueError("parameter orders must be >= 1")
        self.cost_weights = tuple(float(w) for w in self.cost_weights)
        if len(self.cost_weights) != 3:
            raise ValueError("cost_weights must be (terminal, energy, time)")
        if min(self.cost_weights) < 0 or max(self.cost_weights) == 0:
            raise ValueError("cost_weights must be non-negative and not all zero")
        if self.mode not in THREE_STAGE_MODES:
            raise ValueError(f"mode must be one of {THREE_STAGE_MODES}")
        if self.cost_choice not in COST_CHOICES:
            raise ValueError(f"cost_choice must be one of {COST_CHOICES}")
        if self.stages is not None:
            self.stages = [(str(t), float(f)) for t, f in self.stages]
            if not self.stages:
                raise ValueError("stages must be non-empty")
            for t, f in self.stages:
                parse_transfer(t)
                if not f > 0:
                    raise ValueError("stage duration fractions must be positive")
            if abs(sum(f for _, f in self.stages) - 1.0) > 1e-9:
                raise ValueError("stage duration fractions must sum to 1")
        if self.sweep is not None:
            for key in ("N", "N_omega"):
                vals = list(self.sweep.get(key, ()))
                if not vals:
                    raise ValueError(f"sweep.{key} must be a non-empty list")
            if min(self.sweep["N"]) < 2:
                raise ValueError("sweep.N values must be >= 2")
            if min(self.sweep["N_omega"]) < 1:
                raise ValueError("sweep.N_omega values must be >= 1")
        if self.validation_points is not None:
            self.validation_points = tuple(int(v) for v in self.validation_points)
            if len(self.validation_points) != 2 or min(self.validation_points) < 1:
                raise ValueError("validation_points must be two positive integers")
        if self.regularization is None:
            self.regularization = default_regularization(self.name)
        if not 0 < self.horizon_min < self.bloch.duration:
            raise ValueError("horizon_min must lie in (0, duration)")
        if self.validation_steps < 100:
            raise ValueError("validation_steps must be >= 100")


@dataclass
class RobustnessReport:
    """RK4-validated score of a pulse over a dense (omega, epsilon) lattice.

    ``values[i, j]`` is the scored quantity at ``(omega[i], epsilon[j])``.
    With ``sense == "max"`` larger is better and ``worst`` is the minimum;
    with ``"min"`` the reverse.
    """

    omega: np.ndarray
    epsilon: np.ndarray
    values: np.ndarray
    quantity: str
    sense: str
    threshold: Optional[float] = None

    @property
    def average(self) -> float:
        return float(np.mean(self.values))

    @property
    def worst(self) -> float:
        return float(np.min(self.values) if self.sense == "max" else np.max(self.values))

    @property
    def passed(self) -> Optional[bool]:
        if self.threshold is None:
            return None
        if self.sense == "max":
            return self.average >= self.threshold
        return self.average <= self.threshold

    def rows(self):
        for i, w in enumerate(self.omega):
            for j, e in enumerate(self.epsilon):
                yield float(w), float(e), float(self.values[i, j])

    def summary(self) -> dict:
        return {"quantity": self.quantity, "sense": self.sense, "average": self.average,
                "worst": self.worst, "threshold": self.threshold, "passed": self.passed,
                "grid": [len(self.omega), len(self.epsilon)]}


# -- problem construction ------------------------------------------------------


def _box(params: BlochParams):
    return [params.omega_range, params.epsilon_range]


def _volume(box) -> float:
    return float(np.prod([b - a if b > a else 1.0 for a, b in box]))


def bloch_problem(params: BlochParams, initial, target, weights, horizon,
                  reg: Regularization, N: int, box=None) -> EnsembleProblem:
    """Ensemble problem steering ``initial`` towards ``target``.

    Cost: ``-w_t * mean_s <M(T, s), target>  +  int (w_e |u|^2 + w_time) dt``
    plus the regularisation penalties.  ``initial`` is a 3-vector or a
    ``(K, 3)`` array matching the collocation samples.
    """
    w_t, w_e, w_time = weights
    box = _box(params) if box is None else box
    vol = _volume(box)
    tgt = np.asarray(target, dtype=float)
    scale = w_t / vol

    def running(x, u):
        return w_e * np.sum(u * u, axis=-1) + w_time

    def running_grad(x, u):
        return None, 2.0 * w_e * u

    init = np.asarray(initial, dtype=float)
    return EnsembleProblem(
        state_dim=3,
        control_dim=2,
        dynamics=lambda t, s, x, u: bloch.bloch_rhs(t, s, x, u, params),
        dynamics_jacobian=lambda t, s, x, u: bloch.bloch_jacobians(t, s, x, u, params),
        param_box=box,
        initial_state=lambda s: np.broadcast_to(init, (len(s), 3)) if init.ndim == 1 else init,
        terminal_cost=lambda T, x: -scale * (x @ tgt),
        terminal_cost_grad=lambda T, x: np.broadcast_to(-scale * tgt, x.shape),
        running_cost=running if (w_e or w_time) else None,
        running_cost_grad=running_grad,
        control_bound=params.amplitude_bound,
        horizon=horizon,
        time_dependent=params.frequency_profile is not None,
        linear_in_state=True,
        control_smoothness=reg.control_smoothness,
        smoothness_order=reg.smoothness_order,
        resolution_penalty=reg.resolution_penalty,
        resolution_modes=reg.modes(N),
        bound_oversample=reg.bound_oversample,
    )


def rotation_guess(source, target, duration: float, bound: float):
    """Constant control rotating ``source`` onto ``target`` in ``duration``.

    ``u`` drives rotations about y and ``v`` about x, so the rotation axis
    must lie in the transverse plane; antiparallel pairs rotate about the
    transverse axis orthogonal to ``source``.  The amplitude is clipped to
    ``bound``.
    """
    a = np.asarray(source, dtype=float)
    b = np.asarray(target, dtype=float)
    axis = np.cross(a, b)
    angle = float(np.arctan2(np.linalg.norm(axis), a @ b))
    axis[2] = 0.0
    if np.linalg.norm(axis) < 1e-12:
        axis = np.cross(a, [0.0, 0.0, 1.0])
        if np.linalg.norm(axis) < 1e-12:
            axis = np.array([0.0, 1.0, 0.0])
    axis = axis / np.linalg.norm(axis)
    rate = min(angle / duration, bound)
    uv = rate * np.array([axis[1], axis[0]])
    return lambda t: np.tile(uv, (np.size(t), 1))


def _solve_single(problem: EnsembleProblem, N: int, param_orders, guess, horizon_guess, config):
    grid = build_grid(problem, N, param_orders)
    nlp = transcribe(problem, grid)
    red = reduce(nlp)
    z0 = initial_guess(problem, grid, "given_controls", controls=guess, horizon=horizon_guess)
    y, report = solve(red, red.restrict(z0), config)
    z = red.lift(y)
    return extract_solution(nlp, z, grid, problem, report.as_dict()), report


def _check_status(report, what: str):
    if report.status is Status.infeasible:
        raise RuntimeError(f"{what}: solver reported an infeasible problem "
                           f"(violation {report.constraint_violation:.3g})")


# -- validation ------------------------------------------------------------------


def validation_axes(params: BlochParams, orders, points=None):
    """Dense validation lattice, at least 4x the collocation order per dimension."""
    axes = []
    for k, (a, b) in enumerate(_box(params)):
        if b <= a:
            axes.append(np.array([a]))
            continue
        n = points[k] if points is not None else VALIDATION_FACTOR * orders[k] + 1
        axes.append(np.linspace(a, b, n))
    return axes


def _lattice(axes):
    w, e = np.meshgrid(axes[0], axes[1], indexing="ij")
    return np.stack([w.ravel(), e.ravel()], axis=1)


def simulate_parallel(params, controls, initial, samples, steps, duration=None, threads=None):
    """:func:`bloch.simulate` split over sample chunks; output order is fixed."""
    samples = np.asarray(samples, dtype=float)
    init = np.asarray(initial, dtype=float)
    n = min(thread_count(threads), len(samples))
    if n <= 1:
        return bloch.simulate(params, controls, init, samples, steps=steps, duration=duration)
    chunks = np.array_split(np.arange(len(samples)), n)

    def run(idx):
        x0 = init if init.ndim == 1 else init[idx]
        return bloch.simulate(params, controls, x0, samples[idx], steps=steps, duration=duration)

    with ThreadPoolExecutor(max_workers=n) as pool:
        parts = list(pool.map(run, chunks))
    return np.concatenate(parts, axis=0)


def validate_controls(params, controls, duration, initial, axes, steps, threads=None):
    """Terminal magnetisation on the lattice ``axes``, shape ``(n_omega, n_eps, 3)``."""
    samples = _lattice(axes)
    out = simulate_parallel(params, controls, initial, samples, steps, duration, threads)
    return out.reshape(len(axes[0]), len(axes[1]), 3)


def _report(axes, values, quantity, sense, threshold=None) -> RobustnessReport:
    return RobustnessReport(axes[0], axes[1], values, quantity, sense, threshold)


def oracle_gap(solution: PulseSolution, params: BlochParams, initial, steps: int = 4000) -> float:
    """Max abs difference between collocation and RK4 terminal states at the collocation samples."""
    ref = bloch.simulate(params, solution.control_at, initial, solution.param_points,
                         steps=steps, duration=solution.horizon)
    return float(np.max(np.abs(ref - solution.terminal_states)))


def max_interpolant_norm(solution: PulseSolution, oversample: int = 10) -> float:
    """Largest control norm on an ``oversample``-times denser uniform time grid."""
    t = np.linspace(0.0, solution.horizon, oversample * solution.grid.N + 1)
    return float(np.max(np.linalg.norm(solution.control_at(t), axis=1)))


# -- studies ------------------------------------------------------------------------


def default_solver_config(name: str) -> SolverConfig:
    # outer/inner budgets tuned for desk-scale runtimes; optimality to 1e-6
    # is rarely reached on the ensemble problems, which then stop on the cap
    budgets = {"robust_pi": (6, 400), "three_stage": (6, 400),
               "time_varying": (20, 500), "convergence": (6, 400)}
    outer, inner = budgets[name]
    return SolverConfig(max_outer=outer, max_inner=inner)


def _expect(spec: StudySpec, name: str):
    if spec.name != name:
        raise ValueError(f"expected a {name} spec, got {spec.name!r}")


def run_robust_pi(spec: StudySpec, config: Optional[SolverConfig] = None):
    """Broadband, rf-robust inversion ``z -> -z``.

    Returns ``(PulseSolution, RobustnessReport)``; the report scores
    ``M_z(T)`` (lower is better) on the validation lattice.
    """
    _expect(spec, "robust_pi")
    config = config or default_solver_config(spec.name)
    p = spec.bloch
    N, n_w, n_e = spec.orders
    z, mz = AXES["z"], AXES["-z"]
    problem = bloch_problem(p, z, mz, spec.cost_weights[:2] + (0.0,), p.duration, spec.regularization, N)
    guess = rotation_guess(z, mz, p.duration, p.amplitude_bound)
    sol, rep = _solve_single(problem, N, [n_w, n_e], guess, None, config)
    _check_status(rep, "robust_pi")
    axes = validation_axes(p, (n_w, n_e), spec.validation_points)
    M = validate_controls(p, sol.control_at, sol.horizon, z, axes, spec.validation_steps, spec.threads)
    return sol, _report(axes, M[..., 2], "M_z", "min", spec.threshold)


@dataclass
class StageResult:
    transfer: str
    solution: PulseSolution
    report: RobustnessReport


def _stage_list(spec: StudySpec):
    stages = spec.stages if spec.stages is not None else list(DEFAULT_STAGES)
    out = []
    for text, frac in stages:
        a, b = parse_transfer(text)
        out.append((text, a, b, frac * spec.bloch.duration))
    for (t1, _, b1, _), (t2, a2, _, _) in zip(out[:-1], out[1:]):
        if not np.array_equal(b1, a2):
            raise ValueError(f"stage {t2!r} does not start where {t1!r} ends")
    return out


def run_three_stage(spec: StudySpec, mode: Optional[str] = None, config: Optional[SolverConfig] = None):
    """Sequence of transfers scored by ``<M, target>`` at every stage boundary.

    ``concatenated`` optimises each stage on its own from the uniform nominal
    initial state; ``simultaneous`` then re-optimises all stages in one
    problem whose per-sample trajectories run continuously through the
    boundaries, starting from the concatenated controls.  Either
    way the validation chains the stages by RK4, so stage ``i + 1`` starts
    from the actual, parameter-dependent terminal states of stage ``i``.

    Returns ``(solutions, reports)``, one per stage.
    """
    _expect(spec, "three_stage")
    mode = mode or spec.mode
    if mode not in THREE_STAGE_MODES:
        raise ValueError(f"mode must be one of {THREE_STAGE_MODES}")
    config = config or default_solver_config(spec.name)
    p = spec.bloch
    N, n_w, n_e = spec.orders
    stages = _stage_list(spec)
    weights = spec.cost_weights[:2] + (0.0,)
    problems = [bloch_problem(p, a, b, weights, T, spec.regularization, N) for _, a, b, T in stages]
    guesses = [rotation_guess(a, b, T, p.amplitude_bound) for _, a, b, T in stages]

    solutions = []
    for (text, *_), prob, guess in zip(stages, problems, guesses):
        sol, rep = _solve_single(prob, N, [n_w, n_e], guess, None, config)
        _check_status(rep, f"three_stage stage {text}")
        solutions.append(sol)
    if mode == "simultaneous":
        # warm start from the independently optimised stages
        solutions = _solve_staged(problems, N, [n_w, n_e], [s.controls for s in solutions], config)

    axes = validation_axes(p, (n_w, n_e), spec.validation_points)
    M = np.broadcast_to(stages[0][1], (len(axes[0]) * len(axes[1]), 3))
    reports = []
    for (text, _, b, T), sol in zip(stages, solutions):
        M = simulate_parallel(p, sol.control_at, M, _lattice(axes), spec.validation_steps, T, spec.threads)
        score = (M @ b).reshape(len(axes[0]), len(axes[1]))
        reports.append(_report(axes, score, f"M.{text.split('->')[1].strip()}", "max", spec.threshold))
    return solutions, reports


def _solve_staged(problems, N, param_orders, initial_controls, config):
    grids = [build_grid(prob, N, param_orders) for prob in problems]
    nlps = [transcribe(prob, g) for prob, g in zip(problems, grids)]
    staged = StagedNlp([n.transcription for n in nlps])
    y0 = np.concatenate([np.asarray(U, dtype=float).ravel() for U in initial_controls])
    y, report = solve(staged, y0, config)
    _check_status(report, "three_stage (simultaneous)")
    zs = staged.lift(y)
    stats = report.as_dict()
    return [extract_solution(nlp, z, g, prob, stats) for nlp, z, g, prob in zip(nlps, zs, grids, problems)]


def run_time_varying(spec: StudySpec, cost_choice: Optional[str] = None,
                     config: Optional[SolverConfig] = None) -> tuple[PulseSolution, float]:
    """Single spin ``z -> x`` under ``omega(t)`` from ``spec.bloch.frequency_profile``.

    Free terminal time in ``[spec.horizon_min, bloch.duration]``.  The
    running cost is zero, ``w_e |u|^2`` or ``w_time`` for the three cost
    choices.  Returns the solution and the RK4 re-simulated ``M_x(T)``.
    """
    _expect(spec, "time_varying")
    choice = cost_choice or spec.cost_choice
    if choice not in COST_CHOICES:
        raise ValueError(f"cost_choice must be one of {COST_CHOICES}")
    config = config or default_solver_config(spec.name)
    p = spec.bloch
    if p.B != 0 or p.delta != 0:
        raise ValueError("the time-varying study is a single system: set B = 0 and delta = 0")
    w_t, w_e, w_time = spec.cost_weights
    weights = {"terminal_only": (w_t, 0.0, 0.0), "energy": (w_t, w_e, 0.0), "time": (w_t, 0.0, w_time)}[choice]
    if weights[0] == 0:
        raise ValueError("the time-varying study needs a positive terminal weight")
    N = spec.orders[0]
    horizon = (spec.horizon_min, p.duration)
    z, x = AXES["z"], AXES["x"]
    problem = bloch_problem(p, z, x, weights, horizon, spec.regularization, N)
    # full amplitude about y (which carries z towards x) at 80% of the longest horizon
    T0 = 0.8 * p.duration
    guess = lambda t: np.tile([p.amplitude_bound, 0.0], (np.size(t), 1))
    sol, rep = _solve_single(problem, N, [1, 1], guess, T0, config)
    _check_status(rep, f"time_varying ({choice})")
    mx = bloch.simulate(p, sol.control_at, z, [[0.0, 1.0]], steps=spec.validation_steps, duration=sol.horizon)
    return sol, float(mx[0, 0])


def control_energy(solution: PulseSolution) -> float:
    """``int (u^2 + v^2) dt`` of the control interpolant (exact LGL quadrature)."""
    w = solution.grid.time_grid.weights
    return float(0.5 * solution.horizon * np.dot(w, np.sum(solution.controls**2, axis=1)))


@dataclass
class ConvergenceCell:
    N: int
    N_omega: int
    avg_Mx: float
    status: str
    error: Optional[str] = None
    oracle_gap: float = float("nan")


def run_convergence(spec: StudySpec, config: Optional[SolverConfig] = None) -> list[ConvergenceCell]:
    """pi/2 transfer ``z -> x`` over ``omega in [-B, B]`` for every (N, N_omega) cell.

    The rf scaling is fixed at 1.  Each cell's score is the RK4 average of
    ``M_x(T)`` over one shared validation grid, 4x denser than the largest
    ``N_omega``.  Failed cells are recorded (``avg_Mx = nan``) and the sweep
    continues.  Cells run concurrently; results keep the sweep order.
    """
    _expect(spec, "convergence")
    config = config or default_solver_config(spec.name)
    sweep = spec.sweep or {"N": [8, 16, 24, 32, 40], "N_omega": [2, 4, 8, 12]}
    Ns = [int(n) for n in sweep["N"]]
    Nws = [int(n) for n in sweep["N_omega"]]
    if not Ns or not Nws or min(Nws) < 1 or min(Ns) < 2:
        raise ValueError("sweep needs N >= 2 and N_omega >= 1 values")
    p = replace(spec.bloch, delta=0.0)
    z, x = AXES["z"], AXES["x"]
    if spec.validation_points is not None:
        n_val = spec.validation_points[0]
    else:
        n_val = VALIDATION_FACTOR * max(Nws) + 1
    omega = np.linspace(-p.B, p.B, n_val) if p.B > 0 else np.array([0.0])
    samples = np.stack([omega, np.ones_like(omega)], axis=1)
    guess = rotation_guess(z, x, p.duration, p.amplitude_bound)

    def cell(args):
        N, Nw = args
        try:
            problem = bloch_problem(p, z, x, spec.cost_weights[:2] + (0.0,), p.duration,
                                    spec.regularization, N)
            sol, rep = _solve_single(problem, N, [Nw, 1], guess, None, config)
            _check_status(rep, f"convergence cell N={N}, N_omega={Nw}")
            mx = bloch.simulate(p, sol.control_at, z, samples, steps=spec.validation_steps)[:, 0]
            gap = oracle_gap(sol, p, z, spec.validation_steps)
            return ConvergenceCell(N, Nw, float(np.mean(mx)), rep.status.value, None, gap)
        except Exception as exc:  # recorded, the sweep goes on
            log.warning("convergence cell N=%d N_omega=%d failed: %s", N, Nw, exc)
            return ConvergenceCell(N, Nw, float("nan"), "failed", str(exc))

    cells = [(N, Nw) for N in Ns for Nw in Nws]
    n = min(thread_count(spec.threads), len(cells))
    if n <= 1:
        return [cell(c) for c in cells]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(cell, cells))


# -- serialisation -------------------------------------------------------------------


def write_pulse_csv(path, solution: PulseSolution, samples: int = 2001) -> None:
    """Control interpolant on ``samples`` evenly spaced times, columns ``t,u,v``."""
    t = np.linspace(0.0, solution.horizon, samples)
    uv = solution.control_at(t)
    with open(path, "w") as fh:
        fh.write("t,u,v\n")
        for ti, (u, v) in zip(t, uv):
            fh.write(f"{ti:.12g},{u:.12g},{v:.12g}\n")


def write_robustness_csv(path, report: RobustnessReport) -> None:
    with open(path, "w") as fh:
        fh.write("omega,epsilon,score\n")
        for w, e, s in report.rows():
            fh.write(f"{w:.12g},{e:.12g},{s:.12g}\n")


def write_convergence_csv(path, cells) -> None:
    with open(path, "w") as fh:
        fh.write("N,N_omega,avg_Mx\n")
        for c in cells:
            fh.write(f"{c.N},{c.N_omega},{c.avg_Mx:.12g}\n")


class PulseFormatError(ValueError):
    """Malformed pulse CSV; the message names the offending line."""


def read_pulse_csv(path):
    """Read a ``t,u,v`` pulse.  Returns ``(t, controls)`` with ``t`` shifted to start at 0."""
    rows = []
    with open(path) as fh:
        header = fh.readline()
        if [h.strip() for h in header.split(",")] != ["t", "u", "v"]:
            raise PulseFormatError(f"{path}:1: expected header 't,u,v', got {header.strip()!r}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise PulseFormatError(f"{path}:{lineno}: expected 3 columns, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise PulseFormatError(f"{path}:{lineno}: non-numeric value in {line.strip()!r}") from None
            if not all(np.isfinite(vals)):
                raise PulseFormatError(f"{path}:{lineno}: non-finite value")
            if rows and vals[0] <= rows[-1][0]:
                raise PulseFormatError(f"{path}:{lineno}: time {vals[0]!r} is not increasing")
            rows.append(vals)
    if len(rows) < 2:
        raise PulseFormatError(f"{path}: need at least two samples")
    data = np.array(rows)
    return data[:, 0] - data[0, 0], data[:, 1:]
