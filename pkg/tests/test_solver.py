import numpy as np
import pytest

from ensemblectl.elimination import Eliminator, StagedNlp, StateSolveError, reduce
from ensemblectl.solver import (
    SolverConfig,
    Status,
    constraint_violation,
    kkt_residual,
    solve,
)
from ensemblectl.transcription import (
    EnsembleProblem,
    NlpProblem,
    build_grid,
    fd_jacobian,
    initial_guess,
    transcribe,
)


def quad_nlp(**kw):
    # min (x-1)^2 + (y-2)^2  s.t.  x + y = 1
    base = dict(
        num_vars=2,
        objective=lambda z: (z[0] - 1) ** 2 + (z[1] - 2) ** 2,
        gradient=lambda z: np.array([2 * (z[0] - 1), 2 * (z[1] - 2)]),
        eq_constraints=lambda z: np.array([z[0] + z[1] - 1]),
        eq_vjp=lambda z, v: np.array([v[0], v[0]]),
        num_eq=1,
    )
    base.update(kw)
    return NlpProblem(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(feasibility_tol=0)
    with pytest.raises(ValueError):
        SolverConfig(penalty_growth=1.0)
    with pytest.raises(ValueError):
        SolverConfig(max_outer=0)


def test_equality_constrained_quadratic():
    z, rep = solve(quad_nlp(), np.zeros(2))
    assert rep.status is Status.optimal
    assert np.allclose(z, [0.0, 1.0], atol=1e-6)
    assert rep.eq_multipliers[0] == pytest.approx(2.0, abs=1e-5)
    assert rep.kkt_residual <= 1e-6


def test_fd_fallbacks_give_same_answer():
    z, rep = solve(quad_nlp(gradient=None, eq_vjp=None), np.zeros(2))
    assert rep.status is Status.optimal
    assert np.allclose(z, [0.0, 1.0], atol=1e-5)


def test_inequality_and_bounds():
    # min -x - y  s.t.  x^2 + y^2 <= 1, x <= 0.5
    nlp = NlpProblem(
        num_vars=2,
        objective=lambda z: -z[0] - z[1],
        gradient=lambda z: np.array([-1.0, -1.0]),
        ineq_constraints=lambda z: np.array([z @ z - 1]),
        ineq_vjp=lambda z, v: 2 * v[0] * z,
        num_ineq=1,
        lower=np.array([-np.inf, -np.inf]),
        upper=np.array([0.5, np.inf]),
    )
    z, rep = solve(nlp, np.zeros(2))
    assert rep.status is Status.optimal
    assert np.allclose(z, [0.5, np.sqrt(0.75)], atol=1e-5)
    assert rep.ineq_multipliers[0] > 0


def test_infeasible_problem_is_reported():
    nlp = quad_nlp(
        eq_constraints=lambda z: np.array([z[0] + z[1] - 1, z[0] + z[1] - 3]),
        eq_vjp=lambda z, v: np.array([v.sum(), v.sum()]),
        num_eq=2,
    )
    z, rep = solve(nlp, np.zeros(2), SolverConfig(max_outer=8))
    assert rep.status is Status.infeasible
    assert rep.constraint_violation >= 0.99


def test_iteration_cap_without_feasible_point():
    z, rep = solve(quad_nlp(), np.array([5.0, 5.0]), SolverConfig(max_outer=1, max_inner=1))
    assert rep.status in (Status.iteration_cap, Status.infeasible)
    assert rep.outer_iters == 1


def test_bad_starting_point():
    with pytest.raises(ValueError):
        solve(quad_nlp(), np.zeros(3))
    with pytest.raises(ValueError):
        solve(quad_nlp(), np.array([np.nan, 0.0]))


def test_kkt_residual_and_violation():
    nlp = quad_nlp()
    assert constraint_violation(nlp, np.array([1.0, 1.0])) == pytest.approx(1.0)
    assert kkt_residual(nlp, np.array([0.0, 1.0]), np.array([2.0])) < 1e-9
    assert kkt_residual(nlp, np.array([0.0, 1.0]), np.array([0.0])) == pytest.approx(2.0)


def bang_problem(N=8):
    # min -x(T), xdot = u, |u| <= 1, x(0) = 0, T = 1: optimum -1 with u = 1
    prob = EnsembleProblem(
        state_dim=1,
        control_dim=1,
        dynamics=lambda t, s, x, u: np.broadcast_to(u, x.shape),
        initial_state=np.zeros(1),
        terminal_cost=lambda T, x: -x[..., 0],
        control_bound=1.0,
        horizon=1.0,
        time_dependent=False,
        linear_in_state=True,
    )
    grid = build_grid(prob, N, [])
    return prob, grid, transcribe(prob, grid)


def test_bang_bang_toy_full_space():
    prob, grid, nlp = bang_problem()
    z, rep = solve(nlp, initial_guess(prob, grid))
    assert rep.status in (Status.optimal, Status.feasible_stalled)
    assert abs(rep.objective + 1.0) <= 1e-4
    assert rep.constraint_violation <= 1e-6


def test_bang_bang_toy_reduced_space():
    prob, grid, nlp = bang_problem()
    red = reduce(nlp)
    y, rep = solve(red, red.restrict(initial_guess(prob, grid)))
    assert abs(rep.objective + 1.0) <= 1e-4
    X = nlp.layout.unpack(red.lift(y))[0]
    assert X[-1, 0, 0] == pytest.approx(1.0, abs=1e-4)


def test_determinism_byte_exact():
    prob, grid, nlp = bang_problem()
    z0 = initial_guess(prob, grid)
    a, ra = solve(nlp, z0)
    b, rb = solve(nlp, z0)
    assert a.tobytes() == b.tobytes()
    assert ra.objective_history == rb.objective_history
    c, _ = solve(nlp, z0, SolverConfig(seed=3))
    d, _ = solve(nlp, z0, SolverConfig(seed=3))
    assert c.tobytes() == d.tobytes()


# -- state elimination -----------------------------------------------------------


def bloch_problem(free=False, **kw):
    from ensemblectl import bloch

    p = bloch.BlochParams(B=1, delta=0.1, amplitude_bound=2, duration=3.0, frequency_profile=np.sin)
    base = dict(
        state_dim=3,
        control_dim=2,
        dynamics=lambda t, s, x, u: bloch.bloch_rhs(t, s, x, u, p),
        dynamics_jacobian=lambda t, s, x, u: bloch.bloch_jacobians(t, s, x, u, p),
        param_box=[(-1, 1), (0.9, 1.1)],
        initial_state=lambda s: np.array([0.0, 0.0, 1.0]),
        terminal_cost=lambda T, x: x[..., 2] + 0.1 * x[..., 0] ** 2,
        running_cost=lambda x, u: 0.01 * np.sum(u * u, axis=-1) + 0.1,
        control_bound=2.0,
        horizon=(0.5, 3.0) if free else 3.0,
        linear_in_state=True,
        resolution_penalty=10.0,
        bound_oversample=2,
    )
    base.update(kw)
    return EnsembleProblem(**base)


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(1e-12, np.max(np.abs(b)))


@pytest.mark.parametrize("free", [False, True])
def test_reduced_gradient_matches_finite_differences(free):
    prob = bloch_problem(free)
    grid = build_grid(prob, 8, [3, 2])
    nlp = transcribe(prob, grid)
    red = reduce(nlp)
    y = np.random.default_rng(0).uniform(-1, 1, red.num_vars)
    if free:
        y[-1] = 2.0
    assert rel_err(red.gradient(y), fd_jacobian(red.objective, y, 1e-7)) <= 1e-4
    v = np.random.default_rng(1).standard_normal(red.num_ineq)
    assert rel_err(red.ineq_vjp(y, v), v @ fd_jacobian(red.ineq, y, 1e-7)) <= 1e-4
    # lifted point satisfies every collocation and initial-state equality
    z = red.lift(y)
    assert np.max(np.abs(nlp.eq(z))) < 1e-12


def test_eliminator_needs_integral_form_and_initial_state():
    prob = bloch_problem()
    grid = build_grid(prob, 6, [2, 2])
    with pytest.raises(ValueError):
        Eliminator(transcribe(prob, grid, form="differential").transcription)
    tr = transcribe(bloch_problem(initial_state=None), grid).transcription
    with pytest.raises(ValueError):
        Eliminator(tr).states(np.zeros((7, 2)))


def test_nonlinear_state_solve_converges():
    # xdot = -x^3 + u (not linear in x): Newton needs several steps
    prob = EnsembleProblem(
        state_dim=1,
        control_dim=1,
        dynamics=lambda t, s, x, u: -s[..., :1] * x**3 + u,
        param_box=[(0.5, 1.5)],
        initial_state=np.ones(1),
        terminal_cost=lambda T, x: x[..., 0] ** 2,
        horizon=1.0,
    )
    grid = build_grid(prob, 10, [3])
    nlp = transcribe(prob, grid)
    red = reduce(nlp)
    y = 0.3 * np.ones(red.num_vars)
    assert np.max(np.abs(nlp.eq(red.lift(y)))) < 1e-12
    assert rel_err(red.gradient(y), fd_jacobian(red.objective, y, 1e-7)) <= 1e-4


def test_state_solve_failure_raises():
    prob = EnsembleProblem(
        state_dim=1,
        control_dim=1,
        dynamics=lambda t, s, x, u: x**2 + u,
        initial_state=np.ones(1),
        terminal_cost=lambda T, x: x[..., 0],
        horizon=5.0,
    )
    grid = build_grid(prob, 6, [])
    red = reduce(transcribe(prob, grid))
    with pytest.raises(StateSolveError):
        red.objective(np.full(red.num_vars, 50.0))


def test_staged_gradient_and_chaining():
    from ensemblectl import bloch

    p = bloch.BlochParams(B=1, delta=0.1, amplitude_bound=2, duration=1.5)
    probs = [bloch_problem(horizon=1.5, dynamics=lambda t, s, x, u: bloch.bloch_rhs(t, s, x, u, p),
                           dynamics_jacobian=lambda t, s, x, u: bloch.bloch_jacobians(t, s, x, u, p),
                           running_cost=lambda x, u: 0.01 * np.sum(u * u, axis=-1), time_dependent=False)
             for _ in range(3)]
    grids = [build_grid(q, 6, [2, 2]) for q in probs]
    trs = [transcribe(q, g).transcription for q, g in zip(probs, grids)]
    staged = StagedNlp(trs)
    y = np.random.default_rng(4).uniform(-1, 1, staged.num_vars)
    assert rel_err(staged.gradient(y), fd_jacobian(staged.objective, y, 1e-7)) <= 1e-4
    zs = staged.lift(y)
    for (z1, t1), (z2, t2) in zip(zip(zs[:-1], trs[:-1]), zip(zs[1:], trs[1:])):
        assert np.array_equal(t1.layout.unpack(z1)[0][-1], t2.layout.unpack(z2)[0][0])
    v = np.random.default_rng(5).standard_normal(staged.num_ineq)
    assert rel_err(staged.ineq_vjp(y, v), v @ fd_jacobian(staged.ineq, y, 1e-7)) <= 1e-4
    with pytest.raises(ValueError):
        StagedNlp([transcribe(bloch_problem(free=True), grids[0]).transcription])
