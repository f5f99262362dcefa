"""End-to-end acceptance checks, one test per criterion.

Each test records a ``CRITERION n: PASS|FAIL`` line; ``conftest.py`` prints
them in the terminal summary, since pytest captures the per-test prints.
Study runs are cached, so the oracle-separation check reuses the solutions
of the reproduction checks.
"""

from __future__ import annotations

import functools
import sys
import time

import numpy as np
import pytest

from ensemblectl import bloch, spectral, studies
from ensemblectl.bloch import AXES, BlochParams
from ensemblectl.solver import SolverConfig, Status, solve
from ensemblectl.studies import StudySpec

RESULTS: dict[int, str] = {}
GAP_TOL = 1e-3


def record(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line, flush=True)


def timed(fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t0


# -- cached study runs -----------------------------------------------------------------


@functools.lru_cache(maxsize=None)
def robust_pi():
    spec = StudySpec("robust_pi", BlochParams(B=1.0, delta=0.1, amplitude_bound=2.0, duration=7.5398),
                     orders=(32, 10, 4), validation_points=(41, 9))
    (sol, rep), secs = timed(studies.run_robust_pi, spec)
    return spec, sol, rep, secs


@functools.lru_cache(maxsize=None)
def three_stage(mode: str):
    spec = StudySpec("three_stage", BlochParams(B=1.0, delta=0.0, amplitude_bound=2.0, duration=22.6194),
                     orders=(32, 10, 4), mode=mode)
    (sols, reps), secs = timed(studies.run_three_stage, spec)
    return spec, sols, reps, secs


@functools.lru_cache(maxsize=None)
def time_varying(choice: str):
    spec = StudySpec("time_varying",
                     BlochParams(B=0.0, delta=0.0, amplitude_bound=2.0, duration=1.0, frequency_profile=np.sin),
                     orders=(32, 1, 1), cost_weights=(10.0, 0.1, 0.1), cost_choice=choice)
    (sol, mx), secs = timed(studies.run_time_varying, spec)
    return spec, sol, mx, secs


@functools.lru_cache(maxsize=None)
def convergence():
    spec = StudySpec("convergence", BlochParams(B=1.0, delta=0.0, amplitude_bound=10.0, duration=1.0),
                     sweep={"N": [8, 16, 24, 32, 40], "N_omega": [2, 4, 8, 12]})
    cells, secs = timed(studies.run_convergence, spec)
    return spec, cells, secs


# -- criteria --------------------------------------------------------------------------------


def test_criterion_1_spectral_exactness():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    quad_err = diff_err = 0.0
    for N in range(2, 13):
        g = spectral.lgl_grid(N)
        for _ in range(20):
            c = rng.standard_normal(2 * N)  # degree 2N - 1
            p = np.polynomial.Polynomial(c)
            exact = p.integ()(1.0) - p.integ()(-1.0)
            got = spectral.quadrature(p(g.nodes), g, spectral.REFERENCE)
            quad_err = max(quad_err, abs(got - exact) / (1 + abs(exact)))
            q = np.polynomial.Polynomial(rng.standard_normal(N + 1))  # degree N
            d = spectral.differentiate(q(g.nodes), g, spectral.REFERENCE)
            diff_err = max(diff_err, float(np.max(np.abs(d - q.deriv()(g.nodes)))))
    secs = time.perf_counter() - t0
    ok = quad_err <= 1e-11 and diff_err <= 1e-9 and secs < 1.0
    record(1, ok, f"quadrature rel err {quad_err:.2e} (<=1e-11), derivative err {diff_err:.2e} (<=1e-9), {secs:.2f} s (<1 s)")
    assert ok


def test_criterion_2_robust_pi():
    spec, sol, rep, secs = robust_pi()
    ok = rep.average <= -0.98 and rep.values.shape == (41, 9) and secs <= 300
    record(2, ok, f"average M_z(T) {rep.average:.4f} (<=-0.98) on {rep.values.shape[0]}x{rep.values.shape[1]} "
                  f"RK4 grid, worst {rep.worst:.4f}, {secs:.0f} s (<=300 s)")
    assert ok


def test_criterion_3_three_stage_ordering():
    _, _, sim, t_sim = three_stage("simultaneous")
    _, _, con, t_con = three_stage("concatenated")
    sim_worst = min(r.worst for r in sim)
    con_worst = min(r.worst for r in con)
    sim_avgs = [r.average for r in sim]
    secs = t_sim + t_con
    ok = sim_worst >= 0.95 and sim_worst > con_worst and min(sim_avgs) >= 0.98 and secs <= 600
    record(3, ok, f"simultaneous worst {sim_worst:.4f} (>=0.95) > concatenated worst {con_worst:.4f}; "
                  f"simultaneous averages {', '.join(f'{a:.4f}' for a in sim_avgs)} (>=0.98); {secs:.0f} s (<=600 s)")
    assert ok


def test_criterion_4_time_varying():
    runs = {c: time_varying(c) for c in studies.COST_CHOICES}
    mx = {c: r[2] for c, r in runs.items()}
    energy = {c: studies.control_energy(r[1]) for c, r in runs.items()}
    T = {c: r[1].horizon for c, r in runs.items()}
    secs = sum(r[3] for r in runs.values())
    t_max = runs["time"][0].bloch.duration
    ok = (min(mx.values()) >= 0.99 and energy["energy"] < energy["terminal_only"]
          and (T["time"] < T["energy"] or T["time"] < t_max) and secs <= 120)
    record(4, ok, "M_x(T) " + ", ".join(f"{c} {v:.5f}" for c, v in mx.items()) + " (>=0.99); "
                  f"energy {energy['energy']:.3f} < terminal_only {energy['terminal_only']:.3f}; "
                  f"T time {T['time']:.3f} vs energy {T['energy']:.3f} / T_max {t_max:g}; {secs:.0f} s (<=120 s)")
    assert ok


def test_criterion_5_convergence_surface():
    _, cells, secs = convergence()
    by = {(c.N, c.N_omega): c.avg_Mx for c in cells}
    big, small = by[(40, 12)], by[(8, 2)]
    ok = big >= 0.99 and big >= small - 1e-6 and secs <= 1200
    record(5, ok, f"avg M_x(40,12) {big:.5f} (>=0.99), avg M_x(8,2) {small:.5f}; "
                  f"{len(cells)} cells in {secs:.0f} s (<=1200 s)")
    assert ok


def test_criterion_6_oracle_separation():
    gaps = {}
    spec, sol, _, _ = robust_pi()
    gaps["robust_pi"] = studies.oracle_gap(sol, spec.bloch, AXES["z"], spec.validation_steps)
    for mode in studies.THREE_STAGE_MODES:
        spec, sols, _, _ = three_stage(mode)
        for i, s in enumerate(sols, start=1):
            gaps[f"three_stage/{mode}/stage{i}"] = studies.oracle_gap(s, spec.bloch, s.states[0], spec.validation_steps)
    for choice in studies.COST_CHOICES:
        spec, sol, _, _ = time_varying(choice)
        gaps[f"time_varying/{choice}"] = studies.oracle_gap(sol, spec.bloch, AXES["z"], spec.validation_steps)
    _, cells, _ = convergence()
    largest = max(cells, key=lambda c: (c.N, c.N_omega))
    gaps[f"convergence/N={largest.N},N_omega={largest.N_omega}"] = largest.oracle_gap
    worst_key = max(gaps, key=gaps.get)
    ok = all(np.isfinite(g) and g <= GAP_TOL for g in gaps.values())
    record(6, ok, f"max |collocation - RK4| terminal component {gaps[worst_key]:.2e} ({worst_key}) over "
                  f"{len(gaps)} solutions (<=1e-3)")
    assert ok, {k: f"{v:.2e}" for k, v in gaps.items()}


def test_criterion_7_lie_brackets():
    err = 0.0
    for w in (0.3, 1.0, 2.0):
        for k in range(13):  # ad^k for k <= 12 covers the closed forms with index <= 6
            err = max(err, float(np.max(np.abs(bloch.ad_chain(w, k) - bloch.ad_chain_closed_form(w, k)))))
        for j in range(1, 7):
            odd = (-1) ** j * w ** (2 * j - 1) * bloch.OMEGA_X
            even = (-1) ** j * w ** (2 * j) * bloch.OMEGA_Y
            err = max(err, float(np.max(np.abs(bloch.ad_chain(w, 2 * j - 1) - odd))),
                      float(np.max(np.abs(bloch.ad_chain(w, 2 * j) - even))))
    ok = err <= 1e-12
    record(7, ok, f"max entry error {err:.1e} over k<=12, omega in {{0.3, 1, 2}} (<=1e-12)")
    assert ok


def test_criterion_8_unit_conversion():
    rng = np.random.default_rng(8)
    t = np.linspace(0.0, 7.5398, 257)
    uv = rng.uniform(-2, 2, (257, 2))
    err = 0.0
    for amp in (1e3, 1e4, 2.5e4):
        phys = bloch.to_physical((t, uv), amp)
        t2, uv2 = bloch.from_physical(phys, amp)
        err = max(err, float(np.max(np.abs(uv2 - uv))), float(np.max(np.abs(t2 - t))))
    span = bloch.to_physical((t, uv), 10e3).duration
    ok = err <= 1e-12 and abs(span - 120e-6) <= 1e-9
    record(8, ok, f"round-trip error {err:.1e} (<=1e-12); T=7.5398 at 10 kHz spans {span * 1e6:.4f} us (120 us)")
    assert ok


def _bang_bang(N=8):
    from ensemblectl.transcription import EnsembleProblem, build_grid, initial_guess, transcribe

    prob = EnsembleProblem(state_dim=1, control_dim=1, dynamics=lambda t, s, x, u: np.broadcast_to(u, x.shape),
                           initial_state=np.zeros(1), terminal_cost=lambda T, x: -x[..., 0], control_bound=1.0,
                           horizon=1.0, time_dependent=False, linear_in_state=True)
    grid = build_grid(prob, N, [])
    return transcribe(prob, grid), initial_guess(prob, grid)


def test_criterion_9_solver_sanity():
    from ensemblectl.elimination import reduce
    from ensemblectl.transcription import fd_jacobian

    nlp, z0 = _bang_bang()
    z1, r1 = solve(nlp, z0)
    z2, r2 = solve(nlp, z0)
    obj_err = abs(r1.objective + 1.0)
    deterministic = z1.tobytes() == z2.tobytes() and r1.objective_history == r2.objective_history
    red = reduce(nlp)
    y = np.random.default_rng(9).uniform(-0.5, 0.5, red.num_vars)
    g, g_fd = red.gradient(y), fd_jacobian(red.objective, y, 1e-7)
    grad_err = float(np.max(np.abs(g - g_fd)) / max(1e-12, np.max(np.abs(g_fd))))
    ok = obj_err <= 1e-4 and grad_err <= 1e-4 and deterministic and r1.status is not Status.infeasible
    record(9, ok, f"bang-bang objective error {obj_err:.1e} (<=1e-4), gradient rel err {grad_err:.1e} (<=1e-4), "
                  f"byte-exact repeat {deterministic}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
