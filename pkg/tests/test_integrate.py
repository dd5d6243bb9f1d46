import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from daeopt import problems as pr
from daeopt.integrate import (
    IntegrationError,
    ParameterOutOfBoxError,
    SolverConfig,
    Trajectory,
    detect_degeneracy,
    integrate,
    reference_solve,
)


def linear_problem(A, x0, t_span=(0.0, 1.0)):
    A = np.asarray(A, float)
    n = A.shape[0]
    return pr.ParametricDaeProblem(
        name="linear", state_dim=n, param_dim=1, t_span=t_span, lower=[-1.0], upper=[1.0],
        kind=pr.EXPLICIT_ODE, dynamics=lambda t, p, xd, xa: xd @ A.T + p[..., :1] * 0,
        initial_map=lambda p: np.asarray(x0, float), differential=tuple(range(n)))


def test_constant_dynamics():
    problem = linear_problem([[0.0]], [3.0])
    traj = integrate(problem, np.zeros(1))
    assert np.all(traj.states == 3.0)
    assert traj.at(np.array([0.37]))[0, 0] == 3.0


def test_bidiagonal_size_one_terminal_value():
    problem, _ = pr.make_bidiagonal_problem(1)
    traj = reference_solve(problem, np.array([0.5]))
    assert traj.states[-1, 0] == pytest.approx(0.1 + 0.9 * np.exp(-5), abs=1e-11)


def test_cantilever_terminal_value_on_branch():
    problem, _ = pr.make_cantilever_problem()
    traj = reference_solve(problem, np.array([3.0]))
    assert traj.states[-1, 1] == pytest.approx((1 - np.sin(5)) / 4, abs=1e-8)
    assert traj.states[-1, 0] == pytest.approx(-(1 - np.sin(5)) / 4, abs=1e-9)


def test_cantilever_stays_on_branch_everywhere():
    problem, _ = pr.make_cantilever_problem()
    p = np.array([3.4])
    t = np.linspace(0, 5, 201)
    traj = reference_solve(problem, p, output_grid=t)
    y1, y2 = pr.cantilever_branch(t, p[0])
    assert np.max(np.abs(traj.states[:, 0] - y1)) < 1e-9
    # near sin x = 1 the algebraic state is only determined to sqrt(newton_tol)
    assert np.max(np.abs(traj.states[:, 1] - y2)) < 1e-7


def test_semi_explicit_output_satisfies_constraint():
    problem, _ = pr.make_cantilever_problem()
    cfg = SolverConfig(rel_tol=1e-8, abs_tol=1e-10)
    traj = integrate(problem, np.array([3.7]), cfg)
    for t, x in zip(traj.times, traj.states):
        assert abs(problem.g(t, np.array([3.7]), x)[0]) <= cfg.newton_tol


def test_reference_solve_is_reproducible():
    problem, _ = pr.make_scalar_problem()
    a = reference_solve(problem, np.array([-0.6])).states[-1]
    b = reference_solve(problem, np.array([-0.6])).states[-1]
    np.testing.assert_array_equal(a, b)


def test_bidiagonal_objective_at_tabulated_points():
    problem, obj = pr.make_bidiagonal_problem(2)
    # the tabulated 6.50e-08 belongs to the predicted point; p is printed to 4 digits only
    p = np.array([0.5714, 0.4541])
    J = pr.eval_objective_on_trajectory(obj, reference_solve(problem, p), p)
    assert J == pytest.approx(6.5e-8, rel=0.1)
    # at the rounded optimum the objective is far smaller
    p = np.array([0.5721, 0.4544])
    assert pr.eval_objective_on_trajectory(obj, reference_solve(problem, p), p) < 1e-9


@pytest.mark.parametrize("n", range(1, 7))
def test_linear_family_matches_matrix_exponential(n):
    rng = np.random.default_rng(n)
    A = -np.diag(rng.uniform(0.5, 3, n)) + np.tril(rng.normal(scale=0.5, size=(n, n)), -1)
    x0 = rng.normal(size=n)
    cfg = SolverConfig(rel_tol=1e-9, abs_tol=1e-12)
    traj = integrate(linear_problem(A, x0), np.zeros(1), cfg)
    exact = expm(A) @ x0
    err = np.abs(traj.states[-1] - exact)
    assert np.all(err <= 10 * (cfg.rel_tol * np.abs(exact) + cfg.abs_tol))


@pytest.mark.parametrize("n", [1, 3, 10])
def test_bidiagonal_closed_form_within_tolerance(n):
    problem, _ = pr.make_bidiagonal_problem(n)
    p = np.random.default_rng(n).uniform(0, 1, n)
    cfg = SolverConfig(rel_tol=1e-10, abs_tol=1e-12)
    x1 = integrate(problem, p, cfg).states[-1]
    exact = pr.bidiagonal_terminal_state(p, n)
    assert np.all(np.abs(x1 - exact) <= 10 * (cfg.rel_tol * np.abs(exact) + cfg.abs_tol))


def test_halving_tolerance_does_not_increase_error():
    problem, _ = pr.make_bidiagonal_problem(3)
    p = np.array([0.2, 0.5, 0.8])
    exact = pr.bidiagonal_terminal_state(p, 3)
    errs = []
    for k in range(12):
        tol = 1e-5 / 2**k
        x1 = integrate(problem, p, SolverConfig(rel_tol=tol, abs_tol=tol * 1e-2)).states[-1]
        errs.append(np.max(np.abs(x1 - exact)))
    assert all(b <= a for a, b in zip(errs, errs[1:]))


def test_output_grid_is_hit_exactly():
    problem, _ = pr.make_scalar_problem()
    grid = np.linspace(0, 0.9, 7)
    traj = reference_solve(problem, np.array([-0.5]), output_grid=grid)
    np.testing.assert_array_equal(traj.times, grid)


def test_max_step_is_largest_gap():
    problem, _ = pr.make_scalar_problem()
    traj = integrate(problem, np.array([-0.5]))
    assert traj.max_step == np.max(np.diff(traj.times))
    assert traj.times[0] == 0.0 and traj.times[-1] == 0.9


def test_parameter_outside_box():
    problem, _ = pr.make_scalar_problem()
    with pytest.raises(ParameterOutOfBoxError):
        integrate(problem, np.array([0.5]))


def test_step_limit_is_reported():
    problem, _ = pr.make_scalar_problem()
    with pytest.raises(IntegrationError) as err:
        integrate(problem, np.array([-0.5]), SolverConfig(max_steps=2))
    assert err.value.t is not None


def test_unreachable_constraint_raises_newton_error_with_time():
    # g = x2^2 + 1 has no real root
    problem = pr.ParametricDaeProblem(
        name="bad", state_dim=2, param_dim=1, t_span=(0.0, 1.0), lower=[0.0], upper=[1.0], kind=pr.SEMI_EXPLICIT,
        dynamics=lambda t, p, xd, xa: np.zeros_like(xd), initial_map=lambda p: np.array([0.0, 0.0]),
        differential=(0,), algebraic_idx=(1,), algebraic=lambda t, p, x: (x[..., 1] ** 2 + 1.0)[..., None])
    with pytest.raises(IntegrationError) as err:
        integrate(problem, np.array([0.5]))
    assert err.value.t is not None


def test_trajectory_csv_round_trip(tmp_path):
    problem, _ = pr.make_bidiagonal_problem(2)
    traj = integrate(problem, np.array([0.3, 0.6]))
    traj.to_csv(tmp_path / "traj.csv")
    assert (tmp_path / "traj.csv").read_text().splitlines()[0] == "t,x1,x2"
    back = Trajectory.read_csv(tmp_path / "traj.csv")
    np.testing.assert_array_equal(back.times, traj.times)
    np.testing.assert_array_equal(back.states, traj.states)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 0.9))
def test_dense_output_close_to_fine_solve(t):
    problem, _ = pr.make_scalar_problem()
    p = np.array([-0.7])
    traj = integrate(problem, p, SolverConfig(rel_tol=1e-10, abs_tol=1e-12))
    ref = reference_solve(problem, p, output_grid=np.array([0.0, t, 0.9]) if 0 < t < 0.9 else None)
    want = ref.at(np.array([t]))
    assert abs(traj.at(np.array([t]))[0, 0] - want[0, 0]) < 1e-8


# -- degeneracy ---------------------------------------------------------------------


def test_cantilever_degeneracy_flagged_near_quarter_turn():
    problem, _ = pr.make_cantilever_problem()
    for p in (3.0, 3.5, 4.0):
        traj = reference_solve(problem, np.array([p]))
        rep = detect_degeneracy(problem, np.array([p]), traj, tol=1e-3)
        assert rep.degenerate
        assert min(abs(t - np.pi / 2) for t in rep.flagged_times) < 0.05
        assert all(abs(t - np.pi / 2) < 0.2 for t in rep.flagged_times)
        assert len(rep.flagged_times) == len(rep.min_singular_values)
        assert all(s < 1e-3 for s in rep.min_singular_values)


def test_explicit_problem_has_no_flags():
    problem, _ = pr.make_scalar_problem()
    traj = integrate(problem, np.array([-0.5]))
    assert detect_degeneracy(problem, np.array([-0.5]), traj).flagged_times == []


def test_full_rank_constraint_has_no_flags():
    problem = pr.ParametricDaeProblem(
        name="unit", state_dim=2, param_dim=1, t_span=(0.0, 1.0), lower=[0.0], upper=[1.0], kind=pr.SEMI_EXPLICIT,
        dynamics=lambda t, p, xd, xa: -xd, initial_map=lambda p: np.array([1.0, 1.0]),
        differential=(0,), algebraic_idx=(1,), algebraic=lambda t, p, x: (x[..., 1] - 1.0)[..., None])
    traj = integrate(problem, np.array([0.5]))
    assert not detect_degeneracy(problem, np.array([0.5]), traj, tol=1e-8).degenerate
    np.testing.assert_allclose(traj.states[:, 1], 1.0)
