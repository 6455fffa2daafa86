import numpy as np
import pytest

from core.exceptions import DimensionError, ParameterError, SolverError
from core.optim import (
    AdamState,
    LeastSquaresProblem,
    adam_step,
    check_gradient,
    gauss_newton,
    laplacian_l1,
    numeric_jacobian,
    project_box,
    raster_laplacian,
    raster_laplacian_adjoint,
    run_adam,
)


def _linear_problem(A, b):
    return LeastSquaresProblem(lambda x: A @ x - b, lambda x: A, A.shape[1])


# --- gauss_newton ---

def test_linear_problem_matches_normal_equations():
    gen = np.random.default_rng(0)
    A, b = gen.normal(size=(12, 5)), gen.normal(size=12)
    x, report = gauss_newton(_linear_problem(A, b), np.zeros(5), damping=1e-12)
    direct = np.linalg.solve(A.T @ A, A.T @ b)
    np.testing.assert_allclose(x, direct, atol=1e-8)
    assert report.iterations <= 2


def test_exact_start_stops_immediately():
    A = np.vstack([np.eye(3), np.eye(3)])
    b = np.array([1.0, 2.0, 3.0, 1.0, 2.0, 3.0])
    x, report = gauss_newton(_linear_problem(A, b), np.array([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(x, [1.0, 2.0, 3.0])
    assert report.converged and report.reason == "zero_cost"
    assert report.iterations == 0


def test_stationary_start_takes_no_step():
    A = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    b = np.array([1.0, 2.0, 3.0])
    x, report = gauss_newton(_linear_problem(A, b), np.array([2.0, 2.0]))
    np.testing.assert_array_equal(x, [2.0, 2.0])
    assert report.reason == "stationary"


def test_rosenbrock():
    problem = LeastSquaresProblem(
        lambda x: np.array([10.0 * (x[1] - x[0] ** 2), 1.0 - x[0]]),
        lambda x: np.array([[-20.0 * x[0], 10.0], [-1.0, 0.0]]),
        2,
    )
    x, report = gauss_newton(problem, np.array([-1.2, 1.0]), max_iters=200, tol=0.0)
    assert report.final_cost < 1e-10
    np.testing.assert_allclose(x, [1.0, 1.0], atol=1e-5)
    accepted = [s.cost for s in report.trace if s.accepted]
    assert all(b <= a for a, b in zip(accepted, accepted[1:]))


def test_non_finite_start_raises():
    problem = LeastSquaresProblem(lambda x: np.array([np.nan]), lambda x: np.ones((1, 1)), 1)
    with pytest.raises(SolverError) as info:
        gauss_newton(problem, np.zeros(1))
    assert info.value.diagnostics["non_finite"] == 1


def test_jacobian_shape_is_checked():
    problem = LeastSquaresProblem(lambda x: x - 1.0, lambda x: np.ones((3, 3)), 2)
    with pytest.raises(DimensionError):
        gauss_newton(problem, np.zeros(2))


def test_numeric_jacobian():
    A = np.arange(6.0).reshape(3, 2)
    np.testing.assert_allclose(numeric_jacobian(lambda x: A @ x, np.ones(2)), A, atol=1e-8)


# --- Adam ---

def test_zero_gradient_keeps_params():
    state = AdamState.create(3, lr=0.1)
    new_state, params = adam_step(state, np.zeros(3), np.array([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(params, [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(new_state.m, 0.0)
    assert new_state.step == 1


def test_first_step_moves_by_learning_rate():
    state = AdamState.create(3, lr=0.05)
    g = np.array([3.0, -0.5, 200.0])
    _, params = adam_step(state, g, np.zeros(3))
    np.testing.assert_allclose(params, -0.05 * np.sign(g), rtol=1e-6)


def test_adam_is_deterministic():
    state = AdamState.create(2)
    a = adam_step(state, np.array([1.0, 2.0]), np.zeros(2))
    b = adam_step(state, np.array([1.0, 2.0]), np.zeros(2))
    np.testing.assert_array_equal(a[1], b[1])
    assert state.step == 0


def test_adam_rejects_bad_input():
    with pytest.raises(ParameterError):
        AdamState.create(2, lr=0.0)
    with pytest.raises(DimensionError):
        adam_step(AdamState.create(2), np.zeros(3), np.zeros(2))
    with pytest.raises(SolverError):
        adam_step(AdamState.create(1), np.array([np.inf]), np.zeros(1))


def test_run_adam_minimizes_a_quadratic():
    target = np.array([1.0, -2.0, 0.5])

    def energy(x):
        d = x - target
        return float(d @ d), 2.0 * d

    x, report = run_adam(energy, np.zeros(3), steps=2000, lr=0.05)
    np.testing.assert_allclose(x, target, atol=1e-3)
    assert all(b <= a for a, b in zip(report.trace, report.trace[1:]))
    assert report.final_energy <= report.initial_energy


def test_run_adam_projects_every_iterate():
    def energy(x):
        return float(((x - 5.0) ** 2).sum()), 2.0 * (x - 5.0)

    x, _ = run_adam(energy, np.zeros(2), steps=300, lr=0.1, project=lambda v: project_box(v, 0.0, 1.0))
    np.testing.assert_allclose(x, 1.0)


def test_run_adam_halves_lr_on_plateau():
    # the energy never improves on the start, so every `patience` steps the rate halves
    def energy(x):
        return float(1.0 + (x @ x)), 2.0 * x + 1.0

    _, report = run_adam(energy, np.zeros(2), steps=20, lr=0.1, patience=5)
    assert report.lr_halvings == 4
    assert report.final_energy == pytest.approx(1.0)


# --- Box projection ---

def test_project_box():
    np.testing.assert_array_equal(project_box([10.0, 300.0, -4.0], 0.0, 255.0), [10.0, 255.0, 0.0])
    once = project_box(np.linspace(-50, 400, 10), 0.0, 255.0)
    np.testing.assert_array_equal(project_box(once, 0.0, 255.0), once)
    with pytest.raises(ParameterError):
        project_box([1.0], 2.0, 1.0)


# --- Laplacian ---

def test_laplacian_of_constant_and_ramp():
    np.testing.assert_array_equal(raster_laplacian(np.full((5, 5), 7.0)), 0.0)
    ramp = np.add.outer(np.arange(6.0), 2.0 * np.arange(6.0))
    np.testing.assert_allclose(raster_laplacian(ramp)[1:-1, 1:-1], 0.0)


def test_laplacian_spike():
    spike = np.zeros((5, 5))
    spike[2, 2] = 1.0
    lap = raster_laplacian(spike)
    assert lap[2, 2] == 4.0
    for i, j in ((1, 2), (3, 2), (2, 1), (2, 3)):
        assert lap[i, j] == -1.0
    assert np.abs(lap).sum() == 8.0


def test_laplacian_adjoint():
    gen = np.random.default_rng(2)
    x, y = gen.normal(size=(6, 7, 3)), gen.normal(size=(6, 7, 3))
    assert np.sum(raster_laplacian(x) * y) == pytest.approx(np.sum(x * raster_laplacian_adjoint(y)), abs=1e-12)


def test_laplacian_needs_3x3():
    with pytest.raises(DimensionError):
        raster_laplacian(np.zeros((2, 5)))


def test_laplacian_l1_gradient():
    gen = np.random.default_rng(3)
    x = gen.normal(size=(4, 5))
    err = check_gradient(lambda v: laplacian_l1(v, 0.1)[0], lambda v: laplacian_l1(v, 0.1)[1], x,
                         step=1e-5, floor=1e-3)
    assert err < 1e-4


# --- check_gradient ---

def test_check_gradient_exact_quadratic():
    Q = np.array([[2.0, 0.5], [0.5, 1.0]])
    err = check_gradient(lambda x: 0.5 * x @ Q @ x, lambda x: Q @ x, np.array([0.3, -0.7]))
    assert err < 1e-9


def test_check_gradient_reports_scaled_gradient():
    Q = np.array([[2.0, 0.5], [0.5, 1.0]])
    err = check_gradient(lambda x: 0.5 * x @ Q @ x, lambda x: 2.0 * Q @ x, np.array([0.3, -0.7]))
    assert err == pytest.approx(1.0, rel=1e-6)
