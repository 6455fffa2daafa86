"""
Shared solvers: damped Gauss-Newton, Adam, box projection, raster Laplacians
and a finite-difference gradient checker.
"""

import logging
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Tuple

import numpy as np
import scipy.linalg
import scipy.sparse
from pydantic import BaseModel, Field

from core.exceptions import DimensionError, ParameterError, SolverError

logger = logging.getLogger(__name__)

MAX_DAMPING = 1e16


# --- Gauss-Newton / Levenberg-Marquardt ---

@dataclass
class LeastSquaresProblem:
    """
    r(x) and J(x) of a nonlinear least-squares problem with cost ‖r(x)‖².

    `retract(x, delta)` applies a step; plain addition by default. Problems
    with manifold-valued parameters (rotations) override it.
    """
    residual: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    n_params: int
    retract: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None

    def step(self, x: np.ndarray, delta: np.ndarray) -> np.ndarray:
        return self.retract(x, delta) if self.retract is not None else x + delta

    def evaluate_jacobian(self, x: np.ndarray, n_residuals: int) -> np.ndarray:
        J = self.jacobian(x)
        if scipy.sparse.issparse(J):
            J = J.toarray()
        J = np.asarray(J, dtype=np.float64)
        if J.shape != (n_residuals, self.n_params):
            raise DimensionError(f"Jacobian has shape {J.shape}, expected ({n_residuals}, {self.n_params})")
        return J


class GaussNewtonStep(BaseModel):
    iteration: int = Field(..., description="Outer iteration index, starting at 1")
    cost: float = Field(..., description="Cost after the iteration")
    damping: float = Field(..., description="Damping used for the trial step")
    accepted: bool = Field(..., description="Whether the trial step decreased the cost")


class GaussNewtonReport(BaseModel):
    iterations: int = Field(0, description="Outer iterations performed")
    initial_cost: float = Field(..., description="Cost at the starting point")
    final_cost: float = Field(..., description="Cost at the returned point")
    converged: bool = Field(False, description="True if a stopping test fired before the budget ran out")
    reason: str = Field("max_iters", description="Why the solver stopped")
    trace: List[GaussNewtonStep] = Field(default_factory=list, description="Per-trial history")


def numeric_jacobian(residual: Callable[[np.ndarray], np.ndarray], x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian; one pair of residual evaluations per parameter."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = step
        cols.append((residual(x + e) - residual(x - e)) / (2.0 * step))
    return np.stack(cols, axis=1)


def _solve_damped(H: np.ndarray, g: np.ndarray, damping: float) -> np.ndarray:
    diag = np.diag(H).copy()
    floor = 1e-12 * max(float(diag.max(initial=0.0)), 1.0)
    A = H + damping * np.diag(np.maximum(diag, floor))
    try:
        return scipy.linalg.solve(A, -g, assume_a="sym")
    except (scipy.linalg.LinAlgError, ValueError):
        return np.linalg.lstsq(A, -g, rcond=None)[0]


def gauss_newton(
    problem: LeastSquaresProblem,
    x0: np.ndarray,
    max_iters: int = 30,
    damping: float = 1e-3,
    tol: float = 1e-8,
) -> Tuple[np.ndarray, GaussNewtonReport]:
    """
    Levenberg-Marquardt damped Gauss-Newton.

    Each iteration solves (JᵀJ + λ·diag(JᵀJ))Δ = −Jᵀr. A step that lowers the
    cost is accepted and λ halves; otherwise λ grows fourfold and the step is
    retried from the same point. Stops when an accepted step lowers the cost by
    less than `tol` relative, when the gradient vanishes, or after `max_iters`.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    r = np.asarray(problem.residual(x), dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise SolverError("Non-finite residual at the starting point",
                          diagnostics={"x": x.tolist(), "non_finite": int((~np.isfinite(r)).sum())})
    cost = float(r @ r)
    report = GaussNewtonReport(initial_cost=cost, final_cost=cost)
    lam = float(damping)

    for it in range(1, max_iters + 1):
        report.iterations = it
        if cost == 0.0:
            report.converged, report.reason = True, "zero_cost"
            report.iterations = it - 1
            break
        J = problem.evaluate_jacobian(x, len(r))
        g = J.T @ r
        if np.max(np.abs(g)) <= 1e-14 * max(1.0, cost):
            report.converged, report.reason = True, "stationary"
            report.iterations = it - 1
            break
        H = J.T @ J

        accepted = False
        while lam <= MAX_DAMPING:
            delta = _solve_damped(H, g, lam)
            x_new = problem.step(x, delta)
            r_new = np.asarray(problem.residual(x_new), dtype=np.float64)
            cost_new = float(r_new @ r_new) if np.all(np.isfinite(r_new)) else np.inf
            accepted = cost_new < cost
            report.trace.append(GaussNewtonStep(iteration=it, cost=min(cost_new, cost), damping=lam, accepted=accepted))
            logger.debug(f"GN iter {it}: trial cost {cost_new:.6g} (current {cost:.6g}), damping {lam:.3g}")
            if accepted:
                break
            lam *= 4.0

        if not accepted:
            report.converged, report.reason = True, "damping_exhausted"
            break

        decrease = (cost - cost_new) / cost
        x, r, cost = x_new, r_new, cost_new
        lam = max(lam * 0.5, 1e-15)
        if decrease < tol:
            report.converged, report.reason = True, "tolerance"
            break

    report.final_cost = cost
    return x, report


# --- Adam ---

@dataclass(frozen=True)
class AdamState:
    step: int
    m: np.ndarray
    v: np.ndarray
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, n: int, lr: float = 0.01, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        if lr <= 0 or not (0 <= beta1 < 1) or not (0 <= beta2 < 1) or eps <= 0:
            raise ParameterError(f"Invalid Adam hyperparameters lr={lr}, betas=({beta1}, {beta2}), eps={eps}")
        return cls(0, np.zeros(n), np.zeros(n), lr, beta1, beta2, eps)


def adam_step(state: AdamState, gradient: np.ndarray, params: np.ndarray) -> Tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam update; returns new state and parameters without mutating inputs."""
    gradient = np.asarray(gradient, dtype=np.float64)
    params = np.asarray(params, dtype=np.float64)
    if gradient.shape != state.m.shape or params.shape != state.m.shape:
        raise DimensionError(f"Adam state has dimension {state.m.shape}, got gradient {gradient.shape} "
                             f"and params {params.shape}")
    if not np.all(np.isfinite(gradient)):
        raise SolverError("Non-finite gradient passed to Adam",
                          diagnostics={"step": state.step, "non_finite": int((~np.isfinite(gradient)).sum())})
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * gradient
    v = state.beta2 * state.v + (1.0 - state.beta2) * (gradient * gradient)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, step=t, m=m, v=v), new_params


class AdamReport(BaseModel):
    steps: int = Field(0, description="Adam steps taken")
    initial_energy: float = Field(..., description="Energy at the starting point")
    final_energy: float = Field(..., description="Energy at the returned (best) point")
    lr_halvings: int = Field(0, description="Plateau learning-rate decays applied")
    trace: List[float] = Field(default_factory=list, description="Best energy after each step")


EnergyFn = Callable[[np.ndarray], Tuple[float, np.ndarray]]


def run_adam(
    energy_and_grad: EnergyFn,
    x0: np.ndarray,
    steps: int,
    lr: float = 0.01,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    patience: int = 50,
    project: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    name: str = "adam",
) -> Tuple[np.ndarray, AdamReport]:
    """
    Minimizes with Adam and returns the best iterate seen.

    After `patience` steps without improvement the run restarts from the best
    point with half the learning rate and fresh moments. `project` is applied
    after every step. The trace holds the best energy so far, so it never
    increases.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    if project is not None:
        x = project(x)
    state = AdamState.create(len(x), lr, beta1, beta2, eps)
    energy, grad = energy_and_grad(x)
    if not np.isfinite(energy):
        raise SolverError(f"Non-finite energy at the start of {name}", diagnostics={"step": 0})
    best_x, best_e = x.copy(), float(energy)
    report = AdamReport(initial_energy=best_e, final_energy=best_e)
    stale = 0

    for k in range(1, steps + 1):
        state, x = adam_step(state, grad, x)
        if project is not None:
            x = project(x)
        energy, grad = energy_and_grad(x)
        if not np.isfinite(energy):
            raise SolverError(f"Non-finite energy in {name} at step {k}",
                              diagnostics={"step": k, "best_energy": best_e, "lr": state.lr})
        if energy < best_e:
            best_x, best_e = x.copy(), float(energy)
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                report.lr_halvings += 1
                state = AdamState.create(len(x), state.lr * 0.5, beta1, beta2, eps)
                x = best_x.copy()
                energy, grad = energy_and_grad(x)
                stale = 0
        report.trace.append(best_e)
        report.steps = k

    report.final_energy = best_e
    logger.debug(f"{name}: {report.steps} steps, energy {report.initial_energy:.6g} -> {best_e:.6g}, "
                 f"{report.lr_halvings} lr halvings")
    return best_x, report


# --- Constraints and raster operators ---

def project_box(v: np.ndarray, lo, hi) -> np.ndarray:
    lo_arr, hi_arr = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    if np.any(lo_arr > hi_arr):
        raise ParameterError("Box lower bound exceeds upper bound")
    return np.clip(np.asarray(v, dtype=np.float64), lo_arr, hi_arr)


def raster_laplacian(raster: np.ndarray) -> np.ndarray:
    """5-point Laplacian 4c − N − S − E − W with replicated edges; extra trailing axes are channels."""
    raster = np.asarray(raster, dtype=np.float64)
    if raster.ndim < 2 or raster.shape[0] < 3 or raster.shape[1] < 3:
        raise DimensionError(f"Laplacian needs a raster of at least 3x3, got {raster.shape}")
    pad = [(1, 1), (1, 1)] + [(0, 0)] * (raster.ndim - 2)
    p = np.pad(raster, pad, mode="edge")
    return 4.0 * raster - p[:-2, 1:-1] - p[2:, 1:-1] - p[1:-1, :-2] - p[1:-1, 2:]


def raster_laplacian_adjoint(g: np.ndarray) -> np.ndarray:
    """Transpose of `raster_laplacian` applied to `g`."""
    g = np.asarray(g, dtype=np.float64)
    out = 4.0 * g
    # north neighbour x[max(i-1, 0)] scatters back one row up, row 0 onto itself
    out[:-1] -= g[1:]
    out[0] -= g[0]
    out[1:] -= g[:-1]
    out[-1] -= g[-1]
    out[:, :-1] -= g[:, 1:]
    out[:, 0] -= g[:, 0]
    out[:, 1:] -= g[:, :-1]
    out[:, -1] -= g[:, -1]
    return out


def smooth_l1(x: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """√(x² + ε²), a differentiable stand-in for |x|."""
    x = np.asarray(x, dtype=np.float64)
    return np.sqrt(x * x + eps * eps)


def smooth_l1_grad(x: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.sqrt(x * x + eps * eps)


def laplacian_l1(raster: np.ndarray, eps: float = 1e-3) -> Tuple[float, np.ndarray]:
    """Σ smooth_l1(Δ raster) and its gradient w.r.t. the raster."""
    lap = raster_laplacian(raster)
    return float(smooth_l1(lap, eps).sum()), raster_laplacian_adjoint(smooth_l1_grad(lap, eps))


# --- Verification ---

def check_gradient(
    f: Callable[[np.ndarray], float],
    grad_f: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    step: float = 1e-4,
    floor: float = 1e-6,
) -> float:
    """
    Worst per-coordinate relative error of `grad_f` against central differences.

    The error is |g_analytic − g_fd| / max(|g_fd|, floor).
    """
    x = np.asarray(x, dtype=np.float64)
    analytic = np.asarray(grad_f(x), dtype=np.float64).ravel()
    worst = 0.0
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = step
        e = e.reshape(x.shape)
        fd = (f(x + e) - f(x - e)) / (2.0 * step)
        err = abs(analytic[i] - fd) / max(abs(fd), floor)
        worst = max(worst, err)
    return float(worst)
