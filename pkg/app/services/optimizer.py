"""
Quasi-Newton minimization for likelihood fitting.

BFGS with an inverse-Hessian update, central finite-difference gradients and
a backtracking Armijo line search. Objective values that are not finite are
treated as +inf, so the line search backs away from invalid regions.
"""
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from app.config import settings
from app.services.errors import NumericalError


Objective = Callable[[np.ndarray], float]

CURVATURE_FLOOR = 1e-10


@dataclass(frozen=True, eq=False)
class BfgsResult:
    """Best point seen by the optimizer."""

    x: np.ndarray
    fun: float
    iterations: int
    converged: bool
    gradient_norm: float
    evaluations: int
    message: str = ""


class _Counted:
    """Objective wrapper counting calls and mapping non-finite values to +inf."""

    def __init__(self, fun: Objective):
        self.fun = fun
        self.calls = 0

    def __call__(self, x: np.ndarray) -> float:
        self.calls += 1
        value = float(self.fun(x))
        return value if np.isfinite(value) else np.inf


def central_gradient(fun: Objective, x: np.ndarray, step: float = settings.FD_STEP) -> np.ndarray:
    """
    Central finite-difference gradient, one coordinate at a time.

    Args:
        fun: Scalar objective
        x: Evaluation point
        step: Absolute step per coordinate

    Returns:
        Gradient estimate; entries are NaN where either side is not finite
    """
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        f_plus = fun(x + e)
        f_minus = fun(x - e)
        if np.isfinite(f_plus) and np.isfinite(f_minus):
            grad[i] = (f_plus - f_minus) / (2.0 * step)
        else:
            grad[i] = np.nan
    return grad


def armijo_backtracking(
    fun: Objective,
    x: np.ndarray,
    f0: float,
    grad: np.ndarray,
    direction: np.ndarray,
    c1: float = settings.ARMIJO_C1,
    shrink: float = settings.ARMIJO_SHRINK,
    max_steps: int = settings.ARMIJO_MAX_STEPS,
) -> Tuple[Optional[float], float]:
    """
    Backtrack from a unit step until the sufficient-decrease condition holds.

    Returns:
        (alpha, f(x + alpha * direction)), or (None, f0) when no step within
        `max_steps` halvings satisfies f(x + a d) <= f0 + c1 a g^T d
    """
    slope = float(grad @ direction)
    alpha = 1.0
    for _ in range(max_steps):
        f_new = fun(x + alpha * direction)
        if f_new <= f0 + c1 * alpha * slope:
            return alpha, f_new
        alpha *= shrink
    return None, f0


def minimize_bfgs(
    fun: Objective,
    x0: np.ndarray,
    gtol: float = settings.BFGS_GTOL,
    max_iter: int = settings.BFGS_MAX_ITER,
    fd_step: float = settings.FD_STEP,
    c1: float = settings.ARMIJO_C1,
    shrink: float = settings.ARMIJO_SHRINK,
    max_line_steps: int = settings.ARMIJO_MAX_STEPS,
) -> BfgsResult:
    """
    Minimize `fun` from `x0`.

    Stops when the gradient infinity-norm drops below `gtol` (converged) or
    after `max_iter` iterations. A failed line search ends the run early with
    converged=False; the best point seen so far is returned in every case.

    Raises:
        NumericalError: If the objective is not finite at x0
    """
    f = _Counted(fun)
    x = np.array(x0, dtype=float)
    fx = f(x)
    if not np.isfinite(fx):
        raise NumericalError("Objective is not finite at the starting point", module="optimizer", step=0)

    n = x.size
    H = np.eye(n)
    g = central_gradient(f, x, fd_step)
    best_x, best_f = x.copy(), fx
    message = "maximum iterations reached"
    converged = False
    iteration = 0

    while iteration < max_iter:
        if not np.isfinite(g).all():
            message = "gradient not finite"
            break
        if np.abs(g).max(initial=0.0) < gtol:
            converged = True
            message = "gradient tolerance met"
            break

        direction = -H @ g
        if g @ direction >= 0:
            # lost positive definiteness; restart from steepest descent
            H = np.eye(n)
            direction = -g

        alpha, f_new = armijo_backtracking(f, x, fx, g, direction, c1, shrink, max_line_steps)
        if alpha is None:
            message = "line search failed"
            break

        iteration += 1
        s = alpha * direction
        x_new = x + s
        g_new = central_gradient(f, x_new, fd_step)
        y = g_new - g
        sy = float(s @ y)

        if sy > CURVATURE_FLOOR and np.isfinite(y).all():
            if iteration == 1:
                H = np.eye(n) * (sy / float(y @ y))
            rho = 1.0 / sy
            I = np.eye(n)
            H = (I - rho * np.outer(s, y)) @ H @ (I - rho * np.outer(y, s)) + rho * np.outer(s, s)

        x, fx, g = x_new, f_new, g_new
        if fx < best_f:
            best_x, best_f = x.copy(), fx

    if best_f < fx:
        x, g = best_x, central_gradient(f, best_x, fd_step)
    gradient_norm = float(np.abs(g).max(initial=0.0)) if np.isfinite(g).all() else np.inf

    return BfgsResult(
        x=best_x,
        fun=best_f,
        iterations=iteration,
        converged=converged and gradient_norm < gtol,
        gradient_norm=gradient_norm,
        evaluations=f.calls,
        message=message,
    )
