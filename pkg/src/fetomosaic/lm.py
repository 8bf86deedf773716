"""Small dense Levenberg-Marquardt solver."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List

import numpy as np


@dataclass
class LMResult:
    x: np.ndarray
    cost: float
    initial_cost: float
    iterations: int
    converged: bool
    # cost after every iteration (accepted or not), starting with the initial cost
    cost_history: List[float] = field(default_factory=list)
    grad_inf_norm: float = float("nan")


def _huber_weights(r: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(r)
    return np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-300))


def _huber_cost(r: np.ndarray, delta: float) -> float:
    a = np.abs(r)
    return float(np.sum(np.where(a <= delta, a * a, 2.0 * delta * a - delta * delta)))


def levenberg_marquardt(fun: Callable[[np.ndarray], np.ndarray],
                        jac: Callable[[np.ndarray], np.ndarray],
                        x0,
                        max_iters: int = 100,
                        grad_tol: float = 1e-10,
                        damping_init: float = 1e-3,
                        huber_delta: float | None = None,
                        max_damping: float = 1e16) -> LMResult:
    """Minimise ``sum(r**2)`` (or its Huber counterpart) from ``x0``.

    Marquardt scaling: the damping term is ``lam * diag(J^T W J)``.  A step is
    kept only when it lowers the cost, after which ``lam`` is divided by 10;
    a rejected step multiplies ``lam`` by 10.  Iteration stops when the
    gradient infinity norm drops below ``grad_tol``, after ``max_iters``
    iterations, or when the damping grows past ``max_damping``.
    """
    x = np.array(x0, dtype=float)

    def cost_of(r: np.ndarray) -> float:
        if huber_delta is None:
            return float(r @ r)
        return _huber_cost(r, huber_delta)

    r = fun(x)
    cost = cost_of(r)
    result = LMResult(x=x.copy(), cost=cost, initial_cost=cost, iterations=0,
                      converged=False, cost_history=[cost])
    lam = damping_init
    it = 0
    while it < max_iters:
        J = jac(x)
        w = np.ones_like(r) if huber_delta is None else _huber_weights(r, huber_delta)
        jw = J * w[:, None]
        grad = 2.0 * (jw.T @ r)
        gnorm = float(np.max(np.abs(grad))) if grad.size else 0.0
        result.grad_inf_norm = gnorm
        if gnorm < grad_tol:
            result.converged = True
            break
        jtj = jw.T @ J
        diag = np.diag(jtj).copy()
        diag[diag <= 0] = 1e-12
        accepted = False
        while not accepted:
            it += 1
            try:
                step = np.linalg.solve(jtj + lam * np.diag(diag), -(jw.T @ r))
            except np.linalg.LinAlgError:
                step = None
            if step is not None:
                x_new = x + step
                r_new = fun(x_new)
                cost_new = cost_of(r_new)
            if step is not None and cost_new < cost:
                x, r, cost = x_new, r_new, cost_new
                lam = max(lam / 10.0, 1e-15)
                accepted = True
            else:
                lam *= 10.0
            result.cost_history.append(cost)
            if it >= max_iters or lam > max_damping:
                break
        if not accepted:
            break
    result.x, result.cost, result.iterations = x, cost, it
    if not result.converged:
        J = jac(x)
        w = np.ones_like(r) if huber_delta is None else _huber_weights(r, huber_delta)
        result.grad_inf_norm = float(np.max(np.abs(2.0 * ((J * w[:, None]).T @ r)))) if J.size else 0.0
        result.converged = result.grad_inf_norm < grad_tol
    return result
