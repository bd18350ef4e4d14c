"""Open-loop solver for the short-horizon problems of the backward iteration.

The cost gradient with respect to a piecewise-constant control comes from the
usual adjoint construction: one forward pass stores the trajectory, one
backward pass integrates the costate

    lam' = -(d_y f)' lam - (sum_k u_k d_y g_k)' lam - d_y c,
    lam(t_end) = grad of the terminal function,

and the gradient of the total cost with respect to the control on step k is
``dt * (2 R u_k + g(t_k, y_k)' lam_k)``.  The descent is plain heavy ball
with a fixed step; everything is vectorized over a batch of initial states
because the Bellman driver solves one such problem per sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dynamics import BLOWUP_NORM, BlowUpError, ControlProblem, ControlSignal

__all__ = [
    "TerminalFn",
    "OcpOptions",
    "OcpResult",
    "BatchOcpResult",
    "DescentError",
    "cost_gradient",
    "solve_local_ocp",
    "solve_local_ocp_many",
    "solve_full_ocp",
    "auto_step_size",
]


@dataclass
class TerminalFn:
    """Differentiable terminal function: scalar ``value`` and ``grad``.

    ``value(X)`` and ``grad(X)`` must accept a batch ``(J, d)`` and return
    ``(J,)`` and ``(J, d)``.
    """

    value: Callable
    grad: Callable

    @staticmethod
    def zero():
        return TerminalFn(
            value=lambda x: np.zeros(np.atleast_2d(x).shape[0]),
            grad=lambda x: np.zeros_like(np.atleast_2d(x)),
        )

    @staticmethod
    def from_problem(problem: ControlProblem):
        """Terminal cost of the problem itself (for full-horizon solves)."""
        if problem.c_T_grad is None:
            raise ValueError("problem lacks a terminal-cost gradient")
        return TerminalFn(
            value=lambda x: np.asarray(problem.c_T(np.atleast_2d(x)), dtype=float),
            grad=lambda x: np.asarray(problem.c_T_grad(np.atleast_2d(x)), dtype=float),
        )


class DescentError(RuntimeError):
    """Cost refused to decrease for several consecutive iterations."""

    def __init__(self, n_failed, iteration, step_size):
        self.n_failed = int(n_failed)
        self.iteration = int(iteration)
        self.step_size = float(step_size)
        super().__init__(
            f"{n_failed} sample(s) had non-decreasing cost for 5 consecutive "
            f"iterations at iteration {iteration}; the step size {step_size:.3g} "
            "is probably too large"
        )


@dataclass
class OcpOptions:
    step_size: float = 0.1
    momentum: float = 0.5
    max_iters: int = 100
    grad_tol: float = 1e-8
    cost_rel_tol: float = 1e-8
    max_increases: int = 5


@dataclass
class OcpResult:
    value: float
    control: ControlSignal
    u_at_start: np.ndarray
    iterations: int
    grad_norm: float


@dataclass
class BatchOcpResult:
    values: np.ndarray  # (J,)
    controls: np.ndarray  # (J, N, m_u)
    u_at_start: np.ndarray  # (J, m_u)
    iterations: np.ndarray  # (J,)
    grad_norms: np.ndarray  # (J,)
    times: np.ndarray = field(default=None)


def auto_step_size(problem: ControlProblem, dt_ode: float) -> float:
    """Fixed descent step matched to the gradient scale ``2 R dt``.

    The returned step contracts the control-cost part of the Hessian by 1/2
    per iteration; the state-coupling terms are O(dt) smaller on the short
    horizons the backward iteration uses.
    """
    lam_min = float(np.min(np.linalg.eigvalsh(problem.R)))
    return 0.5 / (2.0 * lam_min * dt_ode)


def _grid(t0, t1, dt_ode):
    n = int(round((t1 - t0) / dt_ode))
    if n < 1 or abs(t0 + n * dt_ode - t1) > 1e-9 * max(abs(t1), 1.0):
        raise ValueError(
            f"window [{t0}, {t1}] must be an integer number of dt_ode={dt_ode} steps"
        )
    return t0 + dt_ode * np.arange(n + 1), n


def _g_matrix(problem, t, y):
    g = np.asarray(problem.g(t, y), dtype=float)
    if g.ndim == 2:
        return np.broadcast_to(g, (y.shape[0],) + g.shape)
    return g


def _forward(problem, terminal, times, u, x):
    """Forward RK4 under piecewise-constant controls; returns (states, total cost)."""
    j = x.shape[0]
    n = times.size - 1
    dt = times[1] - times[0]
    states = np.empty((j, n + 1, problem.d))
    states[:, 0] = x
    costs = np.zeros(j)
    y = x.copy()
    for k in range(n):
        t = times[k]
        uk = u[:, k, :]
        rhs = lambda s, z: problem.f(s, z) + np.einsum(
            "jdc,jc->jd", _g_matrix(problem, s, z), uk
        )
        l0 = problem.c(t, y) + np.einsum("jc,cd,jd->j", uk, problem.R, uk)
        k1 = rhs(t, y)
        k2 = rhs(t + 0.5 * dt, y + 0.5 * dt * k1)
        k3 = rhs(t + 0.5 * dt, y + 0.5 * dt * k2)
        k4 = rhs(t + dt, y + dt * k3)
        y = y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(y)) or np.any(
            np.linalg.norm(y, axis=-1) > BLOWUP_NORM
        ):
            raise BlowUpError(times[k + 1])
        l1 = problem.c(times[k + 1], y) + np.einsum("jc,cd,jd->j", uk, problem.R, uk)
        costs += 0.5 * dt * (l0 + l1)
        states[:, k + 1] = y
    costs += terminal.value(states[:, n])
    return states, costs


def _adjoint(problem, terminal, times, u, states):
    """Backward costate pass; returns lam at every grid point, shape (J, N+1, d)."""
    j, n = u.shape[0], times.size - 1
    dt = times[1] - times[0]
    lam = np.empty((j, n + 1, problem.d))
    lam[:, n] = terminal.grad(states[:, n])
    if problem.f_vjp is None:
        raise ValueError("adjoint pass needs problem.f_vjp")
    if problem.c_grad is None:
        raise ValueError("adjoint pass needs problem.c_grad")

    def lam_dot(t, y, p, uk):
        out = -problem.f_vjp(t, y, p) - problem.c_grad(t, y)
        if problem.g_vjp is not None:
            out = out - problem.g_vjp(t, y, p, uk)
        return out

    p = lam[:, n].copy()
    for k in range(n - 1, -1, -1):
        # backward RK4 over [t_k, t_{k+1}]; the trajectory at the half step
        # is linearly interpolated from the stored grid values
        y1 = states[:, k + 1]
        y0 = states[:, k]
        ym = 0.5 * (y0 + y1)
        t1 = times[k + 1]
        tm = t1 - 0.5 * dt
        uk = u[:, k, :]
        k1 = lam_dot(t1, y1, p, uk)
        k2 = lam_dot(tm, ym, p - 0.5 * dt * k1, uk)
        k3 = lam_dot(tm, ym, p - 0.5 * dt * k2, uk)
        k4 = lam_dot(times[k], y0, p - dt * k3, uk)
        p = p - dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        lam[:, k] = p
    return lam


def _cost_and_gradient(problem, terminal, times, u, x):
    states, costs = _forward(problem, terminal, times, u, x)
    lam = _adjoint(problem, terminal, times, u, states)
    n = times.size - 1
    dt = times[1] - times[0]
    grads = np.empty_like(u)
    for k in range(n):
        g = _g_matrix(problem, times[k], states[:, k])
        grads[:, k, :] = dt * (
            2.0 * u[:, k, :] @ problem.R + np.einsum("jdc,jd->jc", g, lam[:, k])
        )
    return costs, grads


def cost_gradient(
    problem: ControlProblem,
    terminal: TerminalFn,
    u: ControlSignal,
    t0: float,
    x: np.ndarray,
):
    """Gradient of the window cost w.r.t. each control vector of the signal.

    Returns an (N, m_u) array; entry k is ``dt * (2 R u_k + g' lam_k)`` with
    the costate from the backward pass.
    """
    times = u.times
    x = np.atleast_2d(np.asarray(x, dtype=float))
    _, grads = _cost_and_gradient(problem, terminal, times, u.values[None], x)
    return grads[0]


def solve_local_ocp_many(
    problem: ControlProblem,
    terminal: TerminalFn,
    t0: float,
    t1: float,
    x: np.ndarray,
    u_init: np.ndarray | None,
    opts: OcpOptions,
    dt_ode: float,
) -> BatchOcpResult:
    """Heavy-ball descent on a batch of local open-loop problems.

    Each sample runs its own stopping logic (gradient norm, relative cost
    decrease, iteration cap); converged samples freeze while the rest keep
    iterating.  A sample whose cost fails to decrease ``opts.max_increases``
    times in a row raises DescentError for the whole batch.
    """
    times, n = _grid(t0, t1, dt_ode)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    j = x.shape[0]
    if u_init is None:
        u = np.zeros((j, n, problem.m_u))
    else:
        u = np.array(u_init, dtype=float, copy=True)
        if u.shape != (j, n, problem.m_u):
            raise ValueError(f"u_init must have shape {(j, n, problem.m_u)}")

    costs, grads = _cost_and_gradient(problem, terminal, times, u, x)
    grad_norms = np.linalg.norm(grads.reshape(j, -1), axis=1)
    iterations = np.zeros(j, dtype=int)
    active = grad_norms > opts.grad_tol
    grad_prev = np.zeros_like(grads)
    streak = np.zeros(j, dtype=int)

    for it in range(1, opts.max_iters + 1):
        if not np.any(active):
            break
        idx = np.flatnonzero(active)
        u[idx] -= opts.step_size * (grads[idx] + opts.momentum * grad_prev[idx])
        grad_prev[idx] = grads[idx]
        new_costs, new_grads = _cost_and_gradient(
            problem, terminal, times, u[idx], x[idx]
        )
        iterations[idx] = it
        increased = new_costs > costs[idx]
        streak[idx] = np.where(increased, streak[idx] + 1, 0)
        if np.any(streak[idx] >= opts.max_increases):
            raise DescentError(np.sum(streak[idx] >= opts.max_increases), it, opts.step_size)
        rel_drop = (costs[idx] - new_costs) / np.maximum(np.abs(costs[idx]), 1e-300)
        costs[idx] = new_costs
        grads[idx] = new_grads
        gn = np.linalg.norm(new_grads.reshape(len(idx), -1), axis=1)
        grad_norms[idx] = gn
        stop = (gn < opts.grad_tol) | ((~increased) & (rel_drop < opts.cost_rel_tol))
        active[idx[stop]] = False

    return BatchOcpResult(
        values=costs,
        controls=u,
        u_at_start=u[:, 0, :].copy(),
        iterations=iterations,
        grad_norms=grad_norms,
        times=times,
    )


def solve_local_ocp(
    problem: ControlProblem,
    terminal: TerminalFn,
    t0: float,
    t1: float,
    x: np.ndarray,
    u_init: ControlSignal | None = None,
    opts: OcpOptions | None = None,
    dt_ode: float = 1e-3,
) -> OcpResult:
    """Solve one local open-loop problem on [t0, t1] with terminal ``terminal``.

    The returned value is exactly the open-loop cost of the returned control
    plus the terminal evaluation (they come from the same forward pass).
    """
    opts = opts or OcpOptions()
    init = None if u_init is None else u_init.values[None]
    batch = solve_local_ocp_many(
        problem, terminal, t0, t1, np.atleast_2d(x), init, opts, dt_ode
    )
    signal = ControlSignal(times=batch.times, values=batch.controls[0])
    return OcpResult(
        value=float(batch.values[0]),
        control=signal,
        u_at_start=batch.u_at_start[0],
        iterations=int(batch.iterations[0]),
        grad_norm=float(batch.grad_norms[0]),
    )


def solve_full_ocp(
    problem: ControlProblem,
    x: np.ndarray,
    u_init: ControlSignal | None = None,
    opts: OcpOptions | None = None,
    dt_ode: float = 1e-3,
) -> OcpResult:
    """Open-loop solve over the whole horizon [0, T] with the problem's own
    terminal cost."""
    return solve_local_ocp(
        problem,
        TerminalFn.from_problem(problem),
        0.0,
        problem.T,
        x,
        u_init=u_init,
        opts=opts,
        dt_ode=dt_ode,
    )
