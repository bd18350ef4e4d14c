"""Control problems, benchmark semi-discretizations, and RK4 flows.

State callables follow a batch convention: ``f(t, y)``, ``c(t, y)`` and the
derivative hooks accept ``y`` of shape ``(d,)`` or ``(J, d)`` and broadcast
over the leading axis.  ``g(t, y)`` may return a constant ``(d, m_u)`` matrix
(the benchmark case) or a batched ``(J, d, m_u)`` array.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "BlowUpError",
    "ControlProblem",
    "GridPDE",
    "ControlSignal",
    "Trajectory",
    "make_benchmark",
    "neumann_laplacian",
    "interior_grid",
    "rk4_step",
    "flow_closed_loop",
    "flow_open_loop",
    "flow_closed_loop_many",
    "flow_open_loop_many",
    "running_cost",
]

BLOWUP_NORM = 1e6


class BlowUpError(RuntimeError):
    """Trajectory left the computational regime (non-finite or huge state)."""

    def __init__(self, t, norm=None):
        self.t = float(t)
        self.norm = norm
        msg = f"state blew up at t={t:.6g}"
        if norm is not None:
            msg += f" (|y| ~ {norm:.3g})"
        super().__init__(msg)


@dataclass
class GridPDE:
    """Finite-difference semi-discretization data of a 1D reaction-diffusion PDE."""

    kind: str
    d: int
    sigma: float
    omega_ctrl: tuple
    h: float
    laplacian: np.ndarray = field(repr=False)
    actuator: np.ndarray = field(repr=False)


@dataclass
class ControlProblem:
    """Finite-horizon control-affine problem with quadratic control cost.

    Running cost is ``c(t, y) + u' R u``; the control enters the dynamics as
    ``f(t, y) + g(t, y) u``.  ``f_vjp(t, y, lam)`` must return the drift
    Jacobian transpose applied to ``lam``; ``g_vjp(t, y, lam, u)`` the
    analogous term for a state-dependent control map (``None`` means ``g``
    does not depend on ``y``).  ``c_grad`` and ``c_T_grad`` are state
    gradients of the costs.  These hooks are what the adjoint pass consumes.
    """

    d: int
    m_u: int
    f: Callable
    g: Callable
    c: Callable
    R: np.ndarray
    c_T: Callable
    T: float
    omega: tuple
    f_vjp: Callable | None = None
    g_vjp: Callable | None = None
    c_grad: Callable | None = None
    c_T_grad: Callable | None = None
    grid: GridPDE | None = None

    def __post_init__(self):
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if self.R.shape != (self.m_u, self.m_u):
            raise ValueError(f"R must be {self.m_u}x{self.m_u}")
        if not np.allclose(self.R, self.R.T):
            raise ValueError("R must be symmetric")
        if np.any(np.linalg.eigvalsh(self.R) <= 0):
            raise ValueError("R must be positive definite")


@dataclass
class ControlSignal:
    """Piecewise-constant control on an ODE grid: values[k] acts on
    [times[k], times[k+1])."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.values.shape[0] != self.times.size - 1:
            raise ValueError("need exactly one control vector per grid step")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("control values must be finite")


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (N+1, d) or (J, N+1, d)


def interior_grid(d: int) -> np.ndarray:
    """Interior grid points x_i = -1 + 2i/(d+1) of [-1, 1], i = 1..d."""
    i = np.arange(1, d + 1)
    return -1.0 + 2.0 * i / (d + 1)


def neumann_laplacian(d: int) -> np.ndarray:
    """Second-order Neumann Laplacian on the interior grid (ghost-point
    reflection), mesh width 2/(d+1).  Rows sum to zero."""
    hp = 2.0 / (d + 1)
    a = np.zeros((d, d))
    for i in range(d):
        a[i, i] = -2.0
        if i > 0:
            a[i, i - 1] += 1.0
        else:
            a[i, i + 1] += 1.0  # reflected ghost node
        if i < d - 1:
            a[i, i + 1] += 1.0
        else:
            a[i, i - 1] += 1.0
    return a / hp**2


_BENCHMARKS = {
    "unstable-diffusion": dict(sigma=1.0, omega_ctrl=(-0.4, 0.4)),
    "allen-cahn": dict(sigma=0.2, omega_ctrl=(-0.5, 0.2)),
    "linear-heat": dict(sigma=1.0, omega_ctrl=(-0.4, 0.4)),
}


def make_benchmark(
    kind: str,
    d: int,
    sigma: float | None = None,
    omega_ctrl: tuple | None = None,
    horizon: float = 0.3,
    terminal_weight: float = 1.0,
    control_cost: float = 0.1,
    domain: tuple = (-2.0, 2.0),
) -> ControlProblem:
    """Finite-difference benchmark problems on the interior grid of [-1, 1].

    ``unstable-diffusion`` has reaction ``y^3``, ``allen-cahn`` has
    ``y - y^3``, ``linear-heat`` drops the reaction (the exactly solvable
    reference case).  Cost weight ``h = 1/(d+1)`` multiplies the squared state
    norm; the control weight is ``control_cost`` times the identity.
    """
    if kind not in _BENCHMARKS:
        raise ValueError(f"unknown benchmark kind {kind!r}; pick one of {sorted(_BENCHMARKS)}")
    if d < 2:
        raise ValueError("need d >= 2 grid points")
    defaults = _BENCHMARKS[kind]
    sigma = defaults["sigma"] if sigma is None else float(sigma)
    omega_ctrl = defaults["omega_ctrl"] if omega_ctrl is None else tuple(omega_ctrl)
    lap = neumann_laplacian(d)
    xs = interior_grid(d)
    actuator = ((xs >= omega_ctrl[0]) & (xs <= omega_ctrl[1])).astype(float)
    h = 1.0 / (d + 1)
    grid = GridPDE(
        kind=kind,
        d=d,
        sigma=sigma,
        omega_ctrl=omega_ctrl,
        h=h,
        laplacian=lap,
        actuator=actuator,
    )
    sig_lap_t = (sigma * lap).T
    g_mat = actuator.reshape(d, 1)

    if kind == "unstable-diffusion":
        rho = lambda y: y**3
        rho_prime = lambda y: 3.0 * y**2
    elif kind == "allen-cahn":
        rho = lambda y: y - y**3
        rho_prime = lambda y: 1.0 - 3.0 * y**2
    else:
        rho = None
        rho_prime = None

    if rho is None:
        f = lambda t, y: y @ sig_lap_t
        f_vjp = lambda t, y, lam: lam @ (sigma * lap)
    else:
        f = lambda t, y: y @ sig_lap_t + rho(y)
        f_vjp = lambda t, y, lam: lam @ (sigma * lap) + rho_prime(y) * lam

    return ControlProblem(
        d=d,
        m_u=1,
        f=f,
        g=lambda t, y: g_mat,
        c=lambda t, y: h * np.sum(y**2, axis=-1),
        R=control_cost * np.eye(1),
        c_T=lambda y: terminal_weight * h * np.sum(y**2, axis=-1),
        T=horizon,
        omega=tuple(domain),
        f_vjp=f_vjp,
        c_grad=lambda t, y: 2.0 * h * y,
        c_T_grad=lambda y: 2.0 * terminal_weight * h * y,
        grid=grid,
    )


def rk4_step(rhs: Callable, t: float, y: np.ndarray, dt: float) -> np.ndarray:
    """One classical Runge-Kutta-4 update; raises BlowUpError on non-finite output."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    with np.errstate(over="ignore", invalid="ignore"):
        out = _rk4_free(rhs, t, y, dt)
    if not np.all(np.isfinite(out)):
        raise BlowUpError(t + dt)
    return out


def _rk4_free(rhs, t, y, dt):
    # Unchecked variant for batched flows; blow-ups handled by the caller.
    k1 = rhs(t, y)
    k2 = rhs(t + 0.5 * dt, y + 0.5 * dt * k1)
    k3 = rhs(t + 0.5 * dt, y + 0.5 * dt * k2)
    k4 = rhs(t + dt, y + dt * k3)
    return y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def running_cost(problem: ControlProblem, t, y, u):
    """Instantaneous cost c(t, y) + u'Ru, batched over the leading axis."""
    u = np.asarray(u, dtype=float)
    return problem.c(t, y) + np.einsum("...c,cd,...d->...", u, problem.R, u)


def _apply_g(problem, t, y, u):
    g = np.asarray(problem.g(t, y), dtype=float)
    if g.ndim == 2:
        return u @ g.T
    return np.einsum("...dc,...c->...d", g, u)


def _grid(t0, tau, dt_ode):
    n = int(round(tau / dt_ode))
    if n < 1 or abs(n * dt_ode - tau) > 1e-9 * max(tau, 1.0):
        raise ValueError(f"tau={tau} must be an integer multiple of dt_ode={dt_ode}")
    return t0 + dt_ode * np.arange(n + 1), n


def flow_closed_loop_many(
    problem: ControlProblem,
    alpha: Callable,
    t0: float,
    x: np.ndarray,
    tau: float,
    dt_ode: float,
    record_controls: bool = False,
):
    """Batched closed-loop flow with piecewise-constant feedback sampling.

    ``alpha(t, y)`` is evaluated once per ODE step and held constant over the
    step.  Returns ``(y_end, costs, blown, controls)``; rows flagged in
    ``blown`` stopped integrating (their cost is inf).  For a (d,) input the
    batch axis is added and removed transparently by the public wrappers.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    times, n = _grid(t0, tau, dt_ode)
    j = x.shape[0]
    y = x.copy()
    costs = np.zeros(j)
    blown = np.zeros(j, dtype=bool)
    blow_time = np.full(j, np.nan)
    controls = np.empty((j, n, problem.m_u)) if record_controls else None
    for k in range(n):
        t = times[k]
        active = ~blown
        if not np.any(active):
            break
        u = np.atleast_2d(np.asarray(alpha(t, y[active]), dtype=float))
        if record_controls:
            controls[active, k, :] = u
        rhs = lambda s, z: problem.f(s, z) + _apply_g(problem, s, z, u)
        l0 = running_cost(problem, t, y[active], u)
        with np.errstate(over="ignore", invalid="ignore"):
            y_next = _rk4_free(rhs, t, y[active], dt_ode)
            l1 = running_cost(problem, times[k + 1], y_next, u)
            step_cost = 0.5 * dt_ode * (l0 + l1)
        bad = ~np.isfinite(y_next).all(axis=-1) | (
            np.linalg.norm(y_next, axis=-1) > BLOWUP_NORM
        )
        idx = np.flatnonzero(active)
        y[idx[~bad]] = y_next[~bad]
        costs[idx[~bad]] += step_cost[~bad]
        if np.any(bad):
            costs[idx[bad]] = np.inf
            blown[idx[bad]] = True
            blow_time[idx[bad]] = times[k + 1]
    return y, costs, blown, (controls if record_controls else blow_time)


def flow_closed_loop(
    problem: ControlProblem,
    alpha: Callable,
    t0: float,
    x: np.ndarray,
    tau: float,
    dt_ode: float,
):
    """Closed-loop flow of one initial state; returns (y_end, running cost).

    Raises BlowUpError (with the offending time) if the state norm passes
    1e6 or turns non-finite.
    """
    y, costs, blown, aux = flow_closed_loop_many(problem, alpha, t0, x, tau, dt_ode)
    if blown[0]:
        raise BlowUpError(aux[0], norm=None)
    return y[0], float(costs[0])


def flow_open_loop_many(
    problem: ControlProblem,
    u_values: np.ndarray,
    t0: float,
    x: np.ndarray,
    tau: float,
    dt_ode: float,
):
    """Batched open-loop flow storing the full trajectory (needed by the
    adjoint pass).  ``u_values`` has shape (J, N, m_u).  Raises BlowUpError
    as soon as any row leaves the regime; training-time blow-ups are fatal
    because downstream regressions cannot digest them.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    times, n = _grid(t0, tau, dt_ode)
    if u_values.shape[1] != n:
        raise ValueError(f"control signal has {u_values.shape[1]} steps, grid needs {n}")
    j = x.shape[0]
    states = np.empty((j, n + 1, problem.d))
    states[:, 0, :] = x
    costs = np.zeros(j)
    y = x.copy()
    for k in range(n):
        t = times[k]
        u = u_values[:, k, :]
        rhs = lambda s, z: problem.f(s, z) + _apply_g(problem, s, z, u)
        l0 = running_cost(problem, t, y, u)
        with np.errstate(over="ignore", invalid="ignore"):
            y = _rk4_free(rhs, t, y, dt_ode)
        if not np.all(np.isfinite(y)) or np.any(np.linalg.norm(y, axis=-1) > BLOWUP_NORM):
            raise BlowUpError(times[k + 1])
        costs += 0.5 * dt_ode * (l0 + running_cost(problem, times[k + 1], y, u))
        states[:, k + 1, :] = y
    return Trajectory(times=times, states=states), costs


def flow_open_loop(
    problem: ControlProblem,
    u: ControlSignal,
    t0: float,
    x: np.ndarray,
    tau: float,
):
    """Open-loop flow of one initial state under a piecewise-constant signal.

    Returns (Trajectory, cost); the trajectory is stored at every ODE step.
    """
    dt_ode = float(u.times[1] - u.times[0])
    traj, costs = flow_open_loop_many(problem, u.values[None, :, :], t0, x, tau, dt_ode)
    return Trajectory(times=traj.times, states=traj.states[0]), float(costs[0])
