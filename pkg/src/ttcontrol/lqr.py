"""Finite-horizon LQR via the differential Riccati equation.

Doubles as the baseline controller for the benchmarks (linearization at the
origin) and as the exact value-function oracle for linear problems:
``v(t, x) = x' P(t) x``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import ControlProblem

__all__ = [
    "RiccatiSolution",
    "RiccatiBlowUpError",
    "solve_riccati",
    "lqr_feedback",
    "riccati_value",
    "linearize",
    "benchmark_riccati",
]


class RiccatiBlowUpError(RuntimeError):
    def __init__(self, t):
        self.t = float(t)
        super().__init__(f"Riccati solution lost finiteness at t={t:.6g}")


@dataclass
class RiccatiSolution:
    """P(t) on a uniform grid over [0, T], stored backward-integrated.

    ``gain_premul`` caches R^{-1} B' so the feedback is a single matmul.
    """

    times: np.ndarray
    P: np.ndarray  # (n_steps + 1, d, d)
    gain_premul: np.ndarray  # R^{-1} B', shape (m_u, d)

    def at(self, t: float) -> np.ndarray:
        """P(t) by linear interpolation in time."""
        times = self.times
        if t <= times[0]:
            return self.P[0]
        if t >= times[-1]:
            return self.P[-1]
        k = int(np.searchsorted(times, t) - 1)
        w = (t - times[k]) / (times[k + 1] - times[k])
        return (1.0 - w) * self.P[k] + w * self.P[k + 1]


def solve_riccati(A, B, Q, R, Q_T, T: float, dt: float) -> RiccatiSolution:
    """Integrate -P' = A'P + PA - P B R^{-1} B' P + Q backward from P(T) = Q_T.

    Classical RK4 with per-step symmetrization; raises RiccatiBlowUpError on
    finite-time escape.
    """
    A = np.asarray(A, dtype=float)
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if B.shape[0] != A.shape[0]:
        B = B.T
    Q = np.asarray(Q, dtype=float)
    R = np.atleast_2d(np.asarray(R, dtype=float))
    Q_T = np.asarray(Q_T, dtype=float)
    if dt <= 0:
        raise ValueError("dt must be positive")
    if np.any(np.linalg.eigvalsh(R) <= 0):
        raise ValueError("R must be positive definite")
    r_inv_bt = np.linalg.solve(R, B.T)
    b_rinv_bt = B @ r_inv_bt

    def pdot(p):
        return -(A.T @ p + p @ A - p @ b_rinv_bt @ p + Q)

    n = int(round(T / dt))
    times = np.linspace(0.0, T, n + 1)
    out = np.empty((n + 1, A.shape[0], A.shape[0]))
    out[n] = Q_T
    p = Q_T.copy()
    for k in range(n, 0, -1):
        # backward step of size dt
        k1 = pdot(p)
        k2 = pdot(p - 0.5 * dt * k1)
        k3 = pdot(p - 0.5 * dt * k2)
        k4 = pdot(p - dt * k3)
        p = p - dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        p = 0.5 * (p + p.T)
        if not np.all(np.isfinite(p)):
            raise RiccatiBlowUpError(times[k - 1])
        out[k - 1] = p
    return RiccatiSolution(times=times, P=out, gain_premul=r_inv_bt)


def lqr_feedback(sol: RiccatiSolution, t: float, x: np.ndarray) -> np.ndarray:
    """u = -R^{-1} B' P(t) x with P interpolated linearly in t.

    Batched: x of shape (d,) or (J, d) gives (m_u,) or (J, m_u).
    """
    p = sol.at(t)
    return -np.asarray(x, dtype=float) @ p.T @ sol.gain_premul.T


def riccati_value(sol: RiccatiSolution, t: float, x: np.ndarray) -> np.ndarray:
    """Quadratic value x' P(t) x (batched over the leading axis of x)."""
    p = sol.at(t)
    x = np.asarray(x, dtype=float)
    return np.einsum("...i,ij,...j->...", x, p, x)


def linearize(problem: ControlProblem):
    """(A, B) of a benchmark problem linearized at the origin."""
    grid = problem.grid
    if grid is None:
        raise ValueError("linearize needs a built-in benchmark problem")
    a = grid.sigma * grid.laplacian
    if grid.kind == "allen-cahn":
        a = a + np.eye(grid.d)  # d/dy (y - y^3) at 0 is the identity
    b = grid.actuator.reshape(grid.d, 1)
    return a, b


def benchmark_riccati(problem: ControlProblem, dt: float) -> RiccatiSolution:
    """Riccati solution for the linearization of a benchmark problem, with
    the benchmark's own cost weights."""
    a, b = linearize(problem)
    grid = problem.grid
    q = grid.h * np.eye(grid.d)
    # terminal cost c * h * |y|^2: recover the weight from c_T itself
    probe = np.zeros(grid.d)
    probe[0] = 1.0
    qt = float(problem.c_T(probe)) * np.eye(grid.d)
    return solve_riccati(a, b, q, problem.R, qt, problem.T, dt)
