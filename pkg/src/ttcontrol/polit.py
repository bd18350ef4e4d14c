"""Policy iteration for the local problems of the backward value iteration.

Each iteration evaluates the current policy by closed-loop rollouts from the
sample states (a linear problem in the unknown value slice), fits the
resulting targets with the regularized alternating scheme, and improves the
policy through the optimality condition ``u = -1/2 R^{-1} g' grad v`` applied
to the time interpolation between the fresh slice and the next one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .als import RegressionSpec, fit
from .basis import BasisSet, eval_basis_derivative_many, eval_basis_many
from .dynamics import BlowUpError, ControlProblem, flow_closed_loop_many
from .tt import TensorTrain, evaluate_many, gradient_many

__all__ = [
    "PolicyIterOptions",
    "PolicyIterResult",
    "gradient_policy",
    "interp_policy",
    "policy_rollout",
    "policy_iteration_local",
]


@dataclass
class PolicyIterOptions:
    tol: float = 1e-6
    max_iters: int = 50
    max_sweeps: int = 10
    fit_rel_tol: float = 1e-6
    eta: float = 0.0  # unused here; present for config symmetry


@dataclass
class PolicyIterResult:
    tt: TensorTrain
    alpha: Callable
    iterations: int
    converged: bool
    sample_values: np.ndarray
    fit_residuals: list = field(default_factory=list)


def _tt_gradient_at(tt: TensorTrain, basis: BasisSet, states: np.ndarray) -> np.ndarray:
    phi = eval_basis_many(basis, states)
    dphi = eval_basis_derivative_many(basis, states)
    return gradient_many(tt, phi, dphi)


def _control_from_gradient(problem: ControlProblem, t, states, grad):
    g = np.asarray(problem.g(t, states), dtype=float)
    if g.ndim == 2:
        gt_grad = grad @ g
    else:
        gt_grad = np.einsum("jdc,jd->jc", g, grad)
    return -0.5 * np.linalg.solve(problem.R, gt_grad.T).T


def gradient_policy(problem: ControlProblem, tt: TensorTrain, basis: BasisSet) -> Callable:
    """Feedback from a single value slice: u = -1/2 R^{-1} g' grad v."""

    def alpha(t, states):
        states = np.atleast_2d(states)
        grad = _tt_gradient_at(tt, basis, states)
        return _control_from_gradient(problem, t, states, grad)

    return alpha


def interp_policy(
    problem: ControlProblem,
    basis: BasisSet,
    tt_left: TensorTrain,
    tt_right: TensorTrain,
    t_l: float,
    t_r: float,
) -> Callable:
    """Feedback from the linear-in-time interpolation of two value slices.

    The interpolated value's gradient is the same interpolation of the two
    gradients, so no extra fitting is needed.
    """
    tau = t_r - t_l

    def alpha(t, states):
        states = np.atleast_2d(states)
        w = min(max((t - t_l) / tau, 0.0), 1.0)
        grad = (1.0 - w) * _tt_gradient_at(tt_left, basis, states)
        if w > 0.0:
            grad += w * _tt_gradient_at(tt_right, basis, states)
        return _control_from_gradient(problem, t, states, grad)

    return alpha


def policy_rollout(
    problem: ControlProblem,
    alpha: Callable,
    t_l: float,
    t_end: float,
    x: np.ndarray,
    dt_ode: float,
    t_switch: float | None = None,
    alpha_tail: Callable | None = None,
):
    """Closed-loop running-cost integral and end state under a policy.

    ``alpha`` drives the system on [t_l, t_switch); beyond that the
    already-computed feedback ``alpha_tail`` takes over (extended lookahead
    horizons).  Blow-ups raise, carrying the offending time: the backward
    iteration cannot absorb non-finite regression targets.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if t_switch is None or alpha_tail is None:
        t_switch = t_end

    def policy(t, states):
        if t < t_switch:
            return alpha(t, states)
        return alpha_tail(t, states)

    y, costs, blown, aux = flow_closed_loop_many(
        problem, policy, t_l, x, t_end - t_l, dt_ode
    )
    if np.any(blown):
        raise BlowUpError(np.nanmin(aux[blown]), norm=None)
    return costs, y


def policy_iteration_local(
    problem: ControlProblem,
    v_hat_next: TensorTrain,
    t_l: float,
    t_lp1: float,
    samples: np.ndarray,
    basis: BasisSet,
    opts: PolicyIterOptions | None = None,
    dt_ode: float = 1e-3,
    alpha0: Callable | None = None,
    init_tt: TensorTrain | None = None,
    t_end: float | None = None,
    v_end: TensorTrain | None = None,
    alpha_tail: Callable | None = None,
) -> PolicyIterResult:
    """Fixed-point iteration for one time slice.

    Per iteration: (a) roll the current policy out of every sample over
    [t_l, t_end] (with ``alpha_tail`` active beyond t_{l+1}), (b) add the
    evaluation of the slice at ``t_end`` to the accumulated running cost and
    fit those targets, (c) rebuild the policy from the interpolation between
    the fresh fit and the next slice.  Stops when the fitted values at the
    samples move less than ``opts.tol`` in the max norm.
    """
    opts = opts or PolicyIterOptions()
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if t_end is None or v_end is None:
        t_end, v_end = t_lp1, v_hat_next
    phi_samples = eval_basis_many(basis, samples)

    alpha = alpha0 if alpha0 is not None else gradient_policy(problem, v_hat_next, basis)
    current = init_tt if init_tt is not None else v_hat_next
    prev_values = evaluate_many(current, phi_samples)
    end_phi = None
    converged = False
    iterations = 0
    residuals = []
    for k in range(opts.max_iters):
        costs, y_end = policy_rollout(
            problem,
            alpha,
            t_l,
            t_end,
            samples,
            dt_ode,
            t_switch=t_lp1 if alpha_tail is not None else None,
            alpha_tail=alpha_tail,
        )
        end_phi = eval_basis_many(basis, y_end)
        targets = costs + evaluate_many(v_end, end_phi)
        spec = RegressionSpec(
            samples=samples,
            targets=targets,
            max_sweeps=opts.max_sweeps,
            rel_tol=opts.fit_rel_tol,
        )
        current, report = fit(spec, current, basis)
        residuals.append(report.residuals[-1])
        values = evaluate_many(current, phi_samples)
        iterations = k + 1
        alpha = interp_policy(problem, basis, current, v_hat_next, t_l, t_lp1)
        if np.max(np.abs(values - prev_values)) < opts.tol:
            prev_values = values
            converged = True
            break
        prev_values = values
    return PolicyIterResult(
        tt=current,
        alpha=alpha,
        iterations=iterations,
        converged=converged,
        sample_values=prev_values,
        fit_residuals=residuals,
    )
