"""Backward-in-time construction of the value schedule and the feedback law.

The driver walks the time grid from the horizon to zero.  At every step it
produces per-sample targets for the current slice, either by solving local
open-loop problems with the adjoint solver or by policy iteration, fits a
tensor train to them, and moves on with warm starts for both the controls and
the fit.  A finished schedule is a list of slices plus the shared basis; the
feedback law interpolates slice gradients linearly in time.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import als, ocp, polit
from .basis import BasisSet, build_basis, eval_basis_derivative_many, eval_basis_many
from .dynamics import BlowUpError, ControlProblem, ControlSignal, flow_closed_loop_many
from .tt import TensorTrain, evaluate_many, feasible_ranks, gradient_many, num_parameters, random_tt

__all__ = [
    "SampleSet",
    "ValueSchedule",
    "BellmanConfig",
    "StepDiagnostics",
    "SolveReport",
    "SolveAbortError",
    "tt_terminal",
    "feedback",
    "schedule_policy",
    "run_backward",
    "evaluate_controller",
    "rollout_feedback",
    "sample_polynomial_initial",
    "check_error_propagation",
    "save_schedule",
    "load_schedule",
]


@dataclass
class SampleSet:
    """States drawn uniformly on the box; fixed for the whole backward pass."""

    points: np.ndarray
    seed: int

    @staticmethod
    def uniform(omega, d: int, n: int, seed: int) -> "SampleSet":
        rng = np.random.default_rng(seed)
        pts = rng.uniform(omega[0], omega[1], size=(n, d))
        return SampleSet(points=pts, seed=seed)


@dataclass
class ValueSchedule:
    """Fitted value slices at t_0 < ... < t_L with linear time interpolation."""

    times: np.ndarray
    slices: list
    basis: BasisSet
    omega: tuple

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if len(self.slices) != self.times.size:
            raise ValueError("need exactly one slice per time point")

    @property
    def tau(self) -> float:
        return float(self.times[1] - self.times[0]) if self.times.size > 1 else 0.0

    def bracket(self, t: float):
        """(l, weight) with t in [t_l, t_{l+1}] and weight toward t_{l+1}."""
        if self.times.size == 1:
            return 0, 0.0
        l = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.slices) - 2))
        w = (t - self.times[l]) / (self.times[l + 1] - self.times[l])
        return l, float(np.clip(w, 0.0, 1.0))

    def value(self, t: float, x) -> np.ndarray:
        """Interpolated value at time t, batched over rows of x."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        phi = eval_basis_many(self.basis, x)
        l, w = self.bracket(t)
        vals = (1.0 - w) * evaluate_many(self.slices[l], phi)
        if w > 0.0:
            vals += w * evaluate_many(self.slices[l + 1], phi)
        return vals

    def gradient(self, t: float, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        phi = eval_basis_many(self.basis, x)
        dphi = eval_basis_derivative_many(self.basis, x)
        l, w = self.bracket(t)
        grad = (1.0 - w) * gradient_many(self.slices[l], phi, dphi)
        if w > 0.0:
            grad += w * gradient_many(self.slices[l + 1], phi, dphi)
        return grad


@dataclass
class BellmanConfig:
    """Knobs of the backward pass; defaults follow the benchmark setup."""

    backend: str = "open-loop"  # or "policy-iteration"
    tau: float = 0.01
    dt_ode: float = 0.001
    ranks: object = 3  # uniform int or per-bond sequence
    degree: int = 4  # basis degree; mode size is degree + 1
    n_samples: int | None = None  # None: sample_multiplier * free parameters
    sample_multiplier: float = 6.0
    heldout_fraction: float = 0.2
    eta: float = 0.0
    lookahead: int = 1
    seed: int = 0
    max_sweeps: int = 10
    fit_rel_tol: float = 1e-6
    als_warm_start: bool = True
    gd_step: float | None = None  # None: auto_step_size(problem, dt_ode)
    gd_momentum: float = 0.5
    gd_max_iters: int = 100
    gd_grad_tol: float = 1e-8
    pi_tol: float = 1e-6
    pi_max_iters: int = 50
    terminal_fit_tol: float = 1e-8
    abort_residual: float | None = None

    def resolve_ranks(self, d: int, m: int):
        return feasible_ranks(d, m, self.ranks)


@dataclass
class StepDiagnostics:
    index: int
    t: float
    fit_residual: float
    val_residual: float
    max_err_train: float
    max_err_val: float
    delta_final: float
    sweeps: int
    backend_iters: float
    wall_time: float


@dataclass
class SolveReport:
    steps: list = field(default_factory=list)
    sample_values: dict = field(default_factory=dict)  # step index -> (J,) targets
    sample_controls: dict = field(default_factory=dict)  # step index -> (J, m_u)
    n_train: int = 0
    n_val: int = 0
    backend: str = ""
    seed: int = 0


class SolveAbortError(RuntimeError):
    """A fit exceeded the configured abort threshold; carries the partial result."""

    def __init__(self, message, schedule, report):
        super().__init__(message)
        self.schedule = schedule
        self.report = report


def tt_terminal(tt: TensorTrain, basis: BasisSet) -> ocp.TerminalFn:
    """Terminal function backed by a value slice (batched value and gradient)."""

    def value(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return evaluate_many(tt, eval_basis_many(basis, x))

    def grad(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        phi = eval_basis_many(basis, x)
        dphi = eval_basis_derivative_many(basis, x)
        return gradient_many(tt, phi, dphi)

    return ocp.TerminalFn(value=value, grad=grad)


def feedback(schedule: ValueSchedule, problem: ControlProblem, t: float, x) -> np.ndarray:
    """Optimal feedback -1/2 R^{-1} g(t,x)' grad v(t, x) from the schedule.

    The time interpolation acts on the slice gradients; outside the sampling
    box the polynomials extend naturally, so the law stays defined.
    """
    x_in = np.asarray(x, dtype=float)
    single = x_in.ndim == 1
    states = np.atleast_2d(x_in)
    grad = schedule.gradient(t, states)
    g = np.asarray(problem.g(t, states), dtype=float)
    if g.ndim == 2:
        gt_grad = grad @ g
    else:
        gt_grad = np.einsum("jdc,jd->jc", g, grad)
    u = -0.5 * np.linalg.solve(problem.R, gt_grad.T).T
    return u[0] if single else u


def schedule_policy(schedule: ValueSchedule, problem: ControlProblem):
    """Feedback law as a flow-compatible callable alpha(t, states)."""
    return lambda t, states: feedback(schedule, problem, t, np.atleast_2d(states))


def _partial_policy(times, slices, basis, problem, from_index):
    """Feedback from the already-fitted tail slices (lookahead rollouts)."""
    tail = ValueSchedule(
        times=times[from_index:], slices=slices[from_index:], basis=basis, omega=problem.omega
    )
    return schedule_policy(tail, problem)


def _control_map(problem: ControlProblem, t: float, states: np.ndarray) -> np.ndarray:
    """Per-sample matrices -1/2 R^{-1} g(t, x_j)' of shape (J, m_u, d)."""
    g = np.asarray(problem.g(t, states), dtype=float)
    if g.ndim == 2:
        cmap = -0.5 * np.linalg.solve(problem.R, g.T)
        return np.broadcast_to(cmap, (states.shape[0],) + cmap.shape).copy()
    return -0.5 * np.einsum("cd,jed->jce", np.linalg.inv(problem.R), g)


def run_backward(problem: ControlProblem, config: BellmanConfig, samples: SampleSet | None = None):
    """Solve the dynamic-programming recursion backward over the time grid.

    Returns (ValueSchedule, SolveReport).  Fitting starts from the terminal
    cost; each earlier slice is fitted to per-sample targets produced by the
    configured backend.  Raises SolveAbortError (carrying the partial
    schedule) if a step's fit residual passes ``config.abort_residual``.
    """
    if config.backend not in ("open-loop", "policy-iteration"):
        raise ValueError(f"unknown backend {config.backend!r}")
    big_l = int(round(problem.T / config.tau))
    if abs(big_l * config.tau - problem.T) > 1e-9 * max(problem.T, 1.0):
        raise ValueError("horizon must be an integer multiple of tau")
    n_sub = int(round(config.tau / config.dt_ode))
    if abs(n_sub * config.dt_ode - config.tau) > 1e-9:
        raise ValueError("tau must be an integer multiple of dt_ode")
    if config.lookahead < 1:
        raise ValueError("lookahead must be >= 1")

    a, b = problem.omega
    m = config.degree + 1
    basis = build_basis(a, b, m)
    ranks = config.resolve_ranks(problem.d, m)
    dof = num_parameters(problem.d, m, ranks)
    n_train = config.n_samples or int(np.ceil(config.sample_multiplier * dof))
    n_val = max(1, int(round(config.heldout_fraction * n_train)))

    train = samples or SampleSet.uniform(problem.omega, problem.d, n_train, config.seed)
    n_train = train.points.shape[0]
    val = SampleSet.uniform(problem.omega, problem.d, n_val, train.seed + 7919)
    all_points = np.vstack([train.points, val.points])
    phi_train = eval_basis_many(basis, train.points)
    phi_val = eval_basis_many(basis, val.points)

    report = SolveReport(n_train=n_train, n_val=n_val, backend=config.backend, seed=train.seed)
    times = config.tau * np.arange(big_l + 1)
    slices: list = [None] * (big_l + 1)

    gd_opts = ocp.OcpOptions(
        step_size=config.gd_step if config.gd_step is not None else ocp.auto_step_size(problem, config.dt_ode),
        momentum=config.gd_momentum,
        max_iters=config.gd_max_iters,
        grad_tol=config.gd_grad_tol,
    )
    pi_opts = polit.PolicyIterOptions(
        tol=config.pi_tol,
        max_iters=config.pi_max_iters,
        max_sweeps=config.max_sweeps,
        fit_rel_tol=config.fit_rel_tol,
    )

    def fit_slice(targets, init, eta=0.0, grad_targets=None, control_map=None):
        spec = als.RegressionSpec(
            samples=train.points,
            targets=targets,
            grad_targets=grad_targets,
            eta=eta,
            max_sweeps=config.max_sweeps,
            rel_tol=config.fit_rel_tol,
        )
        return als.fit(spec, init, basis, control_map=control_map)

    def diagnostics(idx, fitted, rep, targets_train, targets_val, iters, wall):
        pred_train = evaluate_many(fitted, phi_train)
        pred_val = evaluate_many(fitted, phi_val)
        err_t = pred_train - targets_train
        err_v = pred_val - targets_val
        step = StepDiagnostics(
            index=idx,
            t=float(times[idx]),
            fit_residual=float(np.mean(err_t**2)),
            val_residual=float(np.mean(err_v**2)),
            max_err_train=float(np.max(np.abs(err_t))),
            max_err_val=float(np.max(np.abs(err_v))),
            delta_final=rep.final_delta if rep is not None else 0.0,
            sweeps=rep.sweeps_run if rep is not None else 0,
            backend_iters=float(iters),
            wall_time=wall,
        )
        report.steps.append(step)
        report.sample_values[idx] = np.asarray(targets_train, dtype=float)
        return step

    def check_abort(step, partial_slices):
        if config.abort_residual is not None and step.fit_residual > config.abort_residual:
            known = [s for s in partial_slices if s is not None]
            sched = ValueSchedule(
                times=times[big_l + 1 - len(known) :],
                slices=known,
                basis=basis,
                omega=problem.omega,
            )
            raise SolveAbortError(
                f"fit residual {step.fit_residual:.3e} at step {step.index} exceeds "
                f"the abort threshold {config.abort_residual:.3e}",
                sched,
                report,
            )

    # Terminal slice: fit the terminal cost itself.
    t_start = time.perf_counter()
    init = random_tt(problem.d, m, ranks, np.random.default_rng(train.seed + 1))
    targets_l = np.asarray(problem.c_T(train.points), dtype=float)
    targets_l_val = np.asarray(problem.c_T(val.points), dtype=float)
    fitted, rep = fit_slice(targets_l, init)
    step = diagnostics(big_l, fitted, rep, targets_l, targets_l_val, 0, time.perf_counter() - t_start)
    if step.fit_residual > config.terminal_fit_tol:
        raise SolveAbortError(
            f"terminal-cost fit residual {step.fit_residual:.3e} exceeds "
            f"{config.terminal_fit_tol:.0e}; raise the basis degree or the ranks",
            ValueSchedule(times=times[big_l:], slices=[fitted], basis=basis, omega=problem.omega),
            report,
        )
    slices[big_l] = fitted
    check_abort(step, slices)

    u_warm = None
    for l in range(big_l - 1, -1, -1):
        t_step = time.perf_counter()
        window = min(config.lookahead, big_l - l)
        t_l, t_end = times[l], times[l + window]
        n_ode = int(round((t_end - t_l) / config.dt_ode))
        init = slices[l + 1] if config.als_warm_start else random_tt(
            problem.d, m, ranks, np.random.default_rng(train.seed + 1 + big_l - l)
        )

        if config.backend == "open-loop":
            terminal = tt_terminal(slices[l + window], basis)
            u0 = np.zeros((all_points.shape[0], n_ode, problem.m_u))
            if u_warm is not None:
                k = min(n_ode, u_warm.shape[1])
                u0[:, :k, :] = u_warm[:, :k, :]
            batch = ocp.solve_local_ocp_many(
                problem, terminal, t_l, t_end, all_points, u0, gd_opts, config.dt_ode
            )
            u_warm = batch.controls
            targets_l = batch.values[:n_train]
            targets_l_val = batch.values[n_train:]
            iters = float(np.mean(batch.iterations))
            if config.eta > 0:
                cmap = _control_map(problem, t_l, train.points)
                fitted, rep = fit_slice(
                    targets_l,
                    init,
                    eta=config.eta,
                    grad_targets=batch.u_at_start[:n_train],
                    control_map=cmap,
                )
            else:
                fitted, rep = fit_slice(targets_l, init)
            report.sample_controls[l] = batch.u_at_start[:n_train]
        else:
            alpha_tail = (
                _partial_policy(times, slices, basis, problem, l + 1) if window > 1 else None
            )
            res = polit.policy_iteration_local(
                problem,
                slices[l + 1],
                t_l,
                times[l + 1],
                train.points,
                basis,
                opts=pi_opts,
                dt_ode=config.dt_ode,
                init_tt=init,
                t_end=t_end,
                v_end=slices[l + window],
                alpha_tail=alpha_tail,
            )
            fitted = res.tt
            iters = float(res.iterations)
            rep = None
            # targets for the diagnostics: one extra policy evaluation
            costs_tv, y_tv = polit.policy_rollout(
                problem,
                res.alpha,
                t_l,
                t_end,
                all_points,
                config.dt_ode,
                t_switch=times[l + 1] if alpha_tail is not None else None,
                alpha_tail=alpha_tail,
            )
            vals_end = evaluate_many(slices[l + window], eval_basis_many(basis, y_tv))
            targets_all = costs_tv + vals_end
            targets_l = targets_all[:n_train]
            targets_l_val = targets_all[n_train:]

        step = diagnostics(
            l, fitted, rep, targets_l, targets_l_val, iters, time.perf_counter() - t_step
        )
        slices[l] = fitted
        check_abort(step, slices)

    schedule = ValueSchedule(times=times, slices=slices, basis=basis, omega=problem.omega)
    report.steps.sort(key=lambda s: s.index)
    return schedule, report


def rollout_feedback(problem: ControlProblem, schedule: ValueSchedule, x0, dt_ode: float = 1e-3):
    """Closed-loop rollout of the schedule feedback from one state.

    Returns (total cost including terminal, ControlSignal, blown_up flag);
    the signal is the piecewise-constant control the feedback produced, handy
    as a warm start for full-horizon open-loop refinement.
    """
    alpha = schedule_policy(schedule, problem)
    y, costs, blown, controls = flow_closed_loop_many(
        problem, alpha, 0.0, np.atleast_2d(x0), problem.T, dt_ode, record_controls=True
    )
    n = controls.shape[1]
    signal = ControlSignal(times=dt_ode * np.arange(n + 1), values=np.nan_to_num(controls[0]))
    if blown[0]:
        return float("inf"), signal, True
    total = float(costs[0]) + float(np.asarray(problem.c_T(y[0:1]), dtype=float)[0])
    return total, signal, False


def evaluate_controller(problem: ControlProblem, controller, x0, dt_ode: float = 1e-3) -> dict:
    """Closed-loop cost, one-shot value prediction error, and blow-up flag.

    ``controller`` is a ValueSchedule or any object with ``policy(t, states)``
    and ``value0(x)`` methods.  The prediction error compares the controller's
    value estimate at (0, x0) with the realized cost; failures are encoded in
    the flag (blow-up signal or cost of at least 100), never raised.
    """
    if isinstance(controller, ValueSchedule):
        policy = schedule_policy(controller, problem)
        value0 = lambda x: float(controller.value(0.0, x)[0])
    else:
        policy = controller.policy
        value0 = lambda x: float(np.asarray(controller.value0(x)).ravel()[0])
    x0 = np.asarray(x0, dtype=float)
    y, costs, blown, _ = flow_closed_loop_many(
        problem, policy, 0.0, x0[None], problem.T, dt_ode
    )
    if blown[0]:
        cost = float("inf")
    else:
        cost = float(costs[0]) + float(np.asarray(problem.c_T(y[0:1]), dtype=float)[0])
    predicted = value0(x0)
    bellman_error = abs(predicted - cost) if np.isfinite(cost) else float("inf")
    return {
        "cost": cost,
        "predicted": predicted,
        "bellman_error": bellman_error,
        "blown_up": bool(blown[0]) or cost >= 100.0,
    }


def sample_polynomial_initial(seed: int, d: int) -> np.ndarray:
    """Random initial state from the polynomial distribution.

    A random-degree polynomial with standard-normal coefficients is pinned to
    zero at the interval ends, rescaled so its maximum modulus on [-1, 1] is
    1.9, and evaluated at the d interior grid points.
    """
    if d < 2:
        raise ValueError("need d >= 2")
    rng = np.random.default_rng(seed)
    while True:
        degree = int(rng.integers(2, 21))
        coeffs = rng.standard_normal(degree + 1)
        if np.max(np.abs(coeffs)) > 1e-12:
            break
    p_tilde = np.polynomial.Polynomial(coeffs)
    p = p_tilde * np.polynomial.Polynomial([-1.0, 0.0, 1.0])  # times (x-1)(x+1)
    crit = p.deriv().roots()
    crit = crit[np.isreal(crit)].real
    crit = crit[(crit >= -1.0) & (crit <= 1.0)]
    candidates = np.concatenate([crit, [-1.0, 1.0]])
    peak = float(np.max(np.abs(p(candidates))))
    p = p * (1.9 / peak)
    from .dynamics import interior_grid

    return np.asarray(p(interior_grid(d)), dtype=float)


def check_error_propagation(
    problem: ControlProblem,
    schedule: ValueSchedule,
    fit_errors,
    value_ref=None,
    samples: np.ndarray | None = None,
    factor: float = 2.0,
    seed: int = 0,
) -> dict:
    """Check the linear growth of slice errors against a trusted reference.

    ``fit_errors`` are the per-step maximal fit errors (the empirical stand-in
    for the uniform per-step error of the theory); slice ``L - l`` must then
    stay within ``max(l, 1) * max(fit_errors) * factor`` of the reference
    ``value_ref(t, X)``.  The ``max(l, 1)`` floor accounts for the terminal
    slice being fitted (not copied) in this artifact.  Default reference: the
    differential Riccati value of the linearized benchmark (exact for
    linear-heat).
    """
    if value_ref is None:
        from .lqr import benchmark_riccati, riccati_value

        sol = benchmark_riccati(problem, dt=schedule.tau / 10 if schedule.tau else 1e-3)
        value_ref = lambda t, x: riccati_value(sol, t, x)
    if samples is None:
        samples = SampleSet.uniform(problem.omega, problem.d, 500, seed).points
    big_l = len(schedule.slices) - 1
    bound_unit = float(np.max(np.asarray(fit_errors, dtype=float)))
    phi = eval_basis_many(schedule.basis, samples)
    errors = np.empty(big_l + 1)
    bounds = np.empty(big_l + 1)
    for l in range(big_l + 1):
        idx = big_l - l
        pred = evaluate_many(schedule.slices[idx], phi)
        ref = value_ref(schedule.times[idx], samples)
        errors[l] = float(np.max(np.abs(pred - ref)))
        bounds[l] = max(l, 1) * bound_unit * factor
    return {
        "errors": errors,
        "bounds": bounds,
        "max_fit_error": bound_unit,
        "satisfied": bool(np.all(errors <= bounds)),
    }


# ---------------------------------------------------------------------------
# Schedule persistence: text, line oriented, 17 significant digits.


def save_schedule(schedule: ValueSchedule, path) -> None:
    """Write the schedule in the documented line-oriented text format.

    Header lines: dim, mode_size, num_steps, tau, domain_a, domain_b,
    basis_coeffs (row-major).  Then per slice one ``ranks`` line followed by
    one ``core`` line per dimension (row-major values, 17 significant
    digits, which round-trips float64 exactly).
    """
    first = schedule.slices[0]
    lines = [
        f"dim {first.d}",
        f"mode_size {first.m}",
        f"num_steps {len(schedule.slices) - 1}",
        f"tau {schedule.tau:.17g}",
        f"domain_a {schedule.omega[0]:.17g}",
        f"domain_b {schedule.omega[1]:.17g}",
        "basis_coeffs " + " ".join(f"{v:.17g}" for v in schedule.basis.coeffs.ravel()),
    ]
    for tt in schedule.slices:
        lines.append("ranks " + " ".join(str(r) for r in tt.ranks))
        for core in tt.cores:
            lines.append("core " + " ".join(f"{v:.17g}" for v in core.ravel()))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_schedule(path) -> ValueSchedule:
    """Read a schedule written by :func:`save_schedule`."""
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]

    def expect(keyword, line):
        key, _, rest = line.partition(" ")
        if key != keyword:
            raise ValueError(f"schedule file: expected '{keyword}', found '{key}'")
        return rest

    d = int(expect("dim", lines[0]))
    m = int(expect("mode_size", lines[1]))
    num_steps = int(expect("num_steps", lines[2]))
    tau = float(expect("tau", lines[3]))
    a = float(expect("domain_a", lines[4]))
    b = float(expect("domain_b", lines[5]))
    coeffs = np.array([float(v) for v in expect("basis_coeffs", lines[6]).split()])
    if coeffs.size != m * m:
        raise ValueError("schedule file: basis_coeffs has the wrong length")
    basis = BasisSet(a=a, b=b, m=m, coeffs=coeffs.reshape(m, m))

    slices = []
    pos = 7
    for _ in range(num_steps + 1):
        rank_text = expect("ranks", lines[pos])
        pos += 1
        ranks = [1] + [int(r) for r in rank_text.split()] + [1]
        if len(ranks) != d + 1:
            raise ValueError("schedule file: ranks line has the wrong length")
        cores = []
        for i in range(d):
            vals = np.array([float(v) for v in expect("core", lines[pos]).split()])
            pos += 1
            cores.append(vals.reshape(ranks[i], m, ranks[i + 1]))
        slices.append(TensorTrain(cores))
    times = tau * np.arange(num_steps + 1)
    return ValueSchedule(times=times, slices=slices, basis=basis, omega=(a, b))
