"""Approximate optimal feedback control via low-rank value-function regression.

The package solves finite-horizon, control-affine problems by stepping the
dynamic-programming recursion backward on a coarse time grid.  Every time
slice of the value function is a tensor train over a fixed polynomial basis,
fitted by regularized alternating least squares to per-sample targets that
come either from short-horizon open-loop solves (adjoint gradients) or from
policy iteration.  A differential-Riccati LQR baseline doubles as the exact
oracle for linear problems.
"""

from .als import FitReport, RegressionSpec, fit, micro_step
from .basis import BasisSet, build_basis, eval_basis, eval_basis_derivative
from .bellman import (
    BellmanConfig,
    SampleSet,
    SolveReport,
    ValueSchedule,
    check_error_propagation,
    evaluate_controller,
    feedback,
    load_schedule,
    run_backward,
    sample_polynomial_initial,
    save_schedule,
)
from .dynamics import (
    BlowUpError,
    ControlProblem,
    ControlSignal,
    flow_closed_loop,
    flow_open_loop,
    make_benchmark,
    rk4_step,
)
from .lqr import RiccatiSolution, linearize, lqr_feedback, riccati_value, solve_riccati
from .ocp import OcpOptions, OcpResult, TerminalFn, cost_gradient, solve_full_ocp, solve_local_ocp
from .polit import PolicyIterOptions, policy_iteration_local, policy_rollout
from .tt import TensorTrain, contract, evaluate, gradient, orthogonalize, tt_svd

__version__ = "0.1.0"

__all__ = [
    "BasisSet",
    "build_basis",
    "eval_basis",
    "eval_basis_derivative",
    "TensorTrain",
    "contract",
    "tt_svd",
    "evaluate",
    "gradient",
    "orthogonalize",
    "RegressionSpec",
    "FitReport",
    "fit",
    "micro_step",
    "ControlProblem",
    "ControlSignal",
    "BlowUpError",
    "make_benchmark",
    "rk4_step",
    "flow_closed_loop",
    "flow_open_loop",
    "TerminalFn",
    "OcpOptions",
    "OcpResult",
    "cost_gradient",
    "solve_local_ocp",
    "solve_full_ocp",
    "PolicyIterOptions",
    "policy_rollout",
    "policy_iteration_local",
    "BellmanConfig",
    "SampleSet",
    "ValueSchedule",
    "SolveReport",
    "run_backward",
    "feedback",
    "evaluate_controller",
    "sample_polynomial_initial",
    "check_error_propagation",
    "save_schedule",
    "load_schedule",
    "RiccatiSolution",
    "solve_riccati",
    "lqr_feedback",
    "riccati_value",
    "linearize",
    "__version__",
]
