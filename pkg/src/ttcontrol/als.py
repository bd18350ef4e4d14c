"""Alternating least squares fitting of a tensor train to sampled targets.

One full sweep updates the cores from left to right.  With the train held in
mixed-canonical form at the active core, the smoothness penalty (the tensor
product of one-dimensional H^2 norms, each taken with the measure normalized
to unit mass on [a, b]) reduces to a plain Tikhonov term on the active core,
because the one-dimensional basis is H^2-orthonormal and the remaining cores
are orthogonal gauges.  The measure normalization matters: without it the
constant function costs (b-a)^d in the mixed norm, and the decaying penalty
schedule below would crush every fit long before convergence once d grows.
After every sweep the penalty weight is reset to 1e-3 times the current
empirical residual, so the regularizer fades as the fit improves.

Optionally the loss carries a control-consistency term: given per-sample
matrices ``C_j`` (the map from a value gradient to a feedback control) and
observed optimal controls ``u*_j``, the extra term ``eta/J sum_j
|C_j grad v(x_j) - u*_j|^2`` ties the fitted gradient to the controls.  The
required per-core linearizations reuse the same left/right partial
contractions as the fast gradient, keeping assembly O(d m r^2) per sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .basis import BasisSet, eval_basis_derivative_many, eval_basis_many
from .tt import TensorTrain, evaluate_many, gradient_many, orthogonalize

__all__ = ["RegressionSpec", "FitReport", "fit", "micro_step", "empirical_loss"]


@dataclass
class RegressionSpec:
    """Sampled regression problem for one value-function slice.

    ``grad_targets`` (optional, J x m_u) are observed controls entering the
    eta-weighted consistency term; ``delta0 = None`` selects the automatic
    initial penalty weight 1e-3 times the residual of the initial guess.
    """

    samples: np.ndarray
    targets: np.ndarray
    grad_targets: np.ndarray | None = None
    eta: float = 0.0
    delta0: float | None = None
    max_sweeps: int = 10
    rel_tol: float = 1e-6

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        self.targets = np.asarray(self.targets, dtype=float).ravel()
        if self.samples.shape[0] != self.targets.size:
            raise ValueError("samples and targets disagree on the number of points")
        if self.samples.shape[0] < 1:
            raise ValueError("need at least one sample")
        if not np.all(np.isfinite(self.samples)) or not np.all(np.isfinite(self.targets)):
            raise ValueError("samples and targets must be finite")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.delta0 is not None and self.delta0 < 0:
            raise ValueError("delta0 must be >= 0")
        if self.grad_targets is not None:
            self.grad_targets = np.atleast_2d(np.asarray(self.grad_targets, dtype=float))
            if self.grad_targets.shape[0] != self.samples.shape[0]:
                raise ValueError("grad_targets must have one row per sample")


@dataclass
class FitReport:
    """Per-sweep empirical losses and bookkeeping of one fit."""

    residuals: list = field(default_factory=list)
    final_delta: float = 0.0
    sweeps_run: int = 0
    warnings: list = field(default_factory=list)
    micro_losses: list = field(default_factory=list)


def _phi_tables(spec: RegressionSpec, basis: BasisSet, need_grad: bool):
    phi = eval_basis_many(basis, spec.samples)
    dphi = eval_basis_derivative_many(basis, spec.samples) if need_grad else None
    return phi, dphi


def _with_grad(spec: RegressionSpec, control_map) -> bool:
    return spec.eta > 0 and spec.grad_targets is not None and control_map is not None


def _volume(basis: BasisSet, d: int) -> float:
    """Normalization turning the raw coefficient norm into the
    measure-normalized mixed-Sobolev norm: ||v||^2 = ||c||_F^2 / (b-a)^d."""
    return float((basis.b - basis.a) ** d)


def data_residual(
    tt: TensorTrain,
    spec: RegressionSpec,
    basis: BasisSet,
    control_map: np.ndarray | None = None,
) -> float:
    """Empirical loss without the smoothness penalty."""
    phi, dphi = _phi_tables(spec, basis, _with_grad(spec, control_map))
    vals = evaluate_many(tt, phi)
    loss = float(np.mean((vals - spec.targets) ** 2))
    if _with_grad(spec, control_map):
        grads = gradient_many(tt, phi, dphi)
        pred = np.einsum("jcd,jd->jc", control_map, grads)
        loss += spec.eta * float(np.sum((pred - spec.grad_targets) ** 2)) / len(vals)
    return loss


def empirical_loss(
    tt: TensorTrain,
    spec: RegressionSpec,
    basis: BasisSet,
    control_map: np.ndarray | None = None,
    delta: float = 0.0,
) -> float:
    """Full objective: data residual plus ``delta`` times the squared
    measure-normalized mixed-Sobolev norm of the represented function (equal
    to the squared coefficient Frobenius norm over the box volume, by
    Parseval)."""
    loss = data_residual(tt, spec, basis, control_map)
    if delta > 0:
        pivot_core = orthogonalize(tt, 0).cores[0]
        loss += delta * float(np.sum(pivot_core**2)) / _volume(basis, tt.d)
    return loss


def _right_stacks(tt, phi, dphi, control_map, with_grad):
    d = tt.d
    j = phi.shape[0]
    psi = [None] * d
    psi[d - 1] = np.ones((j, 1))
    ws = [None] * d
    if with_grad:
        m_u = control_map.shape[1]
        ws[d - 1] = np.zeros((j, m_u, 1))
    for i in range(d - 2, -1, -1):
        core = tt.cores[i + 1]
        psi[i] = np.einsum("rms,jm,js->jr", core, phi[:, i + 1, :], psi[i + 1], optimize=True)
        if with_grad:
            ws[i] = np.einsum(
                "rms,jm,jcs->jcr", core, phi[:, i + 1, :], ws[i + 1], optimize=True
            ) + np.einsum(
                "rms,jm,js,jc->jcr",
                core,
                dphi[:, i + 1, :],
                psi[i + 1],
                control_map[:, :, i + 1],
                optimize=True,
            )
    return psi, ws


def _advance_left(psi_l, ws_l, core, phi_i, dphi_i, cmap_i, with_grad):
    new_psi = np.einsum("jr,rms,jm->js", psi_l, core, phi_i, optimize=True)
    new_ws = None
    if with_grad:
        new_ws = np.einsum("jcr,rms,jm->jcs", ws_l, core, phi_i, optimize=True) + np.einsum(
            "jr,rms,jm,jc->jcs", psi_l, core, dphi_i, cmap_i, optimize=True
        )
    return new_psi, new_ws


def _design_matrices(psi_l, ws_l, phi_i, dphi_i, psi_r, ws_r, cmap_i, with_grad):
    j = phi_i.shape[0]
    a = np.einsum("jr,jm,js->jrms", psi_l, phi_i, psi_r, optimize=True).reshape(j, -1)
    b = None
    if with_grad:
        b = (
            np.einsum("jcr,jm,js->jcrms", ws_l, phi_i, psi_r, optimize=True)
            + np.einsum("jr,jm,jcs->jcrms", psi_l, phi_i, ws_r, optimize=True)
            + np.einsum("jr,jm,js,jc->jcrms", psi_l, dphi_i, psi_r, cmap_i, optimize=True)
        ).reshape(j, cmap_i.shape[1], -1)
    return a, b


def _solve_core(a, y, b, u_star, eta, delta, report):
    j, n = a.shape
    normal = a.T @ a / j
    rhs = a.T @ y / j
    if b is not None:
        normal += eta / j * np.einsum("jcn,jcp->np", b, b, optimize=True)
        rhs += eta / j * np.einsum("jcn,jc->n", b, u_star, optimize=True)
    if delta > 0:
        normal = normal + delta * np.eye(n)
        try:
            c, low = scipy.linalg.cho_factor(normal)
            return scipy.linalg.cho_solve((c, low), rhs)
        except np.linalg.LinAlgError:
            pass
    try:
        return np.linalg.solve(normal, rhs)
    except np.linalg.LinAlgError:
        report.warnings.append(
            "rank-deficient local least squares; using the minimum-norm solution"
        )
        return np.linalg.pinv(normal, hermitian=True) @ rhs


def _micro_loss(a, y, b, u_star, eta, delta, vec):
    j = a.shape[0]
    loss = float(np.mean((a @ vec - y) ** 2))
    if b is not None:
        loss += eta / j * float(np.sum((np.einsum("jcn,n->jc", b, vec) - u_star) ** 2))
    # In mixed-canonical form the active core carries the full coefficient
    # norm, so this is the exact smoothness penalty.
    return loss + delta * float(vec @ vec)


def _sweep(tt, spec, basis, phi, dphi, control_map, delta, report):
    with_grad = _with_grad(spec, control_map)
    tt = orthogonalize(tt, 0)
    cores = tt.cores
    d = tt.d
    delta_eff = delta / _volume(basis, d)
    psi_r, ws_r = _right_stacks(tt, phi, dphi, control_map, with_grad)
    j = phi.shape[0]
    psi_l = np.ones((j, 1))
    ws_l = np.zeros((j, control_map.shape[1], 1)) if with_grad else None
    losses = []
    for i in range(d):
        phi_i = phi[:, i, :]
        dphi_i = dphi[:, i, :] if with_grad else None
        cmap_i = control_map[:, :, i] if with_grad else None
        a, b = _design_matrices(psi_l, ws_l, phi_i, dphi_i, psi_r[i], ws_r[i], cmap_i, with_grad)
        vec = _solve_core(a, spec.targets, b, spec.grad_targets, spec.eta, delta_eff, report)
        losses.append(_micro_loss(a, spec.targets, b, spec.grad_targets, spec.eta, delta_eff, vec))
        shape = cores[i].shape
        core = vec.reshape(shape)
        if i < d - 1:
            q, r = np.linalg.qr(core.reshape(shape[0] * shape[1], shape[2]))
            core = q.reshape(shape[0], shape[1], q.shape[1])
            cores[i + 1] = np.tensordot(r, cores[i + 1], axes=(1, 0))
            psi_l, ws_l = _advance_left(psi_l, ws_l, core, phi_i, dphi_i, cmap_i, with_grad)
        cores[i] = core
    return TensorTrain(cores), losses


def fit(
    spec: RegressionSpec,
    init: TensorTrain,
    basis: BasisSet,
    control_map: np.ndarray | None = None,
):
    """Fit a train with fixed ranks to the sampled targets.

    Parameters
    ----------
    spec : RegressionSpec
        Samples, targets and hyperparameters.
    init : TensorTrain
        Starting point; its ranks are kept throughout.
    basis : BasisSet
        H^2-orthonormal one-dimensional basis shared by all dimensions.
    control_map : ndarray, optional
        Per-sample (J, m_u, d) matrices mapping a value gradient to a control,
        required when ``spec`` carries ``grad_targets`` with ``eta > 0``.

    Returns
    -------
    (TensorTrain, FitReport)
    """
    if spec.samples.shape[1] != init.d:
        raise ValueError("sample dimension does not match the train order")
    with_grad = _with_grad(spec, control_map)
    if spec.eta > 0 and spec.grad_targets is not None and control_map is None:
        raise ValueError("grad_targets with eta > 0 require a control_map")
    phi, dphi = _phi_tables(spec, basis, with_grad)
    report = FitReport()
    tt = init.copy()
    residual = data_residual(tt, spec, basis, control_map)
    delta = spec.delta0 if spec.delta0 is not None else 1e-3 * residual
    for sweep in range(spec.max_sweeps):
        tt, losses = _sweep(tt, spec, basis, phi, dphi, control_map, delta, report)
        report.micro_losses.append(losses)
        new_residual = data_residual(tt, spec, basis, control_map)
        report.residuals.append(new_residual)
        report.sweeps_run = sweep + 1
        report.final_delta = delta
        delta = 1e-3 * new_residual
        if abs(new_residual - residual) <= spec.rel_tol * max(residual, 1e-300):
            break
        residual = new_residual
    return tt, report


def micro_step(
    tt: TensorTrain,
    pivot: int,
    spec: RegressionSpec,
    basis: BasisSet,
    delta: float,
    control_map: np.ndarray | None = None,
) -> TensorTrain:
    """Replace the core at ``pivot`` by its Tikhonov least-squares update.

    ``delta`` weighs the measure-normalized mixed-Sobolev penalty, as in
    :func:`empirical_loss`.  Expects ``tt`` in mixed-canonical form at
    ``pivot`` (see :func:`ttcontrol.tt.orthogonalize`); the empirical loss at
    fixed ``delta`` cannot increase because the update minimizes it exactly
    over that core.
    """
    with_grad = _with_grad(spec, control_map)
    phi, dphi = _phi_tables(spec, basis, with_grad)
    j = phi.shape[0]
    psi_l = np.ones((j, 1))
    ws_l = np.zeros((j, control_map.shape[1], 1)) if with_grad else None
    for i in range(pivot):
        psi_l, ws_l = _advance_left(
            psi_l,
            ws_l,
            tt.cores[i],
            phi[:, i, :],
            dphi[:, i, :] if with_grad else None,
            control_map[:, :, i] if with_grad else None,
            with_grad,
        )
    psi_r, ws_r = _right_stacks(tt, phi, dphi, control_map, with_grad)
    cmap_i = control_map[:, :, pivot] if with_grad else None
    a, b = _design_matrices(
        psi_l,
        ws_l,
        phi[:, pivot, :],
        dphi[:, pivot, :] if with_grad else None,
        psi_r[pivot],
        ws_r[pivot],
        cmap_i,
        with_grad,
    )
    report = FitReport()
    delta_eff = delta / _volume(basis, tt.d)
    vec = _solve_core(a, spec.targets, b, spec.grad_targets, spec.eta, delta_eff, report)
    cores = [c.copy() for c in tt.cores]
    cores[pivot] = vec.reshape(cores[pivot].shape)
    return TensorTrain(cores)
