"""One-dimensional polynomial bases orthonormal in the H^2(a, b) inner product.

The feedback solver represents value-function slices as tensor products of a
single one-dimensional basis ``{phi_1, ..., phi_m}`` on ``[a, b]``.  Building
the basis orthonormal with respect to

    <f, g> = int_a^b f g + f' g' + f'' g''  dx

turns the smoothness penalty used during regression into a plain Frobenius
norm on the coefficient tensor (Parseval), which is what makes the
regularization cheap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from numpy.polynomial.legendre import leggauss

__all__ = [
    "BasisSet",
    "BasisConditionError",
    "build_basis",
    "eval_basis",
    "eval_basis_many",
    "eval_basis_derivative",
    "eval_basis_derivative_many",
    "h2_gram",
    "monomial_to_basis",
    "basis_to_monomial",
]

# Monomial Gram matrices become numerically rank deficient quickly; refuse to
# orthogonalize once the condition estimate passes this limit.
COND_LIMIT = 1e13


class BasisConditionError(ValueError):
    """Basis size too large for stable orthogonalization on this interval."""


@dataclass(frozen=True)
class BasisSet:
    """Polynomial basis on ``[a, b]``, orthonormal in the H^2 inner product.

    ``coeffs`` is lower triangular with positive diagonal; row ``i`` holds the
    monomial coefficients of ``phi_{i+1}``, so ``phi_{i+1}`` has exact degree
    ``i``.
    """

    a: float
    b: float
    m: int
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.shape != (self.m, self.m):
            raise ValueError(f"coeffs must be {self.m}x{self.m}, got {c.shape}")
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "_deriv", _derivative_matrix(self.m) @ c.T)

    @property
    def deriv_coeffs(self) -> np.ndarray:
        """Monomial coefficients of phi_i', transposed layout (m x m)."""
        return self._deriv.T


def _derivative_matrix(m: int) -> np.ndarray:
    """Map monomial coefficients (1, x, ..., x^{m-1}) to their derivative's."""
    d = np.zeros((m, m))
    for k in range(1, m):
        d[k - 1, k] = k
    return d


def _quad_rule(a: float, b: float, m: int):
    # Exact for integrands of degree 2(m-1); m nodes give degree 2m-1.
    nodes, weights = leggauss(max(m, 2))
    x = 0.5 * (b - a) * nodes + 0.5 * (a + b)
    w = 0.5 * (b - a) * weights
    return x, w


def _monomial_h2_gram(a: float, b: float, m: int) -> np.ndarray:
    x, w = _quad_rule(a, b, m)
    powers = np.arange(m)
    v0 = x[:, None] ** powers
    v1 = powers * np.where(powers >= 1, x[:, None] ** np.maximum(powers - 1, 0), 0.0)
    v2 = powers * (powers - 1) * np.where(
        powers >= 2, x[:, None] ** np.maximum(powers - 2, 0), 0.0
    )
    gram = np.zeros((m, m))
    for v in (v0, v1, v2):
        gram += (v * w[:, None]).T @ v
    return gram


def build_basis(a: float, b: float, m: int) -> BasisSet:
    """Construct ``m`` H^2(a, b)-orthonormal polynomials of degrees 0..m-1.

    Gram-Schmidt is realized as a Cholesky factorization of the monomial
    H^2 Gram matrix (integrals via Gauss-Legendre quadrature, exact for the
    polynomial integrands), followed by one refinement pass to push the
    orthonormality defect to machine precision.  Deterministic; leading
    coefficients are positive.

    Raises
    ------
    BasisConditionError
        If the monomial Gram matrix is too ill conditioned for a reliable
        factorization (``m`` too large for this interval).
    """
    if not a < b:
        raise ValueError(f"need a < b, got a={a}, b={b}")
    if m < 1:
        raise ValueError(f"need m >= 1, got m={m}")
    gram = _monomial_h2_gram(a, b, m)
    cond = np.linalg.cond(gram)
    if cond > COND_LIMIT:
        raise BasisConditionError(
            f"monomial H^2 Gram matrix has condition {cond:.2e} > {COND_LIMIT:.0e} "
            f"for m={m} on [{a}, {b}]; reduce the basis size"
        )
    coeffs = np.eye(m)
    for _ in range(3):
        g = coeffs @ gram @ coeffs.T
        defect = np.max(np.abs(g - np.eye(m)))
        if defect < 1e-14:
            break
        chol = np.linalg.cholesky(g)
        # Triangular solve keeps coeffs exactly lower triangular.
        coeffs = scipy.linalg.solve_triangular(chol, coeffs, lower=True)
    return BasisSet(a=float(a), b=float(b), m=m, coeffs=coeffs)


def eval_basis_many(basis: BasisSet, x: np.ndarray) -> np.ndarray:
    """Evaluate all basis polynomials at each entry of ``x``; shape (..., m)."""
    x = np.asarray(x, dtype=float)
    powers = x[..., None] ** np.arange(basis.m)
    return powers @ basis.coeffs.T


def eval_basis(basis: BasisSet, x: float) -> np.ndarray:
    """Values ``[phi_1(x), ..., phi_m(x)]``.

    ``x`` may lie outside ``[a, b]``; the polynomials extend naturally, which
    keeps the feedback law defined for trajectories that briefly leave the
    sampling box.
    """
    return eval_basis_many(basis, float(x))


def eval_basis_derivative_many(basis: BasisSet, x: np.ndarray) -> np.ndarray:
    """First derivatives of all basis polynomials at each entry of ``x``."""
    x = np.asarray(x, dtype=float)
    powers = x[..., None] ** np.arange(basis.m)
    return powers @ basis._deriv


def eval_basis_derivative(basis: BasisSet, x: float) -> np.ndarray:
    """Values ``[phi_1'(x), ..., phi_m'(x)]``."""
    return eval_basis_derivative_many(basis, float(x))


def h2_gram(basis: BasisSet) -> np.ndarray:
    """H^2 Gram matrix of the basis, recomputed by quadrature (should be I)."""
    return basis.coeffs @ _monomial_h2_gram(basis.a, basis.b, basis.m) @ basis.coeffs.T


def monomial_to_basis(basis: BasisSet, mono: np.ndarray) -> np.ndarray:
    """Coefficients ``c`` with ``sum_i c_i phi_i = sum_k mono_k x^k``.

    ``mono`` may be shorter than ``m``; exact because the basis spans all
    polynomials of degree below ``m``.
    """
    mono = np.asarray(mono, dtype=float)
    if mono.size > basis.m:
        raise ValueError(f"polynomial degree {mono.size - 1} exceeds basis degree {basis.m - 1}")
    rhs = np.zeros(basis.m)
    rhs[: mono.size] = mono
    return scipy.linalg.solve_triangular(basis.coeffs.T, rhs, lower=False)


def basis_to_monomial(basis: BasisSet, c: np.ndarray) -> np.ndarray:
    """Monomial coefficients of ``sum_i c_i phi_i``."""
    return np.asarray(c, dtype=float) @ basis.coeffs
