"""Tensor trains: the coefficient format for one time-slice of the value function.

A function ``v(x) = sum_{i_1..i_d} c[i_1,..,i_d] phi_{i_1}(x_1)...phi_{i_d}(x_d)``
is stored through a chain factorization of ``c`` into three-index cores.  The
operations here are exactly the ones the solver needs: point evaluation, the
fast gradient recursion (linear instead of quadratic in the order), a
mixed-canonical gauge for the regression penalty, and a dense TT-SVD used for
small test tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .basis import BasisSet, eval_basis_derivative_many, eval_basis_many

__all__ = [
    "TensorTrain",
    "PsiCache",
    "contract",
    "tt_svd",
    "dense",
    "evaluate",
    "evaluate_many",
    "gradient",
    "gradient_many",
    "psi_cache",
    "orthogonalize",
    "random_tt",
    "zero_tt",
    "feasible_ranks",
    "num_parameters",
]

# Dense reconstruction is a test-only path; refuse anything that would blow
# the memory budget (guard written as d*log(m) to match how it scales).
MAX_DENSE_ELEMS = 10**7


@dataclass
class TensorTrain:
    """Chain factorization of an order-d coefficient tensor.

    ``cores[i]`` has shape ``(r_{i-1}, m, r_i)`` with boundary ranks
    ``r_0 = r_d = 1``.  Instances are treated as immutable; operations return
    new trains.
    """

    cores: list

    def __post_init__(self):
        cores = [np.asarray(c, dtype=float) for c in self.cores]
        if not cores:
            raise ValueError("need at least one core")
        for i, c in enumerate(cores):
            if c.ndim != 3:
                raise ValueError(f"core {i} must have 3 indices, got shape {c.shape}")
        if cores[0].shape[0] != 1 or cores[-1].shape[2] != 1:
            raise ValueError("boundary ranks must be 1")
        for i in range(len(cores) - 1):
            if cores[i].shape[2] != cores[i + 1].shape[0]:
                raise ValueError(
                    f"rank mismatch between cores {i} and {i + 1}: "
                    f"{cores[i].shape} vs {cores[i + 1].shape}"
                )
            if cores[i].shape[1] != cores[i + 1].shape[1]:
                raise ValueError("all cores must share the same mode size")
        self.cores = cores

    @property
    def d(self) -> int:
        return len(self.cores)

    @property
    def m(self) -> int:
        return self.cores[0].shape[1]

    @property
    def ranks(self) -> tuple:
        return tuple(c.shape[2] for c in self.cores[:-1])

    def copy(self) -> "TensorTrain":
        return TensorTrain([c.copy() for c in self.cores])


@dataclass
class PsiCache:
    """Left/right partial contractions of a train against basis values.

    ``psi_minus[i]`` contracts cores ``0..i-1``, ``psi_plus[i]`` cores
    ``i+1..d-1``; the boundary entries are the scalar 1 (empty contraction).
    ``n_contractions`` counts core-level contractions spent building the cache.
    """

    psi_minus: list
    psi_plus: list
    n_contractions: int


def contract(w1: np.ndarray, w2: np.ndarray) -> np.ndarray:
    """Contract the last index of ``w1`` with the first index of ``w2``."""
    w1 = np.asarray(w1, dtype=float)
    w2 = np.asarray(w2, dtype=float)
    if w1.shape[-1] != w2.shape[0]:
        raise ValueError(f"cannot contract shapes {w1.shape} and {w2.shape}")
    return np.tensordot(w1, w2, axes=(w1.ndim - 1, 0))


def _check_dense_size(shape) -> None:
    d = len(shape)
    m = max(max(shape), 2)
    if d * math.log(m) > math.log(MAX_DENSE_ELEMS):
        raise ValueError(
            f"dense tensor of shape {tuple(shape)} exceeds the dense-path limit "
            f"of {MAX_DENSE_ELEMS:.0e} elements"
        )


def tt_svd(full: np.ndarray, tol: float = 0.0) -> TensorTrain:
    """Factor a dense tensor into a train with relative accuracy ``tol``.

    With ``tol=0`` only numerically zero singular values are discarded, so the
    reported ranks are the minimal ones.  Intended for small orders (tests,
    terminal-cost construction); guarded against large dense inputs.
    """
    full = np.asarray(full, dtype=float)
    if full.ndim < 1:
        full = full.reshape(1)
    _check_dense_size(full.shape)
    d = full.ndim
    norm = np.linalg.norm(full)
    budget = tol * norm / math.sqrt(max(d - 1, 1))
    cores = []
    rank = 1
    rest = full.reshape(rank, -1)
    for i in range(d - 1):
        mode = full.shape[i]
        mat = rest.reshape(rank * mode, -1)
        u, s, vt = np.linalg.svd(mat, full_matrices=False)
        keep = _truncation_rank(s, budget)
        cores.append(u[:, :keep].reshape(rank, mode, keep))
        rest = s[:keep, None] * vt[:keep]
        rank = keep
    cores.append(rest.reshape(rank, full.shape[-1], 1))
    return TensorTrain(cores)


def _truncation_rank(s: np.ndarray, budget: float) -> int:
    if s.size == 0:
        return 1
    floor = s[0] * s.size * np.finfo(float).eps
    tail = np.sqrt(np.cumsum(s[::-1] ** 2))[::-1]
    keep = s.size
    while keep > 1 and (tail[keep - 1] <= budget or s[keep - 1] <= floor):
        keep -= 1
    return keep


def dense(tt: TensorTrain) -> np.ndarray:
    """Reconstruct the full coefficient tensor (small orders only)."""
    _check_dense_size([tt.m] * tt.d)
    out = tt.cores[0]
    for core in tt.cores[1:]:
        out = np.tensordot(out, core, axes=(out.ndim - 1, 0))
    return out.reshape((tt.m,) * tt.d)


def _phi_tables(tt: TensorTrain, basis: BasisSet, x, derivative=False):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != tt.d:
        raise ValueError(f"state has dimension {x.shape[1]}, train has order {tt.d}")
    if basis.m != tt.m:
        raise ValueError(f"basis size {basis.m} does not match mode size {tt.m}")
    phi = eval_basis_many(basis, x)
    if not derivative:
        return x, phi, None
    return x, phi, eval_basis_derivative_many(basis, x)


def evaluate_many(tt: TensorTrain, phi: np.ndarray) -> np.ndarray:
    """Evaluate against precomputed basis values ``phi`` of shape (J, d, m)."""
    vec = np.ones((phi.shape[0], 1))
    for i, core in enumerate(tt.cores):
        vec = np.einsum("jr,rms,jm->js", vec, core, phi[:, i, :], optimize=True)
    return vec[:, 0]


def evaluate(tt: TensorTrain, basis: BasisSet, x) -> float:
    """Value of the represented function at the point ``x``.

    Left-to-right contraction, cost O(d m r^2).
    """
    _, phi, _ = _phi_tables(tt, basis, x)
    return float(evaluate_many(tt, phi)[0])


def psi_cache(tt: TensorTrain, phi_row: np.ndarray) -> PsiCache:
    """Build left/right partial contractions for one point (phi_row: (d, m))."""
    d = tt.d
    count = 0
    minus = [np.ones(1)]
    for i in range(1, d):
        prev = minus[-1]
        minus.append(np.einsum("r,rms,m->s", prev, tt.cores[i - 1], phi_row[i - 1]))
        count += 1
    plus = [np.ones(1)] * d
    for i in range(d - 2, -1, -1):
        plus[i] = np.einsum("rms,m,s->r", tt.cores[i + 1], phi_row[i + 1], plus[i + 1])
        count += 1
    return PsiCache(psi_minus=minus, psi_plus=plus, n_contractions=count)


def gradient(tt: TensorTrain, basis: BasisSet, x, return_cache: bool = False):
    """Gradient of the represented function at ``x`` via the psi recursion.

    Uses 3d - 2 core-level contractions in total (two cache sweeps plus one
    assembly pass), so the cost is O(d m r^2) rather than the O(d^2 m r^2) of
    evaluating each partial derivative from scratch.
    """
    x_arr, phi, dphi = _phi_tables(tt, basis, x, derivative=True)
    cache = psi_cache(tt, phi[0])
    grad = np.empty(tt.d)
    for i in range(tt.d):
        grad[i] = np.einsum(
            "r,rms,m,s->",
            cache.psi_minus[i],
            tt.cores[i],
            dphi[0, i],
            cache.psi_plus[i],
        )
        cache.n_contractions += 1
    if return_cache:
        return grad, cache
    return grad


def gradient_many(tt: TensorTrain, phi: np.ndarray, dphi: np.ndarray) -> np.ndarray:
    """Batched gradient against precomputed (J, d, m) basis value tables."""
    d = tt.d
    j = phi.shape[0]
    minus = [np.ones((j, 1))]
    for i in range(1, d):
        minus.append(
            np.einsum("jr,rms,jm->js", minus[-1], tt.cores[i - 1], phi[:, i - 1, :], optimize=True)
        )
    plus = [np.ones((j, 1))] * d
    for i in range(d - 2, -1, -1):
        plus[i] = np.einsum(
            "rms,jm,js->jr", tt.cores[i + 1], phi[:, i + 1, :], plus[i + 1], optimize=True
        )
    grad = np.empty((j, d))
    for i in range(d):
        grad[:, i] = np.einsum(
            "jr,rms,jm,js->j", minus[i], tt.cores[i], dphi[:, i, :], plus[i], optimize=True
        )
    return grad


def orthogonalize(tt: TensorTrain, pivot: int) -> TensorTrain:
    """Return an equivalent train in mixed-canonical form at ``pivot``.

    Cores left of ``pivot`` become left-orthogonal, cores right of it
    right-orthogonal; the Frobenius norm of the full coefficient tensor then
    sits entirely in the pivot core.
    """
    d = tt.d
    if not 0 <= pivot < d:
        raise ValueError(f"pivot {pivot} out of range for order {d}")
    cores = [c.copy() for c in tt.cores]
    for i in range(pivot):
        rl, m, rr = cores[i].shape
        q, r = np.linalg.qr(cores[i].reshape(rl * m, rr))
        cores[i] = q.reshape(rl, m, q.shape[1])
        cores[i + 1] = np.tensordot(r, cores[i + 1], axes=(1, 0))
    for i in range(d - 1, pivot, -1):
        rl, m, rr = cores[i].shape
        q, r = np.linalg.qr(cores[i].reshape(rl, m * rr).T)
        cores[i] = q.T.reshape(q.shape[1], m, rr)
        cores[i - 1] = np.tensordot(cores[i - 1], r.T, axes=(2, 0))
    return TensorTrain(cores)


def feasible_ranks(d: int, m: int, ranks) -> list:
    """Clamp requested internal ranks to what an order-d train can realize."""
    if np.isscalar(ranks):
        ranks = [int(ranks)] * (d - 1)
    ranks = [int(r) for r in ranks]
    if len(ranks) != d - 1:
        raise ValueError(f"expected {d - 1} internal ranks, got {len(ranks)}")
    return [
        min(r, m ** min(i + 1, d - 1 - i)) for i, r in enumerate(ranks)
    ]


def random_tt(d: int, m: int, ranks, rng, scale: float = 1.0) -> TensorTrain:
    """Random train with the given internal ranks (uniform int or sequence)."""
    ranks = [1] + feasible_ranks(d, m, ranks) + [1]
    cores = [rng.standard_normal((ranks[i], m, ranks[i + 1])) for i in range(d)]
    tt = TensorTrain(cores)
    # Normalize so evaluations start O(scale) regardless of d and ranks.
    norm = np.linalg.norm(orthogonalize(tt, 0).cores[0])
    if norm > 0:
        factor = (scale / norm) ** (1.0 / d)
        cores = [factor * c for c in tt.cores]
    return TensorTrain(cores)


def zero_tt(d: int, m: int, ranks) -> TensorTrain:
    ranks = [1] + feasible_ranks(d, m, ranks) + [1]
    return TensorTrain([np.zeros((ranks[i], m, ranks[i + 1])) for i in range(d)])


def num_parameters(d: int, m: int, ranks) -> int:
    """Degrees of freedom of a train with the given internal ranks."""
    if np.isscalar(ranks):
        ranks = [int(ranks)] * (d - 1)
    ranks = [1] + [int(r) for r in ranks] + [1]
    return int(sum(ranks[i] * m * ranks[i + 1] for i in range(d)))
