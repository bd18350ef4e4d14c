import numpy as np
import pytest

from ttcontrol.basis import (
    BasisConditionError,
    basis_to_monomial,
    build_basis,
    eval_basis,
    eval_basis_derivative,
    eval_basis_many,
    build_basis as _build,
    h2_gram,
    monomial_to_basis,
)


def h2_inner_quad(f, g, a, b, n=4000):
    """Independent H^2 inner product oracle: dense trapezoid quadrature."""
    x = np.linspace(a, b, n)
    h = 1e-6

    def d1(fn, t):
        return (fn(t + h) - fn(t - h)) / (2 * h)

    def d2(fn, t):
        return (fn(t + h) - 2 * fn(t) + fn(t - h)) / h**2

    vals = f(x) * g(x) + d1(f, x) * d1(g, x) + d2(f, x) * d2(g, x)
    return np.trapezoid(vals, x)


def test_constant_basis_value():
    # Hand evaluation: <1,1>_{H^2} on [-2,2] is 4, so phi_1 = 1/2.
    basis = build_basis(-2.0, 2.0, 1)
    assert eval_basis(basis, 1.3) == pytest.approx([0.5], abs=1e-14)
    assert eval_basis(basis, -17.0) == pytest.approx([0.5], abs=1e-14)
    assert eval_basis_derivative(basis, 0.7) == pytest.approx([0.0], abs=1e-14)


def test_gram_identity_m3():
    basis = build_basis(-2.0, 2.0, 3)
    g = h2_gram(basis)
    assert np.max(np.abs(g - np.eye(3))) < 1e-10


@pytest.mark.parametrize("m", range(1, 9))
def test_orthonormality_up_to_m8(m):
    basis = build_basis(-2.0, 2.0, m)
    assert np.max(np.abs(h2_gram(basis) - np.eye(m))) < 1e-10


def test_orthonormality_against_quadrature_oracle():
    # Cross-check a few entries with an entirely separate FD/trapezoid rule.
    basis = build_basis(-2.0, 2.0, 4)
    for i in range(4):
        for j in range(i, 4):
            fi = lambda t, i=i: eval_basis_many(basis, t)[..., i]
            fj = lambda t, j=j: eval_basis_many(basis, t)[..., j]
            val = h2_inner_quad(fi, fj, -2.0, 2.0)
            assert val == pytest.approx(1.0 if i == j else 0.0, abs=5e-4)


def test_triangular_degrees_and_positive_leading():
    basis = build_basis(-1.5, 2.5, 5)
    for i in range(5):
        row = basis.coeffs[i]
        assert np.all(row[i + 1 :] == 0.0)
        assert row[i] > 0.0


def test_determinism():
    b1 = build_basis(-2.0, 2.0, 5)
    b2 = build_basis(-2.0, 2.0, 5)
    assert np.array_equal(b1.coeffs, b2.coeffs)
    x = 0.37
    assert np.array_equal(eval_basis(b1, x), eval_basis(b2, x))


def test_eval_matches_monomial_expansion():
    # Brute-force oracle: expand each phi_i in monomials and evaluate directly.
    rng = np.random.default_rng(0)
    basis = build_basis(-2.0, 2.0, 6)
    for x in rng.uniform(-3, 3, size=20):
        direct = np.array(
            [sum(basis.coeffs[i, k] * x**k for k in range(6)) for i in range(6)]
        )
        assert eval_basis(basis, x) == pytest.approx(direct, rel=1e-12, abs=1e-12)


def test_derivative_matches_finite_difference():
    rng = np.random.default_rng(1)
    basis = build_basis(-2.0, 2.0, 5)
    h = 1e-6
    for x in rng.uniform(-2, 2, size=10):
        fd = (eval_basis(basis, x + h) - eval_basis(basis, x - h)) / (2 * h)
        d = eval_basis_derivative(basis, x)
        assert d == pytest.approx(fd, rel=1e-6, abs=1e-6)


def test_linear_phi2_has_constant_derivative():
    basis = build_basis(-2.0, 2.0, 3)
    d_at = [eval_basis_derivative(basis, x)[1] for x in (-1.0, 0.0, 2.3)]
    assert d_at[0] == pytest.approx(d_at[1], abs=1e-13)
    assert d_at[1] == pytest.approx(d_at[2], abs=1e-13)


def test_projection_round_trip():
    # Any polynomial of degree < m projects and re-expands exactly.
    rng = np.random.default_rng(2)
    basis = build_basis(-2.0, 2.0, 5)
    mono = rng.standard_normal(5)
    c = monomial_to_basis(basis, mono)
    xs = rng.uniform(-2, 2, size=100)
    truth = sum(mono[k] * xs**k for k in range(5))
    recon = eval_basis_many(basis, xs) @ c
    assert np.max(np.abs(recon - truth) / np.maximum(np.abs(truth), 1e-12)) < 1e-8
    back = basis_to_monomial(basis, c)
    assert back == pytest.approx(mono, rel=1e-10, abs=1e-12)


def test_condition_failure_is_explicit():
    with pytest.raises(BasisConditionError):
        build_basis(-2.0, 2.0, 30)


def test_invalid_inputs():
    with pytest.raises(ValueError):
        build_basis(2.0, -2.0, 3)
    with pytest.raises(ValueError):
        build_basis(-1.0, 1.0, 0)
