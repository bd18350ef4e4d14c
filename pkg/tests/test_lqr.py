import numpy as np
import pytest

from ttcontrol.dynamics import make_benchmark, neumann_laplacian
from ttcontrol.lqr import (
    RiccatiBlowUpError,
    benchmark_riccati,
    linearize,
    lqr_feedback,
    riccati_value,
    solve_riccati,
)


def test_zero_costs_give_zero_solution():
    sol = solve_riccati(np.eye(2), np.eye(2), np.zeros((2, 2)), np.eye(2), np.zeros((2, 2)), 1.0, 1e-2)
    assert np.max(np.abs(sol.P)) == 0.0


def test_scalar_closed_form_tanh():
    # a=0, b=1, q=1, r=1, q_T=0: backward Riccati gives P(0) = tanh(T).
    sol = solve_riccati([[0.0]], [[1.0]], [[1.0]], [[1.0]], [[0.0]], 1.0, 1e-3)
    assert sol.P[0][0, 0] == pytest.approx(np.tanh(1.0), abs=1e-8)


def test_b_zero_matches_lyapunov_expm_oracle():
    # With B = 0 the equation is linear with the closed form
    #   P(0) = e^{A'T} Q_T e^{AT} + int_0^T e^{A's} Q e^{As} ds,
    # and the integral follows from one block matrix exponential (van Loan).
    import scipy.linalg

    rng = np.random.default_rng(60)
    d = 3
    a = rng.standard_normal((d, d)) * 0.5
    q = np.eye(d)
    qt = np.diag(rng.uniform(0.5, 1.5, size=d))
    t_final = 0.4
    sol = solve_riccati(a, np.zeros((d, 1)), q, np.eye(1), qt, t_final, 1e-3)

    block = np.zeros((2 * d, 2 * d))
    block[:d, :d] = -a.T
    block[:d, d:] = q
    block[d:, d:] = a
    eb = scipy.linalg.expm(block * t_final)
    e_at = scipy.linalg.expm(a * t_final)
    gram = e_at.T @ eb[:d, d:]
    ref = e_at.T @ qt @ e_at + gram
    assert np.max(np.abs(sol.P[0] - ref)) < 1e-8


def test_symmetry_and_terminal_condition():
    prob = make_benchmark("linear-heat", 6)
    sol = benchmark_riccati(prob, dt=1e-3)
    qt = prob.c_T(np.eye(6)[0]) * np.eye(6)
    assert np.array_equal(sol.P[-1], qt)
    for p in sol.P[:: len(sol.P) // 7]:
        assert np.max(np.abs(p - p.T)) < 1e-10


def test_positive_semidefinite_along_the_way():
    prob = make_benchmark("linear-heat", 5)
    sol = benchmark_riccati(prob, dt=1e-3)
    for p in sol.P[:: len(sol.P) // 10]:
        assert np.min(np.linalg.eigvalsh(p)) >= -1e-8


def test_feedback_zero_cases():
    sol = solve_riccati([[0.5]], [[1.0]], [[1.0]], [[1.0]], [[1.0]], 0.5, 1e-3)
    assert lqr_feedback(sol, 0.1, np.zeros(1)) == pytest.approx([0.0])
    sol_b0 = solve_riccati([[0.5]], [[0.0]], [[1.0]], [[1.0]], [[1.0]], 0.5, 1e-3)
    assert lqr_feedback(sol_b0, 0.1, np.array([2.0])) == pytest.approx([0.0])


def test_linearize_kinds():
    lap = neumann_laplacian(5)
    p1 = make_benchmark("unstable-diffusion", 5)
    a1, b1 = linearize(p1)
    assert a1 == pytest.approx(lap)  # cubic term has zero Jacobian at 0
    assert b1[:, 0] == pytest.approx(p1.grid.actuator)
    p2 = make_benchmark("allen-cahn", 5)
    a2, _ = linearize(p2)
    assert a2 == pytest.approx(0.2 * lap + np.eye(5))
    p3 = make_benchmark("linear-heat", 5)
    a3, _ = linearize(p3)
    assert a3 == pytest.approx(lap)


def test_riccati_blow_up_detected():
    # Scalar case with negative state cost: p(s) = -tan(s) escapes at
    # s = pi/2, well inside the horizon.
    with pytest.raises(RiccatiBlowUpError):
        solve_riccati([[0.0]], [[1.0]], [[-1.0]], [[1.0]], [[0.0]], 2.0, 1e-3)


def test_value_interpolation_and_batching():
    sol = solve_riccati([[0.0]], [[1.0]], [[1.0]], [[1.0]], [[0.0]], 1.0, 1e-2)
    xs = np.array([[1.0], [2.0], [-1.0]])
    vals = riccati_value(sol, 0.0, xs)
    assert vals == pytest.approx(np.tanh(1.0) * np.array([1.0, 4.0, 1.0]), rel=1e-6)
