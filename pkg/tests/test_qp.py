import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_force_qp, kkt_violation, random_qp
from airpath_mpc.qp import DenseQp, QpSolution, QpStatus, kkt_residual, solve_qp


def test_unconstrained_example():
    sol = solve_qp(DenseQp(np.eye(2), [-1.0, -2.0]))
    assert sol.status is QpStatus.OPTIMAL
    np.testing.assert_allclose(sol.z, [1.0, 2.0], atol=1e-14)


def test_clipped_scalar_example():
    sol = solve_qp(DenseQp([[1.0]], [-4.0], [[1.0]], [1.0]))
    assert sol.z[0] == pytest.approx(1.0, abs=1e-14)
    assert sol.lam[0] == pytest.approx(3.0, abs=1e-14)
    assert sol.active_set == [0]


def test_kkt_residual_examples():
    qp = DenseQp([[1.0]], [-4.0], [[1.0]], [1.0])
    exact = QpSolution(np.array([1.0]), np.array([3.0]), QpStatus.OPTIMAL, 0.0, 0)
    assert kkt_residual(qp, exact) <= 1e-14
    free = DenseQp(np.eye(2), [-1.0, -2.0])
    off = QpSolution(np.array([1.0 + 1e-3, 2.0]), np.zeros(0), QpStatus.OPTIMAL, 0.0, 0)
    assert 0.5e-3 <= kkt_residual(free, off) <= 2e-3


def test_random_qps_match_enumeration():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        H, f, G, h = random_qp(rng)
        sol = solve_qp(DenseQp(H, f, G, h))
        z_ref, lam_ref = brute_force_qp(H, f, G, h)
        assert sol.status is QpStatus.OPTIMAL
        np.testing.assert_allclose(sol.z, z_ref, rtol=0, atol=1e-7)
        assert kkt_violation(H, f, G, h, sol.z, sol.lam) <= 1e-8
        assert kkt_violation(H, f, G, h, z_ref, lam_ref) <= 1e-10


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_scaling_equivariance(seed, alpha):
    H, f, G, h = random_qp(np.random.default_rng(seed))
    a = solve_qp(DenseQp(H, f, G, h))
    b = solve_qp(DenseQp(alpha * H, alpha * f, G, h))
    np.testing.assert_allclose(a.z, b.z, atol=1e-7 * max(1, np.abs(a.z).max()))
    np.testing.assert_allclose(alpha * a.lam, b.lam, atol=1e-6 * max(1, alpha * np.abs(a.lam).max(initial=0.0)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_warm_start_does_not_change_optimum(seed):
    rng = np.random.default_rng(seed)
    H, f, G, h = random_qp(rng, m=6)
    qp = DenseQp(H, f, G, h)
    cold = solve_qp(qp)
    warm = solve_qp(qp, warm_start=list(rng.permutation(6)[:3]))
    np.testing.assert_allclose(cold.z, warm.z, atol=1e-9)


def test_determinism():
    rng = np.random.default_rng(5)
    H, f, G, h = random_qp(rng, 4, 6)
    a, b = solve_qp(DenseQp(H, f, G, h)), solve_qp(DenseQp(H, f, G, h))
    assert a.z.tobytes() == b.z.tobytes() and a.lam.tobytes() == b.lam.tobytes()


def test_infeasible_status():
    # z <= -1 and -z <= -1 (z >= 1)
    sol = solve_qp(DenseQp([[1.0]], [0.0], [[1.0], [-1.0]], [-1.0, -1.0]))
    assert sol.status is QpStatus.INFEASIBLE


def test_max_iterations_status():
    rng = np.random.default_rng(0)
    n = 6
    G = np.vstack([np.eye(n), -np.eye(n)])
    h = np.concatenate([-np.ones(n), 3 * np.ones(n)])
    sol = solve_qp(DenseQp(np.eye(n), rng.normal(size=n), G, h), max_iterations=2)
    assert sol.status is QpStatus.MAX_ITERATIONS
    assert sol.z.shape == (n,)


def test_larger_problem_certified():
    rng = np.random.default_rng(9)
    n, m = 40, 120
    M = rng.normal(size=(n, n))
    H = M @ M.T + np.eye(n)
    f = rng.normal(size=n) * 10
    G = rng.normal(size=(m, n))
    h = G @ rng.normal(size=n) + rng.uniform(0, 0.5, m)
    sol = solve_qp(DenseQp(H, f, G, h))
    assert sol.status is QpStatus.OPTIMAL
    assert kkt_violation(H, f, G, h, sol.z, sol.lam) <= 1e-8


def test_validation():
    with pytest.raises(ValueError):
        DenseQp(np.array([[1.0, 2.0], [0.0, 1.0]]), [0.0, 0.0])
    with pytest.raises(ValueError):
        DenseQp(np.eye(2), [0.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        solve_qp(DenseQp(-np.eye(2), [0.0, 0.0]))
