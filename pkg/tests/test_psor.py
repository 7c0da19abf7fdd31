import numpy as np
import pytest
import scipy.sparse as sp

from durable_qvi import kernels
from durable_qvi.hjbqvi import LCPProblem, PSORLimitError, howard_solve, lcp_residual, psor_solve

from lcp_oracle import enumerate_lcp, random_m_matrix

BACKENDS = [kernels.psor_nb, kernels.psor_np]


@pytest.mark.parametrize("backend", BACKENDS)
def test_two_by_two_example(backend):
    lcp = LCPProblem(sp.csr_matrix(np.diag([2.0, 2.0])), np.array([2.0, 6.0]), np.array([2.0, 2.0]))
    v = psor_solve(lcp, backend=backend)
    assert v == pytest.approx([2.0, 3.0], abs=1e-9)


def test_oracle_agrees_on_example():
    v = enumerate_lcp(np.diag([2.0, 2.0]), np.array([2.0, 6.0]), np.array([2.0, 2.0]))
    assert v == pytest.approx([2.0, 3.0])


@pytest.mark.parametrize("backend", BACKENDS)
def test_no_obstacle_is_sor(backend):
    rng = np.random.default_rng(0)
    A = random_m_matrix(8, rng)
    b = rng.normal(size=8)
    v = psor_solve(LCPProblem(sp.csr_matrix(A), b, np.full(8, -np.inf)), tol=1e-13, backend=backend)
    assert v == pytest.approx(np.linalg.solve(A, b), abs=1e-10)


def test_fully_clamped():
    rng = np.random.default_rng(1)
    A = random_m_matrix(6, rng)
    u = rng.uniform(0, 1, 6)
    v = psor_solve(LCPProblem(sp.csr_matrix(A), np.full(6, -1e6), u))
    assert np.array_equal(v, u)


@pytest.mark.parametrize("omega", [0.8, 1.0, 1.2])
def test_random_lcps_against_enumeration(omega):
    rng = np.random.default_rng(42)
    for _ in range(25):
        A = random_m_matrix(10, rng)
        b = rng.normal(size=10)
        u = rng.normal(size=10)
        ref = enumerate_lcp(A, b, u)
        lcp = LCPProblem(sp.csr_matrix(A), b, u)
        v = psor_solve(lcp, omega=omega, tol=1e-13)
        assert np.max(np.abs(v - ref)) < 1e-8
        assert lcp_residual(lcp, v) < 1e-9


def test_backends_agree():
    rng = np.random.default_rng(3)
    A = random_m_matrix(10, rng)
    b, u = rng.normal(size=10), rng.normal(size=10)
    lcp = LCPProblem(sp.csr_matrix(A), b, u)
    v1, s1 = psor_solve(lcp, backend=kernels.psor_nb, return_info=True)
    v2, s2 = psor_solve(lcp, backend=kernels.psor_np, return_info=True)
    assert s1 == s2
    assert np.max(np.abs(v1 - v2)) < 1e-13


def test_howard_matches_enumeration():
    rng = np.random.default_rng(5)
    for _ in range(20):
        A = random_m_matrix(10, rng)
        b, u = rng.normal(size=10), rng.normal(size=10)
        v = howard_solve(LCPProblem(sp.csr_matrix(A), b, u))
        assert np.max(np.abs(v - enumerate_lcp(A, b, u))) < 1e-10


def test_sweep_limit_reported():
    rng = np.random.default_rng(2)
    A = random_m_matrix(10, rng)
    lcp = LCPProblem(sp.csr_matrix(A), rng.normal(size=10), np.full(10, -np.inf))
    with pytest.raises(PSORLimitError, match="residual"):
        psor_solve(lcp, tol=1e-15, max_sweeps=2)


def test_warm_start_respected():
    rng = np.random.default_rng(4)
    A = random_m_matrix(10, rng)
    b, u = rng.normal(size=10), rng.normal(size=10)
    lcp = LCPProblem(sp.csr_matrix(A), b, u)
    ref = enumerate_lcp(A, b, u)
    _, cold = psor_solve(lcp, tol=1e-12, return_info=True)
    _, warm = psor_solve(lcp, tol=1e-12, v0=ref, return_info=True)
    assert warm <= 2 < cold
