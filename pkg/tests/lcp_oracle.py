"""Brute-force LCP solver used as an oracle in the tests."""

import itertools

import numpy as np


def enumerate_lcp(A, b, u, tol=1e-10):
    """Solve min(A v - b, v - u) = 0 by trying every clamp pattern.

    Returns the unique solution; raises if none or several patterns fit.
    """
    A = np.asarray(A, dtype=float)
    n = len(b)
    found = []
    for pattern in itertools.product((False, True), repeat=n):
        S = np.array(pattern)
        F = ~S
        v = np.array(u, dtype=float)
        if F.any():
            rhs = b[F] - A[np.ix_(F, S)] @ u[S]
            v[F] = np.linalg.solve(A[np.ix_(F, F)], rhs)
        r = A @ v - b
        if np.all(v[F] >= u[F] - tol) and np.all(r[S] >= -tol):
            found.append(v)
    if not found:
        raise ValueError("no clamp pattern solves the LCP")
    ref = found[0]
    for v in found[1:]:
        if np.max(np.abs(v - ref)) > 1e-8:
            raise ValueError("LCP solution is not unique")
    return ref


def random_m_matrix(n, rng):
    off = -rng.uniform(0.0, 1.0, (n, n)) * (rng.uniform(size=(n, n)) < 0.6)
    np.fill_diagonal(off, 0.0)
    diag = np.abs(off).sum(axis=1) + rng.uniform(0.1, 2.0, n)
    return off + np.diag(diag)
