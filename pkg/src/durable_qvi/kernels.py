"""Per-node inner loops of the HJBQVI solver.

Every kernel exists twice: an explicit-loop version compiled with numba
(``*_nb``) and a vectorised numpy version (``*_np``). The public names at
the bottom pick one according to :mod:`durable_qvi._jit`.

Coefficients are passed as one flat float array laid out by the ``C_*``
indices below (see :func:`durable_qvi.hjbqvi.pack_coefficients`).
"""

import math

import numpy as np

from ._jit import USE_NUMBA, njit

(C_THETA, C_H, C_GAMMA, C_BETA, C_BETA_BAR, C_A0, C_KAPPA_P, C_KAPPA_S,
 C_SIG_S, C_SIG_P1, C_SIG_P2, C_ETA, C_LAM1, C_LAM2, C_ELL, C_PHI,
 C_RHO_BAR, C_LOSS_FAC, C_PI_LEV) = range(19)
N_COEF = 19

GOLDEN = 0.5 * (math.sqrt(5.0) - 1.0)
ON_NODE_TOL = 1e-10
N_OFF = 6


# ---------------------------------------------------------------- numba

@njit
def locate_nb(t, theta, h, n, gamma):
    """Interpolation stencil ``(j, w_j, w_j+1)`` for target ``t``.

    Linear between nodes; right of the grid the value is carried by node
    n-1 scaled by ``((t-theta)/(zmax-theta))**(1-gamma)``.
    """
    zmax = theta + (n - 1) * h
    if t >= zmax:
        return n - 2, 0.0, ((t - theta) / (zmax - theta)) ** (1.0 - gamma)
    s = (t - theta) / h
    if s <= 0.0:
        return 0, 1.0, 0.0
    r = math.floor(s + 0.5)
    if abs(s - r) < ON_NODE_TOL:
        j = int(r)
        if j >= n - 1:
            return n - 2, 0.0, 1.0
        return j, 1.0, 0.0
    j = int(math.floor(s))
    frac = s - j
    return j, 1.0 - frac, frac


@njit
def interp_nb(v, t, theta, h, gamma):
    j, w0, w1 = locate_nb(t, theta, h, v.shape[0], gamma)
    return w0 * v[j] + w1 * v[j + 1]


@njit
def _pi_obj_nb(pi, z, vp, vpp, v, coef):
    s = (1.0 - z) * coef[C_SIG_P1] + pi * coef[C_SIG_S]
    val = vp * pi * coef[C_KAPPA_S] + 0.5 * vpp * s * s
    if coef[C_LAM1] > 0.0:
        val += coef[C_LAM1] * interp_nb(v, z - coef[C_ETA] * pi, coef[C_THETA], coef[C_H], coef[C_GAMMA])
    return val


@njit
def _q_obj_nb(q, z, vp, v, coef):
    ell = coef[C_ELL]
    tgt = (z - ell + q) / (1.0 - ell)
    jump = coef[C_LOSS_FAC] * interp_nb(v, tgt, coef[C_THETA], coef[C_H], coef[C_GAMMA])
    return coef[C_LAM2] * (jump - coef[C_PHI] * vp * q)


@njit
def _golden_pi_nb(a, b, z, vp, vpp, v, coef, tol):
    x1 = b - GOLDEN * (b - a)
    x2 = a + GOLDEN * (b - a)
    f1 = _pi_obj_nb(x1, z, vp, vpp, v, coef)
    f2 = _pi_obj_nb(x2, z, vp, vpp, v, coef)
    while b - a > tol:
        if f1 >= f2:
            b = x2
            x2 = x1
            f2 = f1
            x1 = b - GOLDEN * (b - a)
            f1 = _pi_obj_nb(x1, z, vp, vpp, v, coef)
        else:
            a = x1
            x1 = x2
            f1 = f2
            x2 = a + GOLDEN * (b - a)
            f2 = _pi_obj_nb(x2, z, vp, vpp, v, coef)
    return 0.5 * (a + b)


@njit
def _golden_q_nb(a, b, z, vp, v, coef, tol):
    x1 = b - GOLDEN * (b - a)
    x2 = a + GOLDEN * (b - a)
    f1 = _q_obj_nb(x1, z, vp, v, coef)
    f2 = _q_obj_nb(x2, z, vp, v, coef)
    while b - a > tol:
        if f1 >= f2:
            b = x2
            x2 = x1
            f2 = f1
            x1 = b - GOLDEN * (b - a)
            f1 = _q_obj_nb(x1, z, vp, v, coef)
        else:
            a = x1
            x1 = x2
            f1 = f2
            x2 = a + GOLDEN * (b - a)
            f2 = _q_obj_nb(x2, z, vp, v, coef)
    return 0.5 * (a + b)


@njit
def _best_of_nb(cands, z, vp, vpp, v, coef):
    best = cands[0]
    fbest = _pi_obj_nb(best, z, vp, vpp, v, coef)
    for k in range(1, cands.shape[0]):
        f = _pi_obj_nb(cands[k], z, vp, vpp, v, coef)
        if f > fbest:
            best = cands[k]
            fbest = f
    return best


@njit
def controls_nb(v, coef, tol, analytic):
    """Maximise the HJB supremand at every interior node.

    Returns ``(c_hat, pi_hat, q_hat, supremand)``; node 0 and node n-1 carry
    zeros / copies of their neighbour and a NaN supremand.
    """
    n = v.shape[0]
    theta = coef[C_THETA]
    h = coef[C_H]
    c = np.zeros(n)
    pi = np.zeros(n)
    q = np.zeros(n)
    sup = np.full(n, np.nan)
    bb = coef[C_BETA_BAR]
    beta = coef[C_BETA]
    g = coef[C_GAMMA]
    eta = coef[C_ETA]
    lam1 = coef[C_LAM1]
    lam2 = coef[C_LAM2]
    ell = coef[C_ELL]
    sig_s = coef[C_SIG_S]
    cands = np.empty(3)
    for i in range(1, n - 1):
        z = theta + i * h
        vp = (v[i + 1] - v[i - 1]) / (2.0 * h)
        vpp = (v[i + 1] - 2.0 * v[i] + v[i - 1]) / (h * h)
        # consumption: closed-form first-order condition
        ci = 0.0
        if vp > 0.0:
            ci = (vp / beta) ** (1.0 / (bb - 1.0))
        # risky holding
        lev = coef[C_PI_LEV] * z
        lo = -lev
        hi = lev
        if lam1 > 0.0:
            hi = min(hi, (z - theta) * (1.0 - 1e-12) / eta)
        if lam1 == 0.0 and analytic:
            cands[0] = lo
            cands[1] = hi
            cands[2] = lo
            if vpp < 0.0:
                x = -(vp * coef[C_KAPPA_S] + vpp * (1.0 - z) * sig_s * coef[C_SIG_P1]) / (vpp * sig_s * sig_s)
                cands[2] = min(max(x, lo), hi)
            pii = _best_of_nb(cands, z, vp, vpp, v, coef)
        else:
            pii = _golden_pi_nb(lo, hi, z, vp, vpp, v, coef, tol)
        # coverage: post-loss transformed wealth must stay above theta
        qlo = max(0.0, ell + theta - z + 1e-12 * max(1.0, z))
        if lam2 > 0.0:
            qhi = max(qlo, ell) + ell
            qi = _golden_q_nb(qlo, qhi, z, vp, v, coef, tol)
        else:
            qi = qlo
        c[i] = ci
        pi[i] = pii
        q[i] = qi
        drift = (1.0 - z) * coef[C_KAPPA_P] + pii * coef[C_KAPPA_S] - ci - lam2 * coef[C_PHI] * qi
        s1 = (1.0 - z) * coef[C_SIG_P1] + pii * sig_s
        s2 = (1.0 - z) * coef[C_SIG_P2]
        val = (coef[C_A0] - coef[C_RHO_BAR]) * v[i] + vp * drift + 0.5 * vpp * (s1 * s1 + s2 * s2)
        if lam1 > 0.0:
            val += lam1 * (interp_nb(v, z - eta * pii, theta, h, g) - v[i])
        if lam2 > 0.0:
            tgt = (z - ell + qi) / (1.0 - ell)
            val += lam2 * (coef[C_LOSS_FAC] * interp_nb(v, tgt, theta, h, g) - v[i])
        if ci > 0.0:
            val += ci ** bb / (1.0 - g)
        sup[i] = val
    if n >= 3:
        c[n - 1] = c[n - 2]
        pi[n - 1] = pi[n - 2]
        q[n - 1] = q[n - 2]
    return c, pi, q, sup


@njit
def _put_nb(i, col, val, k, diag, cols, vals):
    if col == i:
        diag[i] += val
        return k
    cols[i, k] = col
    vals[i, k] = val
    return k + 1


@njit
def assemble_nb(c, pi, q, coef, central, right_value):
    """Rows of ``A = rho_bar*I - L`` and source ``b``.

    Off-diagonals are stored ELL-style: ``cols[i, :]``, ``vals[i, :]``
    (padding col = i, val = 0). Row 0: v(theta) = 0. Row n-1: v = right_value.
    """
    n = c.shape[0]
    theta = coef[C_THETA]
    h = coef[C_H]
    g = coef[C_GAMMA]
    bb = coef[C_BETA_BAR]
    lam1 = coef[C_LAM1]
    lam2 = coef[C_LAM2]
    ell = coef[C_ELL]
    diag = np.zeros(n)
    cols = np.empty((n, N_OFF), dtype=np.int64)
    vals = np.zeros((n, N_OFF))
    rhs = np.zeros(n)
    for i in range(n):
        for k in range(N_OFF):
            cols[i, k] = i
    diag[0] = 1.0
    diag[n - 1] = 1.0
    rhs[n - 1] = right_value
    for i in range(1, n - 1):
        z = theta + i * h
        drift = (1.0 - z) * coef[C_KAPPA_P] + pi[i] * coef[C_KAPPA_S] - c[i] - lam2 * coef[C_PHI] * q[i]
        s1 = (1.0 - z) * coef[C_SIG_P1] + pi[i] * coef[C_SIG_S]
        s2 = (1.0 - z) * coef[C_SIG_P2]
        dif = 0.5 * (s1 * s1 + s2 * s2)
        if central and dif - 0.5 * abs(drift) * h >= 0.0:
            lo = dif / (h * h) - drift / (2.0 * h)
            up = dif / (h * h) + drift / (2.0 * h)
        else:
            lo = dif / (h * h) + max(-drift, 0.0) / h
            up = dif / (h * h) + max(drift, 0.0) / h
        diag[i] = coef[C_RHO_BAR] - coef[C_A0] + lo + up + lam1 + lam2
        k = 0
        k = _put_nb(i, i - 1, -lo, k, diag, cols, vals)
        k = _put_nb(i, i + 1, -up, k, diag, cols, vals)
        if lam1 > 0.0:
            j, w0, w1 = locate_nb(z - coef[C_ETA] * pi[i], theta, h, n, g)
            k = _put_nb(i, j, -lam1 * w0, k, diag, cols, vals)
            k = _put_nb(i, j + 1, -lam1 * w1, k, diag, cols, vals)
        if lam2 > 0.0:
            j, w0, w1 = locate_nb((z - ell + q[i]) / (1.0 - ell), theta, h, n, g)
            f = lam2 * coef[C_LOSS_FAC]
            k = _put_nb(i, j, -f * w0, k, diag, cols, vals)
            k = _put_nb(i, j + 1, -f * w1, k, diag, cols, vals)
        if c[i] > 0.0:
            rhs[i] = c[i] ** bb / (1.0 - g)
    return diag, cols, vals, rhs


@njit
def psor_nb(indptr, indices, data, diag, b, u, v, omega, tol, max_sweeps):
    """Projected SOR sweeps in place on ``v``; returns ``(sweeps, last_change)``."""
    n = b.shape[0]
    change = np.inf
    for sweep in range(max_sweeps):
        change = 0.0
        for k in range(n):
            s = 0.0
            for p in range(indptr[k], indptr[k + 1]):
                s += data[p] * v[indices[p]]
            w = v[k] + omega / diag[k] * (b[k] - s)
            new = w if w > u[k] else u[k]
            d = abs(new - v[k])
            if d > change:
                change = d
            v[k] = new
        if change < tol:
            return sweep + 1, change
    return max_sweeps, change


# ---------------------------------------------------------------- numpy

def locate_np(t, theta, h, n, gamma):
    t = np.asarray(t, dtype=float)
    zmax = theta + (n - 1) * h
    s = (t - theta) / h
    r = np.floor(s + 0.5)
    on = np.abs(s - r) < ON_NODE_TOL
    j = np.where(on, r, np.floor(s))
    frac = np.where(on, 0.0, s - np.floor(s))
    right = t >= zmax
    low = s <= 0.0
    top = on & (j >= n - 1)
    j = np.clip(j, 0, n - 2).astype(np.int64)
    w1 = np.where(top, 1.0, frac)
    with np.errstate(invalid="ignore"):
        ext = ((np.maximum(t, zmax) - theta) / (zmax - theta)) ** (1.0 - gamma)
    w1 = np.where(right, ext, np.where(low, 0.0, w1))
    w0 = np.where(right | top, 0.0, np.where(low, 1.0, 1.0 - frac))
    j = np.where(right, n - 2, np.where(low, 0, j))
    return j, w0, w1


def interp_np(v, t, theta, h, gamma):
    j, w0, w1 = locate_np(t, theta, h, v.shape[0], gamma)
    return w0 * v[j] + w1 * v[j + 1]


def _pi_obj_np(pi, z, vp, vpp, v, coef):
    s = (1.0 - z) * coef[C_SIG_P1] + pi * coef[C_SIG_S]
    val = vp * pi * coef[C_KAPPA_S] + 0.5 * vpp * s * s
    if coef[C_LAM1] > 0.0:
        val = val + coef[C_LAM1] * interp_np(v, z - coef[C_ETA] * pi, coef[C_THETA], coef[C_H], coef[C_GAMMA])
    return val


def _q_obj_np(q, z, vp, v, coef):
    ell = coef[C_ELL]
    tgt = (z - ell + q) / (1.0 - ell)
    jump = coef[C_LOSS_FAC] * interp_np(v, tgt, coef[C_THETA], coef[C_H], coef[C_GAMMA])
    return coef[C_LAM2] * (jump - coef[C_PHI] * vp * q)


def _golden_np(f, a, b, tol):
    a = a.copy()
    b = b.copy()
    x1 = b - GOLDEN * (b - a)
    x2 = a + GOLDEN * (b - a)
    f1 = f(x1)
    f2 = f(x2)
    width = np.max(b - a) if a.size else 0.0
    n_iter = 0 if width <= tol else int(math.ceil(math.log(tol / width) / math.log(GOLDEN)))
    for _ in range(n_iter):
        left = f1 >= f2
        b = np.where(left, x2, b)
        a = np.where(left, a, x1)
        nx1 = np.where(left, b - GOLDEN * (b - a), x2)
        nx2 = np.where(left, x1, a + GOLDEN * (b - a))
        fnew = f(np.where(left, nx1, nx2))
        f1, f2 = np.where(left, fnew, f2), np.where(left, f1, fnew)
        x1, x2 = nx1, nx2
    return 0.5 * (a + b)


def controls_np(v, coef, tol, analytic):
    n = v.shape[0]
    theta, h = coef[C_THETA], coef[C_H]
    bb, beta, g = coef[C_BETA_BAR], coef[C_BETA], coef[C_GAMMA]
    eta, lam1, lam2, ell, sig_s = coef[C_ETA], coef[C_LAM1], coef[C_LAM2], coef[C_ELL], coef[C_SIG_S]
    idx = np.arange(1, n - 1)
    z = theta + idx * h
    vp = (v[2:] - v[:-2]) / (2.0 * h)
    vpp = (v[2:] - 2.0 * v[1:-1] + v[:-2]) / (h * h)
    vi = v[1:-1]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        ci = np.where(vp > 0.0, (np.maximum(vp, 1e-300) / beta) ** (1.0 / (bb - 1.0)), 0.0)
    lev = coef[C_PI_LEV] * z
    lo, hi = -lev, lev.copy()
    if lam1 > 0.0:
        hi = np.minimum(hi, (z - theta) * (1.0 - 1e-12) / eta)

    def fpi(x):
        return _pi_obj_np(x, z, vp, vpp, v, coef)

    if lam1 == 0.0 and analytic:
        with np.errstate(divide="ignore", invalid="ignore"):
            x = -(vp * coef[C_KAPPA_S] + vpp * (1.0 - z) * sig_s * coef[C_SIG_P1]) / (vpp * sig_s * sig_s)
        x = np.where(vpp < 0.0, np.clip(x, lo, hi), lo)
        cands = np.stack([lo, hi, x])
        vals = np.stack([fpi(cc) for cc in cands])
        # first maximum wins, matching the loop kernel
        pii = cands[np.argmax(vals, axis=0), np.arange(z.size)]
    else:
        pii = _golden_np(fpi, lo, hi, tol)
    qlo = np.maximum(0.0, ell + theta - z + 1e-12 * np.maximum(1.0, z))
    if lam2 > 0.0:
        qi = _golden_np(lambda x: _q_obj_np(x, z, vp, v, coef), qlo, np.maximum(qlo, ell) + ell, tol)
    else:
        qi = qlo
    drift = (1.0 - z) * coef[C_KAPPA_P] + pii * coef[C_KAPPA_S] - ci - lam2 * coef[C_PHI] * qi
    s1 = (1.0 - z) * coef[C_SIG_P1] + pii * sig_s
    s2 = (1.0 - z) * coef[C_SIG_P2]
    val = (coef[C_A0] - coef[C_RHO_BAR]) * vi + vp * drift + 0.5 * vpp * (s1 * s1 + s2 * s2)
    if lam1 > 0.0:
        val = val + lam1 * (interp_np(v, z - eta * pii, theta, h, g) - vi)
    if lam2 > 0.0:
        val = val + lam2 * (coef[C_LOSS_FAC] * interp_np(v, (z - ell + qi) / (1.0 - ell), theta, h, g) - vi)
    with np.errstate(divide="ignore"):
        val = val + np.where(ci > 0.0, np.maximum(ci, 0.0) ** bb, 0.0) / (1.0 - g)
    c = np.zeros(n)
    pi = np.zeros(n)
    q = np.zeros(n)
    sup = np.full(n, np.nan)
    c[1:-1], pi[1:-1], q[1:-1], sup[1:-1] = ci, pii, qi, val
    c[-1], pi[-1], q[-1] = c[-2], pi[-2], q[-2]
    return c, pi, q, sup


def assemble_np(c, pi, q, coef, central, right_value):
    n = c.shape[0]
    theta, h, g, bb = coef[C_THETA], coef[C_H], coef[C_GAMMA], coef[C_BETA_BAR]
    lam1, lam2, ell = coef[C_LAM1], coef[C_LAM2], coef[C_ELL]
    idx = np.arange(1, n - 1)
    z = theta + idx * h
    ci, pii, qi = c[1:-1], pi[1:-1], q[1:-1]
    drift = (1.0 - z) * coef[C_KAPPA_P] + pii * coef[C_KAPPA_S] - ci - lam2 * coef[C_PHI] * qi
    s1 = (1.0 - z) * coef[C_SIG_P1] + pii * coef[C_SIG_S]
    s2 = (1.0 - z) * coef[C_SIG_P2]
    dif = 0.5 * (s1 * s1 + s2 * s2)
    use_c = (dif - 0.5 * np.abs(drift) * h >= 0.0) if central else np.zeros(z.size, dtype=bool)
    lo = np.where(use_c, dif / h**2 - drift / (2 * h), dif / h**2 + np.maximum(-drift, 0.0) / h)
    up = np.where(use_c, dif / h**2 + drift / (2 * h), dif / h**2 + np.maximum(drift, 0.0) / h)
    diag = np.ones(n)
    diag[1:-1] = coef[C_RHO_BAR] - coef[C_A0] + lo + up + lam1 + lam2
    entries = [(idx - 1, -lo), (idx + 1, -up)]
    if lam1 > 0.0:
        j, w0, w1 = locate_np(z - coef[C_ETA] * pii, theta, h, n, g)
        entries += [(j, -lam1 * w0), (j + 1, -lam1 * w1)]
    if lam2 > 0.0:
        j, w0, w1 = locate_np((z - ell + qi) / (1.0 - ell), theta, h, n, g)
        f = lam2 * coef[C_LOSS_FAC]
        entries += [(j, -f * w0), (j + 1, -f * w1)]
    cols = np.repeat(np.arange(n)[:, None], N_OFF, axis=1)
    vals = np.zeros((n, N_OFF))
    k = np.zeros(z.size, dtype=np.int64)
    for col, val in entries:
        self_ = col == idx
        np.add.at(diag, idx[self_], val[self_])
        rows = idx[~self_]
        cols[rows, k[~self_]] = col[~self_]
        vals[rows, k[~self_]] = val[~self_]
        k = k + (~self_)
    rhs = np.zeros(n)
    with np.errstate(divide="ignore"):
        rhs[1:-1] = np.where(ci > 0.0, np.maximum(ci, 0.0) ** bb, 0.0) / (1.0 - g)
    rhs[-1] = right_value
    return diag, cols, vals, rhs


def psor_np(indptr, indices, data, diag, b, u, v, omega, tol, max_sweeps):
    n = b.shape[0]
    rows = [(indices[indptr[k]:indptr[k + 1]], data[indptr[k]:indptr[k + 1]]) for k in range(n)]
    change = np.inf
    for sweep in range(max_sweeps):
        change = 0.0
        for k, (cols, vals) in enumerate(rows):
            w = v[k] + omega / diag[k] * (b[k] - vals @ v[cols])
            new = max(w, u[k])
            change = max(change, abs(new - v[k]))
            v[k] = new
        if change < tol:
            return sweep + 1, change
    return max_sweeps, change


if USE_NUMBA:
    locate, interp = locate_nb, interp_nb
    controls, assemble, psor = controls_nb, assemble_nb, psor_nb
else:  # pragma: no cover
    locate, interp = locate_np, interp_np
    controls, assemble, psor = controls_np, assemble_np, psor_np
