"""Monte Carlo simulation of wealth, durable stock and prices under a strategy.

Paths run on a fixed ``dt`` grid: ``P`` and ``S`` use exact log-normal steps,
``K`` decays exactly, and ``X`` takes Euler-Maruyama steps. Poisson jumps are
drawn as exponential arrival times and applied at the start of the step that
contains them. Discounted utility is summed with the left-point rule.

Random numbers come from counter-based SplitMix64 streams keyed by
``(seed, path, stream)``, so a path's draws do not depend on batching or on
the backend; the numba kernel and the numpy fallback replay identical numbers.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _jit
from ._jit import njit, njit_vec
from .notc import NoTCSolution, solve_no_tc, value_function_no_tc
from .params import ModelParams, require_valid


class StrategyError(ValueError):
    """Controls returned by a strategy violate c >= 0, K >= 0 or q >= 0."""


class TradeError(ValueError):
    """A band trade would leave non-positive wealth."""


@dataclass(frozen=True)
class SimConfig:
    """``T=None`` picks the horizon from the 0.1% tail rule."""

    T: float | None = None
    dt: float = 1.0 / 250.0
    n_paths: int = 10_000
    seed: int = 0
    batch: int = 4096
    workers: int = 1
    tail_fraction: float = 1e-3
    fast: bool = True

    def __post_init__(self):
        if self.T is not None and not self.T > 0.0:
            raise ValueError("horizon T must be > 0")
        if not self.dt > 0.0 or (self.T is not None and self.dt > self.T):
            raise ValueError("dt must satisfy 0 < dt <= T")
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if self.batch < 1 or self.workers < 1:
            raise ValueError("batch and workers must be >= 1")
        if not 0.0 < self.tail_fraction < 1.0:
            raise ValueError("tail_fraction must lie in (0, 1)")


@dataclass
class PathState:
    """Per-path state arrays (terminal states after a run)."""

    t: float
    X: np.ndarray
    P: np.ndarray
    K: np.ndarray
    S: np.ndarray
    N1: np.ndarray
    N2: np.ndarray


@dataclass
class SimResult:
    mean: float
    stderr: float
    solvency_violations: int
    truncation_bound: float
    n_paths: int
    dt: float
    T: float
    n_steps: int
    seed: int
    terminal: PathState
    path_values: np.ndarray


# ------------------------------------------------------------------ strategies

@dataclass(frozen=True)
class FractionStrategy:
    """Constant wealth fractions with costless rebalancing of ``K`` every step."""

    alpha_c: float
    alpha_pi1: float
    alpha_k: float
    alpha_q: float

    def rebalance(self, X, P, K):
        return X, self.alpha_k * X / P

    def controls(self, X, P, K):
        return self.alpha_c * X, self.alpha_pi1 * X, self.alpha_q * X


@dataclass(frozen=True)
class BandStrategy:
    """Trade back to ``z_star`` outside ``[z_low, z_high]``; otherwise use node controls."""

    theta: float
    z_low: float
    z_high: float
    z_star: float
    z_max: float
    c_hat: np.ndarray
    pi1_hat: np.ndarray
    q_hat: np.ndarray

    @property
    def n(self) -> int:
        return len(self.c_hat)

    def z_of(self, X, P, K):
        X, P, K = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (X, P, K)))
        kp = K * P
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(kp > 0.0, X / np.where(kp > 0.0, kp, 1.0), np.inf)

    def trade(self, X, P, K):
        """Pay ``theta K P`` and reset ``K`` so that ``z == z_star`` afterwards."""
        X = np.asarray(X, dtype=float)
        P = np.asarray(P, dtype=float)
        left = X - self.theta * np.asarray(K, dtype=float) * P
        if np.any(left <= 0.0):
            raise TradeError("post-trade wealth must be > 0")
        return left, left / (self.z_star * P)

    def rebalance(self, X, P, K):
        z = self.z_of(X, P, K)
        out = (z < self.z_low) | (z > self.z_high)
        if not np.any(out):
            return X, K
        X = np.array(X, dtype=float, copy=True)
        K = np.array(K, dtype=float, copy=True)
        X[out], K[out] = self.trade(X[out], P[out], K[out])
        return X, K

    def controls(self, X, P, K):
        z = self.z_of(X, P, K)
        nodes = np.linspace(self.theta, self.z_max, self.n)
        kp = K * P
        zc = np.clip(z, self.theta, self.z_max)
        return (np.interp(zc, nodes, self.c_hat) * kp,
                np.interp(zc, nodes, self.pi1_hat) * kp,
                np.interp(zc, nodes, self.q_hat) * kp)


def no_tc_strategy(sol: NoTCSolution) -> FractionStrategy:
    return FractionStrategy(sol.alpha_c, sol.alpha_pi1, sol.alpha_k, sol.alpha_q)


def band_strategy(bands, policy, grid) -> BandStrategy:
    """Rule built from a converged transaction-cost solve (``bands``, ``policy`` on ``grid``)."""
    if not grid.theta <= bands.z_low <= bands.z_star <= bands.z_high <= grid.z_max:
        raise ValueError("bands must satisfy theta <= z_low <= z_star <= z_high <= z_max")
    return BandStrategy(grid.theta, bands.z_low, bands.z_high, bands.z_star, grid.z_max,
                        np.asarray(policy.c_hat, float), np.asarray(policy.pi1_hat, float),
                        np.asarray(policy.q_hat, float))


# ------------------------------------------------------------------ horizon

def expected_growth(sol: NoTCSolution, params: ModelParams) -> float:
    """Mean growth rate of wealth under constant fractions (jumps included)."""
    p = params
    return (p.r + sol.alpha_pi1 * (p.mu_S - p.r)
            + sol.alpha_k * (p.mu_P - p.r - p.delta)
            - p.phi * p.lambda_2 * sol.alpha_q - sol.alpha_c
            - p.lambda_2 * (p.ell * sol.alpha_k - sol.alpha_q))


def tail_decay_rate(sol: NoTCSolution, params: ModelParams) -> float:
    """Rate at which ``exp(-rho T) Vbar(E X_T, E P_T)`` decays relative to ``Vbar(x0, p0)``."""
    p = params
    g = p.gamma
    return p.rho - (1 - g) * expected_growth(sol, p) + (1 - p.beta) * (1 - g) * p.mu_P


def default_horizon(params: ModelParams, sol: NoTCSolution | None = None,
                    tail_fraction: float = 1e-3) -> float:
    if sol is None:
        sol = solve_no_tc(params)
    rate = tail_decay_rate(sol, params)
    if not rate > 0.0:
        raise ValueError(f"tail rule has no finite horizon (decay rate {rate:.4g})")
    return math.log(1.0 / tail_fraction) / rate


# ------------------------------------------------------------------ RNG

_G = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30, _S27, _S31, _S11 = np.uint64(30), np.uint64(27), np.uint64(31), np.uint64(11)
_TWO53 = 1.0 / 9007199254740992.0
STREAM_W, STREAM_N1, STREAM_N2 = 1, 2, 3


@njit_vec
def _mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit_vec
def _stream_key(seed, path, stream):
    base = _mix64(np.uint64(seed) + _G)
    k = _mix64(base + np.uint64(path) * _G)
    return _mix64(k ^ np.uint64(stream))


@njit_vec
def _uniform(key, ctr):
    h = _mix64(key + (np.uint64(ctr) + np.uint64(1)) * _G)
    return (float(h >> _S11) + 0.5) * _TWO53


# Acklam's rational approximation to the normal quantile
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


@njit
def _norm_ppf(u):
    if u < _P_LOW:
        q = math.sqrt(-2.0 * math.log(u))
        return ((((( _C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    if u > 1.0 - _P_LOW:
        q = math.sqrt(-2.0 * math.log(1.0 - u))
        return -((((( _C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    q = u - 0.5
    r = q * q
    return ((((( _A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
        ((((( _B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)


def stream_uniforms(seed: int, path: int, stream: int, n: int) -> np.ndarray:
    """First ``n`` uniforms of one stream (numpy; for inspection and tests)."""
    key = _stream_key_np(seed, np.array([path], dtype=np.uint64), stream)[0]
    return _uniform_np(np.full(n, key, dtype=np.uint64), np.arange(n, dtype=np.uint64))


def _mix64_np(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def _stream_key_np(seed, paths, stream):
    base = _mix64_np(np.array([seed], dtype=np.uint64) + _G)
    k = _mix64_np(base + paths.astype(np.uint64) * _G)
    return _mix64_np(k ^ np.uint64(stream))


def _uniform_np(keys, ctr):
    h = _mix64_np(keys + (ctr.astype(np.uint64) + np.uint64(1)) * _G)
    return ((h >> _S11).astype(np.float64) + 0.5) * _TWO53


def _norm_ppf_np(u):
    u = np.asarray(u, dtype=float)
    out = np.empty_like(u)
    lo = u < _P_LOW
    hi = u > 1.0 - _P_LOW
    mid = ~(lo | hi)
    q = u[mid] - 0.5
    r = q * q
    a, b = _A, _B
    out[mid] = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / \
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)
    for mask, sign, arg in ((lo, 1.0, u), (hi, -1.0, 1.0 - u)):
        if np.any(mask):
            q = np.sqrt(-2.0 * np.log(arg[mask]))
            c, d = _C, _D
            out[mask] = sign * (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
                ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    return out


# ------------------------------------------------------------------ kernels

# model constants handed to the kernels
(K_R, K_MUBAR_S, K_MU_P, K_SIG_P1, K_SIG_P2, K_SIG_S, K_MU_S, K_ETA, K_LAM1, K_LAM2,
 K_ELL, K_DELTA, K_PHI, K_RHO, K_BETA, K_GAMMA) = range(16)
N_PRM = 16
# per-path output columns
(O_VALUE, O_INSOLVENT, O_X, O_P, O_K, O_S, O_N1, O_N2) = range(8)
N_OUT = 8
MODE_FRACTIONS, MODE_BANDS = 0, 1


def _pack(params: ModelParams) -> np.ndarray:
    p = params
    prm = np.zeros(N_PRM)
    prm[K_R] = p.r
    prm[K_MUBAR_S] = p.mu_S + p.lambda_1 * p.eta - p.r
    prm[K_MU_P] = p.mu_P
    prm[K_SIG_P1] = p.sigma_P1
    prm[K_SIG_P2] = p.sigma_P2
    prm[K_SIG_S] = p.sigma_S
    prm[K_MU_S] = p.mu_S
    prm[K_ETA] = p.eta
    prm[K_LAM1] = p.lambda_1
    prm[K_LAM2] = p.lambda_2
    prm[K_ELL] = p.ell
    prm[K_DELTA] = p.delta
    prm[K_PHI] = p.phi
    prm[K_RHO] = p.rho
    prm[K_BETA] = p.beta
    prm[K_GAMMA] = p.gamma
    return prm


@njit
def _flow_utility(c, k, beta, gamma):
    if c > 0.0 and k > 0.0:
        one_m_g = 1.0 - gamma
        return math.exp(beta * one_m_g * math.log(c) + (1.0 - beta) * one_m_g * math.log(k)) / one_m_g
    if gamma < 1.0:
        return 0.0
    return -math.inf


@njit
def _interp_nodes(vals, theta, h, z):
    n = vals.shape[0]
    s = (z - theta) / h
    if s <= 0.0:
        return vals[0]
    if s >= n - 1:
        return vals[n - 1]
    j = int(s)
    w = s - j
    return (1.0 - w) * vals[j] + w * vals[j + 1]


@njit
def _rebalance_nb(mode, fr, band, X, P, K):
    """Return (X, K, ok); ok is False when a band trade leaves no wealth."""
    if mode == MODE_FRACTIONS:
        return X, fr[2] * X / P, True
    kp = K * P
    if kp > 0.0:
        z = X / kp
        if band[1] <= z <= band[2]:
            return X, K, True
    left = X - band[0] * kp
    if left <= 0.0:
        return X, K, False
    return left, left / (band[3] * P), True


@njit
def _controls_nb(mode, fr, band, pc, ppi, pq, X, P, K):
    if mode == MODE_FRACTIONS:
        return fr[0] * X, fr[1] * X, fr[3] * X
    kp = K * P
    z = X / kp
    h = (band[4] - band[0]) / (pc.shape[0] - 1)
    return (_interp_nodes(pc, band[0], h, z) * kp,
            _interp_nodes(ppi, band[0], h, z) * kp,
            _interp_nodes(pq, band[0], h, z) * kp)


@njit
def _simulate_nb(mode, fr, band, pc, ppi, pq, prm, x0, p0, k0, s0,
                 n_steps, dt, seed, first_path, out):
    """Fill ``out[i]`` for paths ``first_path + i``. Returns 0, or 1 on invalid controls."""
    r, mubar_s, mu_p = prm[K_R], prm[K_MUBAR_S], prm[K_MU_P]
    sp1, sp2, ss, mu_s = prm[K_SIG_P1], prm[K_SIG_P2], prm[K_SIG_S], prm[K_MU_S]
    eta, lam1, lam2, ell = prm[K_ETA], prm[K_LAM1], prm[K_LAM2], prm[K_ELL]
    delta, phi, rho, beta, gamma = prm[K_DELTA], prm[K_PHI], prm[K_RHO], prm[K_BETA], prm[K_GAMMA]
    sq = math.sqrt(dt)
    lp_drift = (mu_p - 0.5 * (sp1 * sp1 + sp2 * sp2)) * dt
    ls_drift = (mu_s + lam1 * eta - 0.5 * ss * ss) * dt
    k_decay = math.exp(-delta * dt)
    disc_step = math.exp(-rho * dt)
    log_crash = math.log(1.0 - eta) if eta < 1.0 else -math.inf
    for i in range(out.shape[0]):
        path = first_path + i
        kw = _stream_key(seed, path, STREAM_W)
        k1 = _stream_key(seed, path, STREAM_N1)
        k2 = _stream_key(seed, path, STREAM_N2)
        X, P, K, ls = x0, p0, k0, math.log(s0)
        lp = math.log(p0)
        j1 = 0
        j2 = 0
        next1 = math.inf
        next2 = math.inf
        if lam1 > 0.0:
            next1 = -math.log(_uniform(k1, 0)) / lam1
        if lam2 > 0.0:
            next2 = -math.log(_uniform(k2, 0)) / lam2
        total = 0.0
        disc = 1.0
        alive = True
        for step in range(n_steps):
            t_end = (step + 1) * dt
            X, K, ok = _rebalance_nb(mode, fr, band, X, P, K)
            if not ok or X <= 0.0:
                alive = False
                break
            c, pi, q = _controls_nb(mode, fr, band, pc, ppi, pq, X, P, K)
            # events in time order, each followed by the strategy's response
            while alive and (next1 < t_end or next2 < t_end):
                if next1 <= next2:
                    j1 += 1
                    next1 -= math.log(_uniform(k1, j1)) / lam1
                    X -= pi * eta
                    ls += log_crash
                else:
                    j2 += 1
                    next2 -= math.log(_uniform(k2, j2)) / lam2
                    X -= K * P * ell - q
                    K *= 1.0 - ell
                if X <= 0.0:
                    alive = False
                    break
                X, K, ok = _rebalance_nb(mode, fr, band, X, P, K)
                if not ok:
                    alive = False
                    break
                c, pi, q = _controls_nb(mode, fr, band, pc, ppi, pq, X, P, K)
            if not alive:
                break
            if c < 0.0 or K < 0.0 or q < 0.0:
                return 1
            total += disc * _flow_utility(c, K, beta, gamma) * dt
            disc *= disc_step
            dw1 = sq * _norm_ppf(_uniform(kw, 2 * step))
            dw2 = sq * _norm_ppf(_uniform(kw, 2 * step + 1))
            kp = K * P
            X += ((r * X + pi * mubar_s + kp * (mu_p - r - delta) - phi * lam2 * q - c) * dt
                  + (pi * ss + kp * sp1) * dw1 + kp * sp2 * dw2)
            lp += lp_drift + sp1 * dw1 + sp2 * dw2
            P = math.exp(lp)
            K *= k_decay
            ls += ls_drift + ss * dw1
            if X <= 0.0:
                alive = False
                break
        out[i, O_VALUE] = total
        out[i, O_INSOLVENT] = 0.0 if alive else 1.0
        out[i, O_X] = X if alive else 0.0
        out[i, O_P] = P
        out[i, O_K] = K
        out[i, O_S] = math.exp(ls)
        out[i, O_N1] = j1
        out[i, O_N2] = j2
    return 0


def _simulate_np(strategy, params, x0, p0, k0, s0, n_steps, dt, seed, first_path, count):
    """Vectorised over paths, same draws and update order as the kernel."""
    p = params
    paths = np.arange(first_path, first_path + count, dtype=np.uint64)
    kw = _stream_key_np(seed, paths, STREAM_W)
    k1 = _stream_key_np(seed, paths, STREAM_N1)
    k2 = _stream_key_np(seed, paths, STREAM_N2)
    sq = math.sqrt(dt)
    lp_drift = (p.mu_P - 0.5 * (p.sigma_P1 ** 2 + p.sigma_P2 ** 2)) * dt
    ls_drift = (p.mu_S + p.lambda_1 * p.eta - 0.5 * p.sigma_S ** 2) * dt
    mubar_s = p.mu_S + p.lambda_1 * p.eta - p.r
    k_decay = math.exp(-p.delta * dt)
    disc_step = math.exp(-p.rho * dt)
    log_crash = math.log(1.0 - p.eta) if p.eta < 1.0 else -math.inf

    X = np.full(count, float(x0))
    P = np.full(count, float(p0))
    K = np.full(count, float(k0))
    ls = np.full(count, math.log(s0))
    lp = np.full(count, math.log(p0))
    j1 = np.zeros(count, dtype=np.int64)
    j2 = np.zeros(count, dtype=np.int64)
    zero = np.zeros(count, dtype=np.uint64)
    next1 = -np.log(_uniform_np(k1, zero)) / p.lambda_1 if p.lambda_1 > 0 else np.full(count, np.inf)
    next2 = -np.log(_uniform_np(k2, zero)) / p.lambda_2 if p.lambda_2 > 0 else np.full(count, np.inf)
    total = np.zeros(count)
    alive = np.ones(count, dtype=bool)
    disc = 1.0

    def rebalance(mask):
        nonlocal X, K
        if isinstance(strategy, BandStrategy):
            z = strategy.z_of(X[mask], P[mask], K[mask])
            out = (z < strategy.z_low) | (z > strategy.z_high)
            idx = np.flatnonzero(mask)[out]
            left = X[idx] - strategy.theta * K[idx] * P[idx]
            bad = left <= 0.0
            alive[idx[bad]] = False
            good = idx[~bad]
            X[good] = left[~bad]
            K[good] = left[~bad] / (strategy.z_star * P[good])
        else:
            X[mask], K[mask] = strategy.rebalance(X[mask], P[mask], K[mask])

    for step in range(n_steps):
        t_end = (step + 1) * dt
        live = alive.copy()
        rebalance(live)
        alive &= X > 0.0
        live = alive.copy()
        c = np.zeros(count)
        pi = np.zeros(count)
        q = np.zeros(count)
        c[live], pi[live], q[live] = strategy.controls(X[live], P[live], K[live])
        hit = live & ((next1 < t_end) | (next2 < t_end))
        while np.any(hit):
            crash = hit & (next1 <= next2)
            loss = hit & ~crash
            j1[crash] += 1
            next1[crash] -= np.log(_uniform_np(k1[crash], j1[crash].astype(np.uint64))) / p.lambda_1
            X[crash] -= pi[crash] * p.eta
            ls[crash] += log_crash
            j2[loss] += 1
            next2[loss] -= np.log(_uniform_np(k2[loss], j2[loss].astype(np.uint64))) / p.lambda_2
            X[loss] -= K[loss] * P[loss] * p.ell - q[loss]
            K[loss] *= 1.0 - p.ell
            alive[hit] &= X[hit] > 0.0
            again = hit & alive
            rebalance(again)
            again &= alive
            c[again], pi[again], q[again] = strategy.controls(X[again], P[again], K[again])
            live = alive.copy()
            hit = live & ((next1 < t_end) | (next2 < t_end))
        if np.any(c[live] < 0.0) or np.any(K[live] < 0.0) or np.any(q[live] < 0.0):
            raise StrategyError("strategy returned negative c, K or q")
        total[live] += disc * _flow_utility_np(c[live], K[live], p.beta, p.gamma) * dt
        disc *= disc_step
        ctr = np.full(count, 2 * step, dtype=np.uint64)
        dw1 = sq * _norm_ppf_np(_uniform_np(kw, ctr))
        dw2 = sq * _norm_ppf_np(_uniform_np(kw, ctr + np.uint64(1)))
        kp = K * P
        dX = ((p.r * X + pi * mubar_s + kp * (p.mu_P - p.r - p.delta) - p.phi * p.lambda_2 * q - c) * dt
              + (pi * p.sigma_S + kp * p.sigma_P1) * dw1 + kp * p.sigma_P2 * dw2)
        X = np.where(live, X + dX, X)
        lp = np.where(live, lp + lp_drift + p.sigma_P1 * dw1 + p.sigma_P2 * dw2, lp)
        P = np.exp(lp)
        K = np.where(live, K * k_decay, K)
        ls = np.where(live, ls + ls_drift + p.sigma_S * dw1, ls)
        alive &= ~live | (X > 0.0)
        if not np.any(alive):
            break
    out = np.zeros((count, N_OUT))
    out[:, O_VALUE] = total
    out[:, O_INSOLVENT] = (~alive).astype(float)
    out[:, O_X] = np.where(alive, X, 0.0)
    out[:, O_P] = P
    out[:, O_K] = K
    out[:, O_S] = np.exp(ls)
    out[:, O_N1] = j1
    out[:, O_N2] = j2
    return out


def _flow_utility_np(c, k, beta, gamma):
    one_m_g = 1.0 - gamma
    pos = (c > 0.0) & (k > 0.0)
    out = np.full(c.shape, 0.0 if gamma < 1.0 else -np.inf)
    out[pos] = np.exp(beta * one_m_g * np.log(c[pos]) + (1.0 - beta) * one_m_g * np.log(k[pos])) / one_m_g
    return out


# ------------------------------------------------------------------ constant-fraction fast path

LANES = 512
FAST_STEP_LIMIT = 0.2   # bound on |g| and on the log-growth step for the series below
Z_MAX_DRAW = 8.5        # largest |normal| the quantile approximation can return


@njit_vec
def _log1p_small(g):
    # 2 atanh(s), s = g / (2 + g); |g| <= 0.2 gives |s| <= 0.112
    s = g / (2.0 + g)
    s2 = s * s
    p = 1.0 / 19.0
    p = p * s2 + 1.0 / 17.0
    p = p * s2 + 1.0 / 15.0
    p = p * s2 + 1.0 / 13.0
    p = p * s2 + 1.0 / 11.0
    p = p * s2 + 1.0 / 9.0
    p = p * s2 + 1.0 / 7.0
    p = p * s2 + 1.0 / 5.0
    p = p * s2 + 1.0 / 3.0
    p = p * s2 + 1.0
    return 2.0 * s * p


@njit_vec
def _exp_small(y):
    # Taylor to degree 16; exact to rounding for |y| <= 0.5
    p = 1.0 / 20922789888000.0
    p = p * y + 1.0 / 1307674368000.0
    p = p * y + 1.0 / 87178291200.0
    p = p * y + 1.0 / 6227020800.0
    p = p * y + 1.0 / 479001600.0
    p = p * y + 1.0 / 39916800.0
    p = p * y + 1.0 / 3628800.0
    p = p * y + 1.0 / 362880.0
    p = p * y + 1.0 / 40320.0
    p = p * y + 1.0 / 5040.0
    p = p * y + 1.0 / 720.0
    p = p * y + 1.0 / 120.0
    p = p * y + 1.0 / 24.0
    p = p * y + 1.0 / 6.0
    p = p * y + 0.5
    p = p * y + 1.0
    return p * y + 1.0


@njit_vec
def _ppf_central(u):
    q = u - 0.5
    r = q * q
    return ((((( _A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
        ((((( _B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)



@njit_vec
def _ppf_tail(u):
    # tails for the lane kernel; kept apart from _norm_ppf so that one is
    # never compiled under the lane kernel's fastmath flags
    t = u if u < 0.5 else 1.0 - u
    s = 1.0 if u < 0.5 else -1.0
    q = math.sqrt(-2.0 * math.log(t))
    return s * ((((( _C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
        ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)

def fast_path_ok(fr, params: ModelParams, dt: float) -> bool:
    """True when every Euler factor ``1 + g`` and log-step stays inside the series range."""
    p = params
    a, b1, b2 = _fraction_coeffs(fr, p)
    g_max = abs(a) * dt + (abs(b1) + abs(b2)) * math.sqrt(dt) * Z_MAX_DRAW
    lp_max = (abs(p.mu_P) + 0.5 * (p.sigma_P1 ** 2 + p.sigma_P2 ** 2)) * dt \
        + (abs(p.sigma_P1) + abs(p.sigma_P2)) * math.sqrt(dt) * Z_MAX_DRAW
    if g_max > FAST_STEP_LIMIT:
        return False
    one_m_g = 1.0 - p.gamma
    a_p = (1.0 - p.beta) * one_m_g
    y_max = abs(one_m_g) * 1.2 * g_max + abs(a_p) * lp_max + p.rho * dt
    return y_max <= 0.5


def _fraction_coeffs(fr, p):
    ac, api, ak, aq = fr
    a = (p.r + api * (p.mu_S + p.lambda_1 * p.eta - p.r) + ak * (p.mu_P - p.r - p.delta)
         - p.phi * p.lambda_2 * aq - ac)
    return a, api * p.sigma_S + ak * p.sigma_P1, ak * p.sigma_P2


@njit_vec
def _simulate_fractions_nb(fr, coeffs, prm, x0, p0, s0, n_steps, dt, seed, first_path, out):
    """Constant-fraction rule, ``LANES`` paths advanced together one step at a time.

    Tracks ``U = exp(-rho t) X**(1-gamma) P**(-(1-beta)(1-gamma))`` by its
    one-step ratio so the inner loop is free of libm calls.
    """
    a, b1, b2 = coeffs[0], coeffs[1], coeffs[2]
    sp1, sp2, ss, mu_s = prm[K_SIG_P1], prm[K_SIG_P2], prm[K_SIG_S], prm[K_MU_S]
    eta, lam1, lam2, ell = prm[K_ETA], prm[K_LAM1], prm[K_LAM2], prm[K_ELL]
    mu_p, rho, beta, gamma = prm[K_MU_P], prm[K_RHO], prm[K_BETA], prm[K_GAMMA]
    ac, api, ak, aq = fr[0], fr[1], fr[2], fr[3]
    one_m_g = 1.0 - gamma
    a_p = (1.0 - beta) * one_m_g
    util_c = math.exp(beta * one_m_g * math.log(ac) + (1.0 - beta) * one_m_g * math.log(ak)) / one_m_g
    sq = math.sqrt(dt)
    lp_drift = (mu_p - 0.5 * (sp1 * sp1 + sp2 * sp2)) * dt
    ls_drift = (mu_s + lam1 * eta - 0.5 * ss * ss) * dt
    rho_dt = rho * dt
    log_crash = math.log(1.0 - eta) if eta < 1.0 else -math.inf
    fac_crash = 1.0 - api * eta
    fac_loss = 1.0 - ak * ell + aq
    n_total = out.shape[0]
    kw = np.empty(LANES, dtype=np.uint64)
    k1 = np.empty(LANES, dtype=np.uint64)
    k2 = np.empty(LANES, dtype=np.uint64)
    X = np.empty(LANES)
    U = np.empty(LANES)
    lp = np.empty(LANES)
    ls = np.empty(LANES)
    tot = np.empty(LANES)
    next1 = np.empty(LANES)
    next2 = np.empty(LANES)
    j1 = np.empty(LANES, dtype=np.int64)
    j2 = np.empty(LANES, dtype=np.int64)
    alive = np.empty(LANES, dtype=np.bool_)
    u1 = np.empty(LANES)
    u2 = np.empty(LANES)
    z1 = np.empty(LANES)
    z2 = np.empty(LANES)
    tail = np.empty(2 * LANES, dtype=np.int64)
    for start in range(0, n_total, LANES):
        m = min(LANES, n_total - start)
        for j in range(m):
            path = first_path + start + j
            kw[j] = _stream_key(seed, path, STREAM_W)
            k1[j] = _stream_key(seed, path, STREAM_N1)
            k2[j] = _stream_key(seed, path, STREAM_N2)
            X[j] = x0
            lp[j] = math.log(p0)
            ls[j] = math.log(s0)
            U[j] = math.exp(one_m_g * math.log(x0) - a_p * math.log(p0))
            tot[j] = 0.0
            j1[j] = 0
            j2[j] = 0
            alive[j] = True
            next1[j] = -math.log(_uniform(k1[j], 0)) / lam1 if lam1 > 0.0 else math.inf
            next2[j] = -math.log(_uniform(k2[j], 0)) / lam2 if lam2 > 0.0 else math.inf
        n_alive = m
        for step in range(n_steps):
            t_end = (step + 1) * dt
            c0 = np.uint64(2 * step)
            # jumps (rare): scalar pass
            for j in range(m):
                if alive[j] and (next1[j] < t_end or next2[j] < t_end):
                    while next1[j] < t_end or next2[j] < t_end:
                        if next1[j] <= next2[j]:
                            j1[j] += 1
                            next1[j] -= math.log(_uniform(k1[j], j1[j])) / lam1
                            fac = fac_crash
                            ls[j] += log_crash
                        else:
                            j2[j] += 1
                            next2[j] -= math.log(_uniform(k2[j], j2[j])) / lam2
                            fac = fac_loss
                        if fac <= 0.0:
                            alive[j] = False
                            X[j] = 0.0
                            n_alive -= 1
                            break
                        X[j] *= fac
                        U[j] *= math.exp(one_m_g * math.log(fac))
            if n_alive == 0:
                break
            # draws: vectorisable pass
            for j in range(m):
                u1[j] = _uniform(kw[j], c0)
                u2[j] = _uniform(kw[j], c0 + np.uint64(1))
                z1[j] = _ppf_central(u1[j])
                z2[j] = _ppf_central(u2[j])
            # tails: gather indices first so the log/sqrt is not run on every lane
            nt = 0
            for j in range(m):
                if u1[j] < _P_LOW or u1[j] > 1.0 - _P_LOW:
                    tail[nt] = j
                    nt += 1
                if u2[j] < _P_LOW or u2[j] > 1.0 - _P_LOW:
                    tail[nt] = j + LANES
                    nt += 1
            for i in range(nt):
                j = tail[i]
                if j < LANES:
                    z1[j] = _ppf_tail(u1[j])
                else:
                    z2[j - LANES] = _ppf_tail(u2[j - LANES])
            # state update: vectorisable pass
            for j in range(m):
                live = 1.0 if alive[j] else 0.0
                dw1 = sq * z1[j]
                dw2 = sq * z2[j]
                g = a * dt + b1 * dw1 + b2 * dw2
                dlp = lp_drift + sp1 * dw1 + sp2 * dw2
                tot[j] += live * util_c * U[j] * dt
                y = one_m_g * _log1p_small(g) - a_p * dlp - rho_dt
                U[j] = U[j] * (1.0 + live * (_exp_small(y) - 1.0))
                X[j] = X[j] * (1.0 + live * g)
                lp[j] += live * dlp
                ls[j] += live * (ls_drift + ss * dw1)
        for j in range(m):
            i = start + j
            out[i, O_VALUE] = tot[j]
            out[i, O_INSOLVENT] = 0.0 if alive[j] else 1.0
            out[i, O_X] = X[j] if alive[j] else 0.0
            P = math.exp(lp[j])
            out[i, O_P] = P
            out[i, O_K] = ak * X[j] / P if alive[j] else 0.0
            out[i, O_S] = math.exp(ls[j])
            out[i, O_N1] = j1[j]
            out[i, O_N2] = j2[j]


# ------------------------------------------------------------------ driver

def _kernel_args(strategy):
    empty = np.zeros(1)
    if isinstance(strategy, FractionStrategy):
        fr = np.array([strategy.alpha_c, strategy.alpha_pi1, strategy.alpha_k, strategy.alpha_q])
        return MODE_FRACTIONS, fr, np.zeros(5), empty, empty, empty
    if isinstance(strategy, BandStrategy):
        band = np.array([strategy.theta, strategy.z_low, strategy.z_high, strategy.z_star, strategy.z_max])
        return (MODE_BANDS, np.zeros(4), band, np.ascontiguousarray(strategy.c_hat),
                np.ascontiguousarray(strategy.pi1_hat), np.ascontiguousarray(strategy.q_hat))
    return None


def check_initial_state(params: ModelParams, x0, p0, k0):
    if not p0 > 0.0:
        raise ValueError("p0 must be > 0")
    if not k0 >= 0.0:
        raise ValueError("k0 must be >= 0")
    if params.theta > 0.0:
        if not x0 > params.theta * k0 * p0:
            raise ValueError("initial state outside the solvency region (need x0 > theta*k0*p0)")
    elif not x0 > 0.0:
        raise ValueError("initial state outside the solvency region (need x0 > 0)")


def simulate_paths(params: ModelParams, strategy, x0: float, p0: float, k0: float = 0.0,
                   config: SimConfig = SimConfig(), s0: float = 1.0,
                   sol: NoTCSolution | None = None, backend: str | None = None) -> SimResult:
    """Expected discounted utility of ``strategy`` from ``(x0, p0, k0)``.

    ``strategy`` is a :class:`FractionStrategy`, a :class:`BandStrategy`, or
    any object with ``rebalance(X, P, K) -> (X, K)`` and
    ``controls(X, P, K) -> (c, pi1, q)`` working on arrays (numpy path only).
    ``sol`` is the frictionless solution used for the horizon rule and the
    tail bound; it is solved here when omitted.
    """
    require_valid(params)
    check_initial_state(params, x0, p0, k0)
    if sol is None:
        sol = solve_no_tc(params)
    T = config.T if config.T is not None else default_horizon(params, sol, config.tail_fraction)
    n_steps = max(1, int(round(T / config.dt)))
    T = n_steps * config.dt
    n = config.n_paths
    if backend is None:
        backend = _jit.backend()
    kargs = _kernel_args(strategy)
    use_kernel = backend == "numba" and kargs is not None
    fast = (use_kernel and kargs[0] == MODE_FRACTIONS and config.fast
            and fast_path_ok(kargs[1], params, config.dt))
    if fast:
        coeffs = np.array(_fraction_coeffs(kargs[1], params))
    prm = _pack(params)
    starts = list(range(0, n, config.batch))

    def run(start):
        count = min(config.batch, n - start)
        if fast:
            out = np.zeros((count, N_OUT))
            _simulate_fractions_nb(kargs[1], coeffs, prm, float(x0), float(p0), float(s0),
                                   n_steps, float(config.dt), int(config.seed), start, out)
            return out
        if use_kernel:
            out = np.zeros((count, N_OUT))
            code = _simulate_nb(*kargs, prm, float(x0), float(p0), float(k0), float(s0),
                                n_steps, float(config.dt), int(config.seed), start, out)
            if code != 0:
                raise StrategyError("strategy returned negative c, K or q")
            return out
        return _simulate_np(strategy, params, x0, p0, k0, s0, n_steps, config.dt,
                            int(config.seed), start, count)

    if config.workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            chunks = list(pool.map(run, starts))
    else:
        chunks = [run(s) for s in starts]
    out = np.concatenate(chunks, axis=0)

    values = out[:, O_VALUE]
    mean = float(np.mean(values))
    stderr = float(np.std(values, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    XT, PT = out[:, O_X], out[:, O_P]
    solvent = XT > 0.0
    tail = np.zeros(n)
    if np.any(solvent):
        tail[solvent] = value_function_no_tc(XT[solvent], PT[solvent], sol, params)
    bound = math.exp(-params.rho * T) * abs(float(np.mean(tail)))
    terminal = PathState(T, XT, PT, out[:, O_K], out[:, O_S],
                         out[:, O_N1].astype(np.int64), out[:, O_N2].astype(np.int64))
    return SimResult(mean, stderr, int(np.sum(out[:, O_INSOLVENT] > 0)), bound, n,
                     config.dt, T, n_steps, int(config.seed), terminal, values)
