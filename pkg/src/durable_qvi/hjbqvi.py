"""Transaction-cost problem as an HJB quasi-variational inequality.

The value function is reduced to ``v(z)`` with ``z = x / (k p)`` wealth in
units of durable-good value, solved on a uniform grid ``theta = z_0 < ... <
z_{n-1} = z_max``. The outer loop (stopping-time iteration) freezes the
intervention obstacle at the current iterate; the inner loop is policy
iteration over the stochastic controls with one LCP solve per step.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from . import kernels
from .notc import NoTCSolution, solve_no_tc
from .params import ModelParams, check_transversality, derive_constants, require_valid

log = logging.getLogger(__name__)


class SchemeError(RuntimeError):
    """Assembled matrix is not an M-matrix (positive off-diagonal)."""


class PSORLimitError(RuntimeError):
    pass


class QVINoConvergenceError(RuntimeError):
    pass


class DegenerateZoneError(RuntimeError):
    """No-trading zone is empty or not a single interval."""


class DegenerateValueError(ValueError):
    pass


class BoundViolationError(RuntimeError):
    """An outer iterate left the band between the lower and upper bounds."""


@dataclass(frozen=True)
class QVIConfig:
    n: int = 2001
    z_max: float | None = None
    z_max_factor: float = 40.0
    tol_outer: float = 1e-8
    tol_inner: float = 1e-8
    tol_psor: float = 1e-10
    omega: float = 1.2
    max_outer: int = 200
    max_inner: int = 200
    max_psor: int = 100_000
    lcp_solver: str = "psor"
    linear_solver: str = "direct"
    scheme: str = "central"
    control_tol: float = 1e-9
    analytic_pi: bool = True
    pi_leverage: float = 10.0
    band_tol: float = 1e-6
    bound_tol: float = 1e-6

    def __post_init__(self):
        if self.n < 3:
            raise ValueError("grid needs n >= 3")
        if not 0.0 < self.omega < 2.0:
            raise ValueError("omega must lie in (0, 2)")
        if self.lcp_solver not in ("psor", "howard"):
            raise ValueError(f"unknown lcp_solver {self.lcp_solver!r}")
        if self.linear_solver not in ("psor", "direct"):
            raise ValueError(f"unknown linear_solver {self.linear_solver!r}")
        if self.scheme not in ("upwind", "central"):
            raise ValueError(f"unknown scheme {self.scheme!r}")


@dataclass(frozen=True)
class Grid:
    theta: float
    z_max: float
    n: int

    def __post_init__(self):
        if self.n < 3:
            raise ValueError("grid needs n >= 3")
        if not self.z_max > self.theta:
            raise ValueError("z_max must exceed theta")

    @property
    def h(self) -> float:
        return (self.z_max - self.theta) / (self.n - 1)

    @property
    def nodes(self) -> np.ndarray:
        z = self.theta + self.h * np.arange(self.n)
        z[-1] = self.z_max
        return z


@dataclass
class DiscreteValue:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.n,):
            raise ValueError("values must have one entry per grid node")


@dataclass
class PolicyField:
    c_hat: np.ndarray
    pi1_hat: np.ndarray
    q_hat: np.ndarray
    trade_flag: np.ndarray


@dataclass(frozen=True)
class TradingBands:
    z_low: float
    z_high: float
    z_star: float
    M: float


@dataclass
class LCPProblem:
    """``A v - b >= 0``, ``v - u >= 0``, ``(A v - b)^T (v - u) = 0``."""

    A: sp.csr_matrix
    b: np.ndarray
    u: np.ndarray


@dataclass
class TraceRow:
    iteration: int
    delta_v_inf: float
    M: float
    inner_iterations: int
    min_increment: float


@dataclass
class QVIResult:
    value: DiscreteValue
    intervention_value: DiscreteValue
    policy: PolicyField
    bands: TradingBands
    trace: list
    no_tc: NoTCSolution
    lower_constant: float
    supremand: np.ndarray
    initial: DiscreteValue
    history: list = field(default_factory=list)
    wall_time: float = 0.0
    sandwich_constant: float = 0.0


# ------------------------------------------------------------------ helpers

def pack_coefficients(params: ModelParams, grid: Grid, pi_leverage: float = 10.0) -> np.ndarray:
    d = derive_constants(params)
    p = params
    bb = d.beta_bar
    coef = np.zeros(kernels.N_COEF)
    coef[kernels.C_THETA] = grid.theta
    coef[kernels.C_H] = grid.h
    coef[kernels.C_GAMMA] = p.gamma
    coef[kernels.C_BETA] = p.beta
    coef[kernels.C_BETA_BAR] = bb
    coef[kernels.C_A0] = bb * p.mu_P - 0.5 * bb * (1.0 - bb) * d.sigma_P_sq
    coef[kernels.C_KAPPA_P] = d.mu_bar_P - (1.0 - bb) * d.sigma_P_sq
    coef[kernels.C_KAPPA_S] = d.mu_bar_S - (1.0 - bb) * p.sigma_S * p.sigma_P1
    coef[kernels.C_SIG_S] = p.sigma_S
    coef[kernels.C_SIG_P1] = p.sigma_P1
    coef[kernels.C_SIG_P2] = p.sigma_P2
    coef[kernels.C_ETA] = p.eta
    coef[kernels.C_LAM1] = p.lambda_1
    coef[kernels.C_LAM2] = p.lambda_2
    coef[kernels.C_ELL] = p.ell
    coef[kernels.C_PHI] = p.phi
    coef[kernels.C_RHO_BAR] = d.rho_bar
    coef[kernels.C_LOSS_FAC] = (1.0 - p.ell) ** (1.0 - p.gamma)
    coef[kernels.C_PI_LEV] = pi_leverage
    return coef


def _check_gamma(params: ModelParams):
    if not 0.0 < params.gamma < 1.0:
        raise ValueError("the transaction-cost solver needs 0 < gamma < 1")


def lower_constant(params: ModelParams) -> float:
    """Value constant of the buy-once-and-hold strategy."""
    p = params
    g, b = p.gamma, p.beta
    denom = p.rho + (p.delta - p.ell * p.lambda_2) * (1 - b) * (1 - g)
    if not denom > 0.0:
        raise ValueError(f"lower-bound denominator {denom:.4g} is not positive")
    return b ** (b * (1 - g)) * (1 - b) ** ((1 - b) * (1 - g)) * p.r ** (b * (1 - g)) / denom


def bounds(z, params: ModelParams, sol: NoTCSolution | None = None):
    """``(lower, upper)`` for the reduced value function at ``z >= theta``."""
    _check_gamma(params)
    z = np.asarray(z, dtype=float)
    if np.any(z < params.theta):
        raise ValueError("bounds need z >= theta")
    if sol is None:
        sol = solve_no_tc(params)
    g = params.gamma
    lo = lower_constant(params) / (1 - g) * (z - params.theta) ** (1 - g)
    hi = sol.alpha_v / (1 - g) * z ** (1 - g)
    return lo, hi


def default_grid(params: ModelParams, config: QVIConfig, sol: NoTCSolution | None = None) -> Grid:
    if config.z_max is not None:
        return Grid(params.theta, float(config.z_max), config.n)
    if sol is None:
        sol = solve_no_tc(params)
    z_star = 1.0 / sol.alpha_k
    return Grid(params.theta, params.theta + config.z_max_factor * z_star, config.n)


def intervention(v: DiscreteValue, params: ModelParams):
    """Discrete intervention operator.

    Returns ``(Mv, (M, z_star))`` with ``M = max z**(gamma-1) v(z)`` over the
    grid (0**(gamma-1) * 0 read as 0; first index on ties) and
    ``Mv(z) = (z - theta)**(1-gamma) * M``.
    """
    z = v.grid.nodes
    g = params.gamma
    vals = v.values
    if not np.any(vals != 0.0):
        raise DegenerateValueError("intervention of the zero function is undefined")
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = np.where(z > 0.0, z ** (g - 1.0) * vals, 0.0)
    i = int(np.argmax(scaled))
    M = float(scaled[i])
    Mv = (z - v.grid.theta) ** (1.0 - g) * M
    return DiscreteValue(v.grid, Mv), (M, float(z[i]))


def optimize_controls(v: DiscreteValue, params: ModelParams, i: int | None = None,
                      config: QVIConfig = QVIConfig(), backend=None):
    """Maximise the HJB supremand.

    With ``i`` given, returns ``(c_hat, pi1_hat, q_hat, supremand)`` at that
    node (``i >= 1``); otherwise the four arrays over the whole grid.
    """
    if i is not None and not 1 <= i <= v.grid.n - 2:
        raise IndexError("controls are defined at interior nodes 1..n-2")
    coef = pack_coefficients(params, v.grid, config.pi_leverage)
    fn = kernels.controls if backend is None else backend
    c, pi, q, sup = fn(v.values, coef, config.control_tol, config.analytic_pi)
    if i is None:
        return c, pi, q, sup
    return float(c[i]), float(pi[i]), float(q[i]), float(sup[i])


def _ell_to_csr(diag, cols, vals):
    n = diag.shape[0]
    rows = np.repeat(np.arange(n), cols.shape[1])
    A = sp.coo_matrix((vals.ravel(), (rows, cols.ravel())), shape=(n, n))
    A = (A + sp.diags(diag)).tocsr()
    A.sum_duplicates()
    A.eliminate_zeros()
    return A


def discretize_generator(policy: PolicyField, grid: Grid, params: ModelParams,
                         right_value: float, scheme: str = "central", backend=None):
    """Matrix ``A = rho_bar I - L`` (CSR) and source vector for fixed controls."""
    coef = pack_coefficients(params, grid)
    fn = kernels.assemble if backend is None else backend
    diag, cols, vals, rhs = fn(policy.c_hat, policy.pi1_hat, policy.q_hat, coef,
                               scheme == "central", float(right_value))
    if np.any(vals > 1e-12):
        i, k = np.unravel_index(np.argmax(vals), vals.shape)
        raise SchemeError(f"positive off-diagonal {vals[i, k]:.3e} in row {i} (col {cols[i, k]})")
    if np.any(diag <= 0.0):
        raise SchemeError("non-positive diagonal entry")
    return _ell_to_csr(diag, cols, vals), rhs


def psor_solve(lcp: LCPProblem, omega: float = 1.2, tol: float = 1e-10, v0=None,
               max_sweeps: int = 100_000, backend=None, return_info: bool = False):
    """Projected SOR for ``min(A v - b, v - u) = 0``.

    Sweeps ``w_k = v_k + omega/A_kk (b_k - sum_j A_kj v_j)``, ``v_k = max(w_k, u_k)``
    in natural order until the sup-norm change of a sweep is below ``tol``.
    """
    A = sp.csr_matrix(lcp.A)
    n = A.shape[0]
    diag = A.diagonal().astype(float)
    if np.any(diag <= 0.0):
        raise ValueError("PSOR needs a positive diagonal")
    b = np.asarray(lcp.b, dtype=float)
    u = np.broadcast_to(np.asarray(lcp.u, dtype=float), (n,)).copy()
    if v0 is None:
        v = np.where(np.isfinite(u), u, 0.0)
    else:
        v = np.maximum(np.asarray(v0, dtype=float), u)
    fn = kernels.psor if backend is None else backend
    sweeps, change = fn(A.indptr.astype(np.int64), A.indices.astype(np.int64), A.data.astype(float),
                        diag, b, u, v, float(omega), float(tol), int(max_sweeps))
    if change >= tol:
        res = lcp_residual(lcp, v)
        raise PSORLimitError(f"PSOR hit {max_sweeps} sweeps; last change {change:.3e}, residual {res:.3e}")
    if return_info:
        return v, sweeps
    return v


def howard_solve(lcp: LCPProblem, v0=None, max_iter: int = 500):
    """Policy iteration on ``min(A v - b, v - u) = 0`` with direct sparse solves."""
    A = sp.csr_matrix(lcp.A)
    n = A.shape[0]
    b = np.asarray(lcp.b, dtype=float)
    u = np.broadcast_to(np.asarray(lcp.u, dtype=float), (n,))
    v = np.maximum(u, np.zeros(n) if v0 is None else np.asarray(v0, dtype=float))
    v = np.where(np.isfinite(v), v, 0.0)
    active = None
    eye = sp.identity(n, format="csr")
    for it in range(max_iter):
        new_active = (v - u) < (A @ v - b)
        if active is not None and np.array_equal(new_active, active):
            return v
        active = new_active
        keep = sp.diags((~active).astype(float))
        clamp = sp.diags(active.astype(float))
        system = (keep @ A + clamp @ eye).tocsc()
        rhs = np.where(active, u, b)
        v = spsolve(system, rhs)
    raise QVINoConvergenceError(f"Howard LCP iteration did not settle in {max_iter} steps")


def lcp_residual(lcp: LCPProblem, v) -> float:
    """Sup norm of ``min(A v - b, v - u)`` (zero at a solution)."""
    r = lcp.A @ v - lcp.b
    gap = v - lcp.u
    return float(np.max(np.abs(np.minimum(r, gap))))


def _solve_lcp(lcp: LCPProblem, v0, config: QVIConfig):
    if config.lcp_solver == "howard":
        return howard_solve(lcp, v0)
    return psor_solve(lcp, config.omega, config.tol_psor, v0, config.max_psor)


def _solve_linear(A, b, v0, config: QVIConfig):
    if config.linear_solver == "direct":
        v = spsolve(A.tocsc(), b)
        # boundary rows are diagonal; keep them free of factorisation round-off
        v[0] = b[0] / A[0, 0]
        v[-1] = b[-1] / A[-1, -1]
        return v
    lcp = LCPProblem(A, b, np.full(b.shape, -np.inf))
    return psor_solve(lcp, config.omega, config.tol_psor, v0, config.max_psor)


def _policy(c, pi, q, trade=None):
    if trade is None:
        trade = np.zeros(c.shape, dtype=bool)
    return PolicyField(c, pi, q, trade)


def _improve(v, c, pi, q, prev, grid, params, right, scheme):
    """Policy-improvement step with a per-node guard.

    A node keeps its previous controls when the new ones would lower
    ``b - A v`` there. Rows of ``A`` depend on their own node's controls only,
    so the guarded step is a true improvement and the iterates increase
    monotonically. ``prev`` is ``(c, pi, q, A, b)`` or None.
    """
    A, b = discretize_generator(_policy(c, pi, q), grid, params, right, scheme)
    if prev is None:
        return c, pi, q, A, b
    c0, pi0, q0, A0, b0 = prev
    worse = (b - A @ v) < (b0 - A0 @ v)
    if not np.any(worse):
        return c, pi, q, A, b
    c = np.where(worse, c0, c)
    pi = np.where(worse, pi0, pi)
    q = np.where(worse, q0, q)
    A, b = discretize_generator(_policy(c, pi, q), grid, params, right, scheme)
    return c, pi, q, A, b


# ------------------------------------------------------------------ solvers

def solve_initial(grid: Grid, params: ModelParams, config: QVIConfig = QVIConfig(),
                  sol: NoTCSolution | None = None) -> DiscreteValue:
    """Never-trade value by policy iteration, started from the lower bound.

    The far boundary carries the lower-bound value (liquidate at ``z_max``
    and follow the buy-and-hold strategy).
    """
    _check_gamma(params)
    lo, _ = bounds(grid.nodes, params, sol)
    v = lo.copy()
    right = float(lo[-1])
    history = []
    prev = None
    for it in range(config.max_inner):
        c, pi, q, _ = optimize_controls(DiscreteValue(grid, v), params, config=config)
        c, pi, q, A, b = _improve(v, c, pi, q, prev, grid, params, right, config.scheme)
        prev = (c, pi, q, A, b)
        v_new = _solve_linear(A, b, v, config)
        change = float(np.max(np.abs(v_new - v)))
        history.append(change)
        v = v_new
        if change < config.tol_inner:
            return DiscreteValue(grid, v)
    raise QVINoConvergenceError(f"initial policy iteration stalled; last changes {history[-5:]}")


def inner_loop(v_n: DiscreteValue, grid: Grid, params: ModelParams,
               config: QVIConfig = QVIConfig(), return_details: bool = False):
    """Solve the LCP sequence with the obstacle frozen at ``max(M v_n, v_n)``."""
    Mv_n, _ = intervention(v_n, params)
    u = np.maximum(Mv_n.values, v_n.values)
    v = u.copy()
    right = float(Mv_n.values[-1])
    prev = None
    for it in range(1, config.max_inner + 1):
        v_last = v
        c, pi, q, _ = optimize_controls(DiscreteValue(grid, v_last), params, config=config)
        c, pi, q, A, b = _improve(v_last, c, pi, q, prev, grid, params, right, config.scheme)
        prev = (c, pi, q, A, b)
        try:
            v = _solve_lcp(LCPProblem(A, b, u), v_last, config)
        except PSORLimitError as exc:
            raise PSORLimitError(f"inner iteration {it}: {exc}") from exc
        if np.max(np.abs(v - v_last)) < config.tol_inner:
            break
    else:
        raise QVINoConvergenceError(f"inner loop did not converge in {config.max_inner} iterations")
    out = DiscreteValue(grid, v)
    if return_details:
        trade = v <= Mv_n.values + config.band_tol
        return out, _policy(c, pi, q, trade), it, LCPProblem(A, b, u)
    return out


def extract_bands(v: DiscreteValue, Mv: DiscreteValue, params: ModelParams, tol: float = 1e-6) -> TradingBands:
    excess = v.values - Mv.values
    inside = np.flatnonzero(excess > tol)
    if inside.size == 0:
        raise DegenerateZoneError("degenerate zone: v - Mv <= tol everywhere")
    if inside[-1] - inside[0] + 1 != inside.size:
        raise DegenerateZoneError(f"no-trading set is not an interval ({inside.size} nodes over "
                                  f"[{inside[0]}, {inside[-1]}])")
    z = v.grid.nodes
    _, (M, z_star) = intervention(v, params)
    return TradingBands(float(z[inside[0]]), float(z[inside[-1]]), z_star, M)


def _check_sandwich(v, lo, hi, n_iter, tol):
    # the never-trade start may dip under the buy-and-hold bound near theta,
    # so the check starts at the first outer iterate
    scale = tol * (1.0 + np.abs(v))
    below = lo - v
    above = v - hi
    if np.any(below > scale) or np.any(above > scale):
        worst = max(float(np.max(below / scale)), float(np.max(above / scale)))
        raise BoundViolationError(f"outer iterate {n_iter} leaves the bounds "
                                  f"(worst violation {worst:.3g} x tolerance)")
    return max(0.0, float(np.max(above)))


def main_loop(grid: Grid | None, params: ModelParams, config: QVIConfig = QVIConfig(),
              keep_history: bool = False) -> QVIResult:
    """Stopping-time iteration from the never-trade value to the QVI solution."""
    t0 = time.perf_counter()
    require_valid(params)
    _check_gamma(params)
    ok, margin = check_transversality(params)
    if not ok:
        raise ValueError(f"transversality condition fails (margin {margin:.4g})")
    sol = solve_no_tc(params)
    if grid is None:
        grid = default_grid(params, config, sol)
    v = solve_initial(grid, params, config, sol).values
    lo, hi = bounds(grid.nodes, params, sol)
    initial = DiscreteValue(grid, v.copy())
    history = [v.copy()] if keep_history else []
    trace = []
    over = 0.0
    for n_iter in range(1, config.max_outer + 1):
        _, (M, _) = intervention(DiscreteValue(grid, v), params)
        v_next, policy, n_inner, lcp = inner_loop(DiscreteValue(grid, v), grid, params, config,
                                                  return_details=True)
        diff = v_next.values - v
        delta = float(np.max(np.abs(diff)))
        trace.append(TraceRow(n_iter, delta, M, n_inner, float(np.min(diff))))
        log.info("outer %d: |dv|=%.3e M=%.12g inner=%d", n_iter, delta, M, n_inner)
        v = v_next.values
        over = max(over, _check_sandwich(v, lo, hi, n_iter, config.bound_tol))
        if keep_history:
            history.append(v.copy())
        if delta < config.tol_outer:
            break
    else:
        raise QVINoConvergenceError(f"outer loop did not converge in {config.max_outer} iterations "
                                    f"(last |dv| = {trace[-1].delta_v_inf:.3e})")
    value = DiscreteValue(grid, v)
    Mv, _ = intervention(value, params)
    c, pi, q, sup = optimize_controls(value, params, config=config)
    policy = _policy(c, pi, q, v <= Mv.values + config.band_tol)
    bands = extract_bands(value, Mv, params, config.band_tol)
    return QVIResult(value, Mv, policy, bands, trace, sol, lower_constant(params), sup, initial,
                     history, time.perf_counter() - t0, over / grid.h)


def solve_tc(params: ModelParams, config: QVIConfig = QVIConfig(), **kw) -> QVIResult:
    return main_loop(None, params, config, **kw)


def with_phi(params: ModelParams, phi: float) -> ModelParams:
    return replace(params, phi=phi)


def _tc_job(args):
    params, phi, config = args
    try:
        return solve_tc(replace(params, phi=phi), config)
    except Exception as exc:
        raise type(exc)(f"phi={phi}: {exc}") from exc


def sweep_tc(params: ModelParams, phi_grid, config: QVIConfig = QVIConfig(), map_fn=map) -> list:
    """One transaction-cost solve per loading; results follow the order of ``phi_grid``."""
    return list(map_fn(_tc_job, [(params, float(phi), config) for phi in phi_grid]))
