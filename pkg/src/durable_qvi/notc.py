"""Frictionless problem: constant optimal wealth fractions.

The reduced HJB is an explicit function of the four controls and the value
constant ``alpha_v``. The first-order conditions give ``alpha_k``, ``alpha_q``,
``alpha_c`` and ``alpha_v`` in closed form once ``alpha_pi1`` (or, when
``sigma_P1 == 0``, ``alpha_k``) is known; the last unknown is pinned by
requiring the supremum to be zero.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import brentq

from .params import ModelParams, Scenario, derive_constants, require_valid

log = logging.getLogger(__name__)

SCAN_LO, SCAN_HI, SCAN_STEPS = -5.0, 5.0, 512
OBJECTIVE_TOL = 1e-8


class InfeasibleError(ValueError):
    """Candidate controls violate positivity or post-jump solvency."""


class NoConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class NoTCSolution:
    alpha_c: float
    alpha_pi1: float
    alpha_k: float
    alpha_q: float
    alpha_v: float
    objective: float

    def fractions(self) -> tuple:
        return self.alpha_c, self.alpha_pi1, self.alpha_k, self.alpha_q, self.alpha_v


@dataclass(frozen=True)
class LoadingSweepRow:
    phi: float
    alpha_c: float
    alpha_pi1: float
    alpha_k: float
    alpha_q: float
    alpha_v: float
    objective: float


def insurance_fraction(alpha_k: float, params: ModelParams) -> float:
    """Optimal coverage: full coverage minus a deductible capped at 1 - phi**(-1/gamma)."""
    cap = 1.0 - params.phi ** (-1.0 / params.gamma)
    return max(params.ell * alpha_k - cap, 0.0)


def _consumption_and_value(alpha_pi1, alpha_k, alpha_q, params):
    p = params
    g, b = p.gamma, p.beta
    s2 = p.sigma_P1 ** 2 + p.sigma_P2 ** 2
    base = 1.0 - p.ell * alpha_k + alpha_q
    if base <= 0.0:
        raise InfeasibleError("post-loss wealth 1 - ell*alpha_k + alpha_q must be > 0")
    bracket = (
        s2 * ((1 - b) * (1 - g) + g * alpha_k)
        + g * alpha_pi1 * p.sigma_S * p.sigma_P1
        + p.r - p.mu_P + p.delta
        + p.ell * p.lambda_2 * base ** (-g)
    )
    alpha_c = b / (1 - b) * bracket * alpha_k
    if not alpha_c > 0.0:
        raise InfeasibleError(f"alpha_c = {alpha_c:.6g} is not positive")
    alpha_v = b * alpha_c ** (b * (1 - g) - 1) * alpha_k ** ((1 - b) * (1 - g))
    return alpha_c, alpha_v


def inner_fractions(alpha_pi1: float, params: ModelParams):
    """Closed-form ``(alpha_k, alpha_q, alpha_c, alpha_v)`` given the risky fraction.

    Requires ``sigma_P1 != 0``. Raises :class:`InfeasibleError` when the
    candidate lies outside the admissible bracket.
    """
    p = params
    if p.sigma_P1 == 0.0:
        raise ValueError("inner_fractions needs sigma_P1 != 0")
    g = p.gamma
    d = derive_constants(p)
    jump = 0.0
    if p.lambda_1 > 0.0:
        post = 1.0 - p.eta * alpha_pi1
        if post <= 0.0:
            raise InfeasibleError("post-crash wealth 1 - eta*alpha_pi1 must be > 0")
        jump = p.eta * p.lambda_1 * post ** (-g)
    alpha_k = (
        d.mu_bar_S
        - g * alpha_pi1 * p.sigma_S ** 2
        - (1 - p.beta) * (1 - g) * p.sigma_S * p.sigma_P1
        - jump
    ) / (g * p.sigma_S * p.sigma_P1)
    if not alpha_k > 0.0:
        raise InfeasibleError(f"alpha_k = {alpha_k:.6g} is not positive")
    alpha_q = insurance_fraction(alpha_k, p)
    alpha_c, alpha_v = _consumption_and_value(alpha_pi1, alpha_k, alpha_q, p)
    return alpha_k, alpha_q, alpha_c, alpha_v


def hjb_objective(alphas, params: ModelParams) -> float:
    """Braced supremand of the reduced HJB at ``(alpha_c, alpha_pi1, alpha_k, alpha_q, alpha_v)``."""
    ac, api, ak, aq, av = (float(a) for a in alphas)
    p = params
    g, b = p.gamma, p.beta
    d = derive_constants(p)
    bb, s2 = d.beta_bar, d.sigma_P_sq
    crash = 1.0 - p.eta * api
    loss = 1.0 - (p.ell * ak - aq)
    if (p.lambda_1 > 0.0 and crash <= 0.0) or loss <= 0.0:
        raise InfeasibleError("post-jump wealth must be positive")
    if ac < 0.0 or ak < 0.0:
        raise InfeasibleError("alpha_c and alpha_k must be >= 0")
    util = (ac ** b * ak ** (1 - b)) ** (1 - g) / (1 - g)
    level = av / (1 - g) * (bb * p.mu_P - p.rho - 0.5 * s2 * bb * (1 - bb))
    drift = av * (
        (p.r + (1 - bb) * s2 - p.mu_P) * (1 - ak)
        - p.delta * ak
        - p.phi * p.lambda_2 * aq
        + api * (d.mu_bar_S - (1 - bb) * p.sigma_S * p.sigma_P1)
        - ac
    )
    diffusion = -g * av * (
        0.5 * api ** 2 * p.sigma_S ** 2
        + 0.5 * s2 * (1 - ak) ** 2
        - api * p.sigma_S * p.sigma_P1 * (1 - ak)
    )
    jumps = 0.0
    if p.lambda_1 > 0.0:
        jumps += p.lambda_1 * (crash ** (1 - g) - 1)
    if p.lambda_2 > 0.0:
        jumps += p.lambda_2 * (loss ** (1 - g) - 1)
    return util + level + drift + diffusion + av / (1 - g) * jumps


def merton_root(params: ModelParams) -> float:
    """Risky fraction solving the sigma_P1 = 0 first-order condition."""
    p = params
    d = derive_constants(p)
    g = p.gamma

    def foc(a):
        jump = 0.0
        if p.lambda_1 > 0.0:
            jump = p.eta * p.lambda_1 * (1.0 - p.eta * a) ** (-g)
        return d.mu_bar_S - g * a * p.sigma_S ** 2 - (1 - p.beta) * (1 - g) * p.sigma_S * p.sigma_P1 - jump

    if p.lambda_1 == 0.0:
        return foc(0.0) / (g * p.sigma_S ** 2)
    hi = (1.0 - 1e-15) / p.eta
    lo = min(0.0, hi) - 1.0
    while foc(lo) <= 0.0:
        lo = 2.0 * lo - 1.0
    return brentq(foc, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)


def _from_alpha_k(alpha_k, alpha_pi1, params):
    if not alpha_k > 0.0:
        raise InfeasibleError("alpha_k must be > 0")
    alpha_q = insurance_fraction(alpha_k, params)
    alpha_c, alpha_v = _consumption_and_value(alpha_pi1, alpha_k, alpha_q, params)
    return alpha_k, alpha_q, alpha_c, alpha_v


def _find_root(curve, xs, label):
    """Zero of ``curve`` along a scanned 1-D parametrisation.

    ``curve(x)`` returns the objective or raises InfeasibleError. Returns the
    root; picks the one with the smallest alpha_v if several exist.
    """
    vals = np.full(len(xs), np.nan)
    for i, x in enumerate(xs):
        try:
            vals[i] = curve(x)[0]
        except (InfeasibleError, ZeroDivisionError, OverflowError):
            pass
    ok = np.isfinite(vals)
    if not ok.any():
        raise InfeasibleError(f"no admissible {label} in the scan interval")
    roots = []
    for i in range(len(xs) - 1):
        if ok[i] and ok[i + 1] and vals[i] * vals[i + 1] <= 0.0 and vals[i] != vals[i + 1]:
            if vals[i] == 0.0:
                roots.append(xs[i])
                continue
            roots.append(brentq(lambda x: curve(x)[0], xs[i], xs[i + 1],
                                xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500))
    if not roots:
        raise NoConvergenceError(
            f"objective has no sign change over admissible {label} "
            f"(range [{np.nanmin(vals):.4g}, {np.nanmax(vals):.4g}] on {ok.sum()} feasible points)"
        )
    if len(roots) > 1:
        log.warning("%d stationary points in %s: %s; keeping the smallest alpha_v", len(roots), label, roots)
        roots.sort(key=lambda x: curve(x)[1][-1])
    return roots[0]


def solve_no_tc(params: ModelParams) -> NoTCSolution:
    require_valid(params)
    p = params
    if p.sigma_P1 != 0.0:
        hi = SCAN_HI
        if p.lambda_1 > 0.0:
            hi = min(hi, (1.0 - 1e-9) / p.eta)
        xs = np.linspace(SCAN_LO, hi, SCAN_STEPS + 1)

        def curve(a_pi):
            ak, aq, ac, av = inner_fractions(a_pi, p)
            return hjb_objective((ac, a_pi, ak, aq, av), p), (ak, aq, ac, av)

        a_pi = _find_root(curve, xs, "alpha_pi1")
        ak, aq, ac, av = inner_fractions(a_pi, p)
    else:
        a_pi = merton_root(p)
        # alpha_k range where post-loss wealth stays positive
        xs = np.geomspace(1e-6, 50.0, SCAN_STEPS + 1)

        def curve(a_k):
            ak, aq, ac, av = _from_alpha_k(a_k, a_pi, p)
            return hjb_objective((ac, a_pi, ak, aq, av), p), (ak, aq, ac, av)

        ak_root = _find_root(curve, xs, "alpha_k")
        ak, aq, ac, av = _from_alpha_k(ak_root, a_pi, p)
    obj = hjb_objective((ac, a_pi, ak, aq, av), p)
    if not abs(obj) <= OBJECTIVE_TOL * max(1.0, abs(av)):
        raise NoConvergenceError(f"objective {obj:.3e} not zero at the solution")
    return NoTCSolution(ac, a_pi, ak, aq, av, obj)


def value_function_no_tc(x, p, sol: NoTCSolution, params: ModelParams):
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    if np.any(x <= 0) or np.any(p <= 0):
        raise ValueError("value_function_no_tc needs x > 0 and p > 0")
    g, b = params.gamma, params.beta
    out = sol.alpha_v / (1 - g) * p ** (-(1 - b) * (1 - g)) * x ** (1 - g)
    return float(out) if out.ndim == 0 else out


def _sweep_row(args):
    params, phi = args
    try:
        sol = solve_no_tc(replace(params, phi=phi))
    except (InfeasibleError, NoConvergenceError) as exc:
        raise type(exc)(f"phi={phi}: {exc}") from exc
    return LoadingSweepRow(phi, sol.alpha_c, sol.alpha_pi1, sol.alpha_k, sol.alpha_q, sol.alpha_v, sol.objective)


def sweep_loading(scenario: Scenario, map_fn=map) -> list[LoadingSweepRow]:
    """One independent frictionless solve per loading in ``scenario.phi_grid``.

    ``map_fn`` may be an executor's ``map``; output order follows the grid.
    """
    rows = list(map_fn(_sweep_row, [(scenario.params, phi) for phi in scenario.phi_grid]))
    return sorted(rows, key=lambda r: r.phi)


def deductible(sol: NoTCSolution, params: ModelParams) -> float:
    """Retained loss per unit wealth, ``ell*alpha_k - alpha_q``."""
    return params.ell * sol.alpha_k - sol.alpha_q


def retention_cap(params: ModelParams) -> float:
    return 1.0 - math.pow(params.phi, -1.0 / params.gamma)
