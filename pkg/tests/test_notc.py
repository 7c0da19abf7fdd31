import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from durable_qvi.notc import (InfeasibleError, deductible, hjb_objective, inner_fractions,
                              merton_root, retention_cap, solve_no_tc, sweep_loading,
                              value_function_no_tc)
from durable_qvi.params import BASE, SCENARIOS, ParameterError, utility


def original_hjb(controls, alpha_v, params, x=1.3, p=0.7):
    """Residual of rho V = sup{u + L V} in the untransformed (x, p) variables.

    ``controls`` are wealth fractions (c, pi1, k, q) with ``K = k x / p``.
    Derivatives of the closed-form candidate are taken analytically.
    """
    ac, api, ak, aq = controls
    P = params
    g, b = P.gamma, P.beta
    a = (1 - b) * (1 - g)

    def V(xx, pp=p):
        return alpha_v / (1 - g) * pp ** (-a) * xx ** (1 - g)

    v = V(x)
    vx = (1 - g) * v / x
    vxx = -g * (1 - g) * v / x ** 2
    vp = -a * v / p
    vpp = a * (a + 1) * v / p ** 2
    vxp = -a * (1 - g) * v / (x * p)
    c, pi, K, q = ac * x, api * x, ak * x / p, aq * x
    kp = K * p
    drift = (P.r * x + pi * (P.mu_S + P.lambda_1 * P.eta - P.r) + kp * (P.mu_P - P.r - P.delta)
             - P.phi * P.lambda_2 * q - c)
    sx1 = pi * P.sigma_S + kp * P.sigma_P1
    sx2 = kp * P.sigma_P2
    gen = (vx * drift + vp * P.mu_P * p
           + 0.5 * vxx * (sx1 ** 2 + sx2 ** 2)
           + vxp * p * (P.sigma_P1 * sx1 + P.sigma_P2 * sx2)
           + 0.5 * vpp * p ** 2 * (P.sigma_P1 ** 2 + P.sigma_P2 ** 2))
    if P.lambda_1 > 0:
        gen += P.lambda_1 * (V(x - P.eta * pi) - v)
    gen += P.lambda_2 * (V(x - P.ell * kp + q) - v)
    return -P.rho * v + utility(c, K, b, g) + gen


@pytest.mark.parametrize("name", ["a", "b", "c", "d"])
def test_solution_zeroes_the_original_hjb(name):
    params = SCENARIOS[name].params
    sol = solve_no_tc(params)
    ctrl = (sol.alpha_c, sol.alpha_pi1, sol.alpha_k, sol.alpha_q)
    scale = abs(value_function_no_tc(1.3, 0.7, sol, params))
    assert abs(original_hjb(ctrl, sol.alpha_v, params)) < 1e-9 * scale


@pytest.mark.parametrize("name", ["a", "b", "c", "d"])
def test_solution_is_the_supremum(name):
    params = SCENARIOS[name].params
    sol = solve_no_tc(params)
    base = np.array([sol.alpha_c, sol.alpha_pi1, sol.alpha_k, sol.alpha_q])
    scale = abs(value_function_no_tc(1.3, 0.7, sol, params))
    rng = np.random.default_rng(7)
    worst = -np.inf
    for _ in range(200):
        trial = base * (1 + rng.uniform(-0.2, 0.2, 4)) + rng.uniform(-0.01, 0.01, 4)
        trial[[0, 2, 3]] = np.maximum(trial[[0, 2, 3]], 0.0)
        if params.lambda_1 > 0 and 1 - params.eta * trial[1] <= 0:
            continue
        if 1 - params.ell * trial[2] + trial[3] <= 0 or trial[0] == 0 or trial[2] == 0:
            continue
        worst = max(worst, original_hjb(trial, sol.alpha_v, params))
    assert worst <= 1e-10 * scale


def test_reduced_objective_matches_original():
    # same controls, same alpha_v: reduced objective times x^(1-g) p^(-a) equals the original residual
    params = SCENARIOS["b"].params
    rng = np.random.default_rng(1)
    g, b = params.gamma, params.beta
    for _ in range(20):
        ctrl = (rng.uniform(0.01, 0.05), rng.uniform(-1, 2), rng.uniform(0.1, 0.8), rng.uniform(0, 0.2))
        av = rng.uniform(5, 30)
        red = hjb_objective((ctrl[0], ctrl[1], ctrl[2], ctrl[3], av), params)
        full = original_hjb(ctrl, av, params, x=1.0, p=1.0)
        assert red == pytest.approx(full, rel=1e-10, abs=1e-12)


def test_merton_reduction():
    params = BASE.with_(sigma_P1=0.0, lambda_1=0.0)
    sol = solve_no_tc(params)
    assert sol.alpha_pi1 == pytest.approx(0.04 / (0.9 * 0.25 ** 2), abs=1e-12)
    assert merton_root(params) == pytest.approx(0.711111111111, abs=1e-9)


def test_merton_root_with_crashes():
    params = BASE.with_(sigma_P1=0.0, lambda_1=0.2)
    a = merton_root(params)
    lhs = 0.06 + 0.2 * 0.1 - 0.02 - 0.9 * a * 0.0625 - 0.2 * 0.1 * (1 - 0.1 * a) ** -0.9
    assert abs(lhs) < 1e-12
    assert a < merton_root(BASE.with_(sigma_P1=0.0))


def test_full_coverage_at_fair_premium():
    sol = solve_no_tc(BASE.with_(phi=1.0))
    assert abs(sol.alpha_q - BASE.ell * sol.alpha_k) < 1e-12


@pytest.mark.parametrize("phi", [1.05, 1.1, 1.2, 1.5, 2.0])
def test_deductible_identity(phi):
    params = BASE.with_(phi=phi)
    sol = solve_no_tc(params)
    cap = retention_cap(params)
    assert deductible(sol, params) == pytest.approx(min(params.ell * sol.alpha_k, cap), abs=1e-12)
    assert sol.alpha_q >= 0.0


def test_fractions_positive_and_objective_zero():
    for sc in SCENARIOS.values():
        sol = solve_no_tc(sc.params)
        assert sol.alpha_c > 0 and sol.alpha_k > 0 and sol.alpha_v > 0 and sol.alpha_q >= 0
        assert abs(sol.objective) < 1e-8 * sol.alpha_v


def test_inner_fractions_rejects_infeasible():
    with pytest.raises(InfeasibleError):
        inner_fractions(20.0, SCENARIOS["b"].params)   # 1 - eta*pi < 0
    with pytest.raises(ValueError):
        inner_fractions(0.5, BASE.with_(sigma_P1=0.0))


def test_invalid_params_raise():
    with pytest.raises(ParameterError):
        solve_no_tc(BASE.with_(gamma=1.0))


@settings(max_examples=40, deadline=None)
@given(x=st.floats(1e-2, 1e2), p=st.floats(1e-2, 1e2), kappa=st.floats(0.05, 20.0))
def test_value_function_homogeneity(base_solution, x, p, kappa):
    b, g = BASE.beta, BASE.gamma
    lhs = value_function_no_tc(kappa * x, kappa * p, base_solution, BASE)
    rhs = kappa ** (b * (1 - g)) * value_function_no_tc(x, p, base_solution, BASE)
    assert lhs == pytest.approx(rhs, rel=1e-11)


def test_value_function_domain(base_solution):
    with pytest.raises(ValueError):
        value_function_no_tc(0.0, 1.0, base_solution, BASE)


def test_sweep_order_and_monotone_coverage():
    rows = sweep_loading(SCENARIOS["a"])
    assert [r.phi for r in rows] == list(SCENARIOS["a"].phi_grid)
    qs = [r.alpha_q for r in rows]
    assert all(b <= a + 1e-14 for a, b in zip(qs, qs[1:]))


def test_sweep_is_map_agnostic():
    rows_a = sweep_loading(SCENARIOS["c"])
    rows_b = sweep_loading(SCENARIOS["c"], map_fn=lambda f, xs: [f(x) for x in reversed(list(xs))])
    assert rows_a == rows_b


def test_gamma_above_one_solves():
    sol = solve_no_tc(SCENARIOS["d"].params)
    assert value_function_no_tc(1.0, 1.0, sol, SCENARIOS["d"].params) < 0


def test_no_warning_on_regular_solve():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        solve_no_tc(BASE)
