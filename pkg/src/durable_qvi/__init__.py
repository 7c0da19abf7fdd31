"""Consumption, investment and insurance with a durable good under jump risk.

Frictionless solutions come from :mod:`durable_qvi.notc`, proportional
transaction costs on the durable good from :mod:`durable_qvi.hjbqvi`, and
:mod:`durable_qvi.simulate` checks either one by Monte Carlo.
"""

__version__ = "0.1.0"

from .params import (BASE, PHI_GRID, SCENARIOS, COST_SCENARIO, ModelParams, ParameterError, Scenario,  # noqa: E402
                     check_transversality, derive_constants, load_scenario, utility, validate_params)
from .notc import NoTCSolution, solve_no_tc, sweep_loading, value_function_no_tc  # noqa: E402
from .hjbqvi import Grid, QVIConfig, QVIResult, main_loop, solve_tc, sweep_tc  # noqa: E402
from .simulate import SimConfig, SimResult, band_strategy, no_tc_strategy, simulate_paths  # noqa: E402

__all__ = [
    "BASE", "PHI_GRID", "SCENARIOS", "COST_SCENARIO", "ModelParams", "ParameterError", "Scenario",
    "check_transversality", "derive_constants", "load_scenario", "utility", "validate_params",
    "NoTCSolution", "solve_no_tc", "sweep_loading", "value_function_no_tc",
    "Grid", "QVIConfig", "QVIResult", "main_loop", "solve_tc", "sweep_tc",
    "SimConfig", "SimResult", "band_strategy", "no_tc_strategy", "simulate_paths",
]
