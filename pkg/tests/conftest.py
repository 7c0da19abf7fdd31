import pytest

from durable_qvi.hjbqvi import QVIConfig, solve_tc
from durable_qvi.notc import solve_no_tc
from durable_qvi.params import BASE, COST_SCENARIO


@pytest.fixture(scope="session")
def base_solution():
    return solve_no_tc(BASE)


@pytest.fixture(scope="session")
def tc_coarse():
    """Transaction-cost solve on a coarse grid, shared by the cheaper solver tests."""
    return solve_tc(COST_SCENARIO.params, QVIConfig(n=401))
