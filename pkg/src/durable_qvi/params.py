"""Model parameters, derived constants, utility and parameter checks."""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np


class ParameterError(ValueError):
    """Raised when a parameter set or scenario file is unusable."""


class UtilityDomainError(ValueError):
    """Utility evaluated at c*k == 0 with gamma > 1 (diverges to -inf)."""


@dataclass(frozen=True)
class ModelParams:
    """Constants of the economy. Rates are per year."""

    mu_S: float
    sigma_S: float
    eta: float
    lambda_1: float
    r: float
    mu_P: float
    sigma_P1: float
    sigma_P2: float
    delta: float
    ell: float
    lambda_2: float
    phi: float
    rho: float
    beta: float
    gamma: float
    theta: float = 0.0

    def with_(self, **changes) -> "ModelParams":
        return replace(self, **changes)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


PARAM_NAMES = tuple(f.name for f in fields(ModelParams))


@dataclass(frozen=True)
class DerivedParams:
    beta_bar: float
    rho_bar: float
    mu_bar_P: float
    mu_bar_S: float
    sigma_P_sq: float


@dataclass(frozen=True)
class Scenario:
    name: str
    params: ModelParams
    phi_grid: tuple = field(default_factory=tuple)

    def __post_init__(self):
        grid = tuple(float(x) for x in self.phi_grid)
        object.__setattr__(self, "phi_grid", grid)
        if any(g < 1.0 for g in grid):
            raise ParameterError(f"scenario {self.name!r}: phi_grid entries must be >= 1")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ParameterError(f"scenario {self.name!r}: phi_grid must be strictly increasing")


def utility(c, k, beta: float, gamma: float):
    """Cobb-Douglas CRRA utility ``(c**beta * k**(1-beta))**(1-gamma) / (1-gamma)``.

    Works elementwise on arrays. At ``c*k == 0`` the value is 0 for
    ``gamma < 1`` and a :class:`UtilityDomainError` for ``gamma > 1``.
    """
    c_arr = np.asarray(c, dtype=float)
    k_arr = np.asarray(k, dtype=float)
    if np.any(c_arr < 0) or np.any(k_arr < 0):
        raise ValueError("utility requires c >= 0 and k >= 0")
    if gamma == 1.0:
        raise ParameterError("gamma must differ from 1")
    if gamma > 1.0 and np.any(c_arr * k_arr == 0):
        raise UtilityDomainError("utility diverges at c*k == 0 when gamma > 1")
    one_m_g = 1.0 - gamma
    with np.errstate(divide="ignore"):
        out = c_arr ** (beta * one_m_g) * k_arr ** ((1.0 - beta) * one_m_g) / one_m_g
    if gamma < 1.0:
        out = np.where(c_arr * k_arr == 0, 0.0, out)
    if np.ndim(out) == 0:
        return float(out)
    return out


def derive_constants(params: ModelParams) -> DerivedParams:
    p = params
    one_m_g = 1.0 - p.gamma
    return DerivedParams(
        beta_bar=p.beta * one_m_g,
        rho_bar=p.rho + p.delta * one_m_g,
        mu_bar_P=p.mu_P - p.r - p.delta,
        mu_bar_S=p.mu_S + p.lambda_1 * p.eta - p.r,
        sigma_P_sq=p.sigma_P1 ** 2 + p.sigma_P2 ** 2,
    )


def transversality_margin(params: ModelParams) -> float:
    d = derive_constants(params)
    rhs = d.beta_bar * params.mu_P - 0.5 * d.beta_bar * (1.0 - d.beta_bar) * d.sigma_P_sq
    return d.rho_bar - rhs


def check_transversality(params: ModelParams) -> tuple[bool, float]:
    """Return ``(holds, margin)``; the condition is ``margin >= 0``."""
    margin = transversality_margin(params)
    return margin >= 0.0, margin


def validate_params(params: ModelParams) -> list[str]:
    p = params
    out = []
    finite = all(math.isfinite(float(getattr(p, n))) for n in PARAM_NAMES)
    if not finite:
        return ["all parameters must be finite numbers"]
    if not 0.0 < p.beta < 1.0:
        out.append("beta must lie in (0, 1)")
    if not p.gamma > 0.0:
        out.append("gamma must be > 0")
    if p.gamma == 1.0:
        out.append("gamma must differ from 1")
    if not p.phi >= 1.0:
        out.append("phi: loading factor must be >= 1")
    if not 0.0 < p.ell < 1.0:
        out.append("ell must lie in (0, 1)")
    if not p.theta >= 0.0:
        out.append("theta must be >= 0")
    if not p.sigma_S > 0.0:
        out.append("sigma_S must be > 0")
    if not p.lambda_1 >= 0.0:
        out.append("lambda_1 must be >= 0")
    if not p.lambda_2 >= 0.0:
        out.append("lambda_2 must be >= 0")
    if not p.eta >= 0.0:
        out.append("eta must be >= 0")
    if p.lambda_1 > 0.0 and not p.eta > 0.0:
        out.append("eta must be > 0 when lambda_1 > 0")
    return out


def require_valid(params: ModelParams) -> None:
    problems = validate_params(params)
    if problems:
        raise ParameterError("; ".join(problems))


# Base scenario (a); phi is swept, 1.2 is the default point.
BASE = ModelParams(
    mu_S=0.06, sigma_S=0.25, eta=0.1, lambda_1=0.0, r=0.02,
    mu_P=0.02, sigma_P1=0.1, sigma_P2=0.2, delta=0.015,
    ell=0.5, lambda_2=0.01, phi=1.2, rho=0.04, beta=0.5, gamma=0.9,
)

PHI_GRID = (1.0, 1.1, 1.2, 1.3, 1.4, 1.5)

SCENARIOS = {
    "a": Scenario("a", BASE, PHI_GRID),
    "b": Scenario("b", BASE.with_(lambda_1=0.2), PHI_GRID),
    "c": Scenario("c", BASE.with_(sigma_P1=-0.1), PHI_GRID),
    "d": Scenario("d", BASE.with_(gamma=2.0), PHI_GRID),
}

COST_SCENARIO = Scenario("with_cost", BASE.with_(theta=0.05), PHI_GRID)


def parse_phi_grid(text: str) -> tuple:
    """Parse ``"a:step:b"`` (inclusive) or a comma separated list."""
    text = text.strip()
    if not text:
        return ()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ParameterError(f"bad phi grid {text!r}; expected a:step:b")
        a, step, b = (float(x) for x in parts)
        if step <= 0 or b < a:
            raise ParameterError(f"bad phi grid {text!r}")
        n = int(math.floor((b - a) / step + 1e-9)) + 1
        return tuple(round(a + i * step, 12) for i in range(n))
    return tuple(float(x) for x in text.split(","))


def load_scenario(path) -> Scenario:
    """Read a ``[scenario]`` key = value file.

    Every :class:`ModelParams` field is required except ``theta`` (default
    0); ``name`` and ``phi_grid`` are optional. Unknown keys are rejected.
    """
    path = Path(path)
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ParameterError(f"{path}: {exc}") from exc
    if cp.sections() != ["scenario"]:
        raise ParameterError(f"{path}: expected exactly one [scenario] section")
    sec = cp["scenario"]
    allowed = set(PARAM_NAMES) | {"name", "phi_grid"}
    unknown = [k for k in sec if k not in allowed]
    if unknown:
        raise ParameterError(f"{path}: unknown key(s) {', '.join(unknown)}")
    values = {}
    for name in PARAM_NAMES:
        if name not in sec:
            if name == "theta":
                values[name] = 0.0
                continue
            raise ParameterError(f"{path}: missing key {name!r}")
        try:
            values[name] = float(sec[name])
        except ValueError as exc:
            raise ParameterError(f"{path}: key {name!r}: not a number: {sec[name]!r}") from exc
    grid = parse_phi_grid(sec.get("phi_grid", ""))
    return Scenario(sec.get("name", path.stem), ModelParams(**values), grid)


def dump_scenario(scenario: Scenario) -> str:
    lines = ["[scenario]", f"name = {scenario.name}"]
    for k, v in scenario.params.as_dict().items():
        lines.append(f"{k} = {v!r}")
    if scenario.phi_grid:
        lines.append("phi_grid = " + ", ".join(repr(x) for x in scenario.phi_grid))
    return "\n".join(lines) + "\n"
