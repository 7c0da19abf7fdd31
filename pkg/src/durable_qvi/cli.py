"""Command-line front end.

    durable-qvi validate        --scenario scenarios/scenario_a.ini
    durable-qvi sweep-loading   --scenario scenarios/scenario_a.ini --phi-grid 1.0:0.1:1.5 --out out/
    durable-qvi solve-tc        --scenario scenarios/with_cost.ini --out out/
    durable-qvi simulate        --scenario scenarios/scenario_a.ini --paths 100000 --out out/

Every run writes its CSVs and then ``manifest.json`` with the resolved
parameters, solver settings, seed, wall time and library version.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__, _jit, notc
from .hjbqvi import QVIConfig, solve_tc, sweep_tc
from .notc import solve_no_tc, sweep_loading
from .params import (PARAM_NAMES, ParameterError, Scenario, check_transversality, load_scenario,
                     parse_phi_grid, validate_params)
from .simulate import SimConfig, band_strategy, default_horizon, no_tc_strategy, simulate_paths

log = logging.getLogger("durable_qvi")

COMMANDS = ("solve-ntc", "sweep-loading", "solve-tc", "sweep-tc-loading", "simulate", "validate")
EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3

NTC_HEADER = ["phi", "alpha_c", "alpha_pi1", "alpha_k", "alpha_q", "alpha_v", "objective"]
TC_HEADER = ["z", "v", "Mv", "excess", "c_hat", "pi1_hat", "q_hat", "trade_flag"]
SUMMARY_HEADER = ["phi", "z_low", "z_high", "z_star", "M", "outer_iters"]
TRACE_HEADER = ["iter", "delta_v_inf", "M"]
SIM_HEADER = ["mean", "stderr", "truncation_bound", "n_paths", "dt", "T", "solvency_violations"]
PATH_HEADER = ["path", "X", "P", "K", "S", "N1", "N2", "value"]


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    log.info("wrote %s", path)
    return path.name


def phi_tag(phi: float) -> str:
    return f"phi{phi:g}"


# ------------------------------------------------------------------ argument handling

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="durable-qvi",
                                 description="Consumption, durable-good and insurance solvers.")
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--scenario", required=True, help="scenario .ini file with a [scenario] section")
        p.add_argument("--set", action="append", default=[], metavar="NAME=VALUE",
                       help="override one scenario parameter (repeatable)")
        if name == "validate":
            continue
        p.add_argument("--out", required=True, help="output directory")
        if name in ("sweep-loading", "sweep-tc-loading"):
            p.add_argument("--phi-grid", help="a:step:b or comma list; defaults to the scenario grid")
            p.add_argument("--workers", type=int, default=1)
        if name in ("solve-tc", "sweep-tc-loading") or name == "simulate":
            d = QVIConfig()
            p.add_argument("--grid-n", type=int, default=d.n)
            p.add_argument("--z-max", type=float, default=None)
            p.add_argument("--tol-outer", type=float, default=d.tol_outer)
            p.add_argument("--tol-inner", type=float, default=d.tol_inner)
            p.add_argument("--tol-psor", type=float, default=d.tol_psor)
            p.add_argument("--omega", type=float, default=d.omega)
            p.add_argument("--lcp-solver", choices=("psor", "howard"), default=d.lcp_solver)
            p.add_argument("--scheme", choices=("central", "upwind"), default=d.scheme)
        if name == "simulate":
            s = SimConfig()
            p.add_argument("--strategy", choices=("no-tc", "bands"), default="no-tc")
            p.add_argument("--paths", type=int, default=s.n_paths)
            p.add_argument("--dt", type=float, default=s.dt)
            p.add_argument("--horizon", type=float, default=None,
                           help="years; default from the 0.1%% tail rule")
            p.add_argument("--seed", type=int, default=s.seed)
            p.add_argument("--x0", type=float, default=1.0)
            p.add_argument("--p0", type=float, default=1.0)
            p.add_argument("--k0", type=float, default=None,
                           help="initial durable stock; default puts z at z_star (bands) or 0")
            p.add_argument("--dump-paths", action="store_true", help="also write terminal states")
    return ap


def parse_overrides(items) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise ParameterError(f"--set expects NAME=VALUE, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        if key not in PARAM_NAMES:
            raise ParameterError(f"--set: unknown parameter {key!r}")
        try:
            out[key] = float(value)
        except ValueError as exc:
            raise ParameterError(f"--set {key}: not a number: {value!r}") from exc
    return out


def resolve_scenario(args) -> tuple[Scenario, dict, dict]:
    scen = load_scenario(args.scenario)
    overrides = parse_overrides(args.set)
    file_values = scen.params.as_dict()
    params = scen.params.with_(**overrides) if overrides else scen.params
    grid = scen.phi_grid
    if getattr(args, "phi_grid", None):
        grid = parse_phi_grid(args.phi_grid)
    return Scenario(scen.name, params, grid), file_values, overrides


def qvi_config(args) -> QVIConfig:
    return replace(QVIConfig(), n=args.grid_n, z_max=args.z_max, tol_outer=args.tol_outer,
                   tol_inner=args.tol_inner, tol_psor=args.tol_psor, omega=args.omega,
                   lcp_solver=args.lcp_solver, scheme=args.scheme)


# ------------------------------------------------------------------ commands

def _tc_rows(res):
    z = res.value.grid.nodes
    v, Mv = res.value.values, res.intervention_value.values
    pol = res.policy
    return zip(z, v, Mv, v - Mv, pol.c_hat, pol.pi1_hat, pol.q_hat, pol.trade_flag)


def _tc_outputs(res, out: Path, phi: float, suffix: str = ""):
    files = [
        write_csv(out / f"tc_value{suffix}.csv", TC_HEADER, _tc_rows(res)),
        write_csv(out / f"tc_trace{suffix}.csv", TRACE_HEADER,
                  ((t.iteration, t.delta_v_inf, t.M) for t in res.trace)),
    ]
    b = res.bands
    summary = (phi, b.z_low, b.z_high, b.z_star, b.M, len(res.trace))
    grid = {"theta": res.value.grid.theta, "z_max": res.value.grid.z_max, "n": res.value.grid.n}
    return files, summary, grid


def _pool_map(workers):
    if workers <= 1:
        return map, None
    pool = ProcessPoolExecutor(workers)
    return pool.map, pool


def cmd_validate(args, scen, info):
    problems = validate_params(scen.params)
    if not problems:
        ok, margin = check_transversality(scen.params)
        info["transversality_margin"] = margin
        if not ok:
            problems.append(f"transversality condition fails (margin {margin:.6g} < 0)")
    if problems:
        for msg in problems:
            print(f"invalid: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"ok: scenario {scen.name!r} is valid (transversality margin {info['transversality_margin']:.6g})")
    return EXIT_OK


def cmd_solve_ntc(args, scen, info, out):
    sol = solve_no_tc(scen.params)
    row = (scen.params.phi, sol.alpha_c, sol.alpha_pi1, sol.alpha_k, sol.alpha_q, sol.alpha_v, sol.objective)
    info["outputs"].append(write_csv(out / "ntc.csv", NTC_HEADER, [row]))
    return EXIT_OK


def cmd_sweep_loading(args, scen, info, out):
    if not scen.phi_grid:
        raise ParameterError("no phi grid: pass --phi-grid or set phi_grid in the scenario")
    info["phi_grid"] = list(scen.phi_grid)
    info["workers"] = args.workers
    map_fn, pool = _pool_map(args.workers)
    try:
        rows = sweep_loading(scen, map_fn)
    finally:
        if pool is not None:
            pool.shutdown()
    info["outputs"].append(write_csv(
        out / "sweep_loading.csv", NTC_HEADER,
        ((r.phi, r.alpha_c, r.alpha_pi1, r.alpha_k, r.alpha_q, r.alpha_v, r.objective) for r in rows)))
    return EXIT_OK


def cmd_solve_tc(args, scen, info, out):
    config = qvi_config(args)
    info["qvi_config"] = asdict(config)
    res = solve_tc(scen.params, config)
    files, summary, grid = _tc_outputs(res, out, scen.params.phi)
    info["grid"] = grid
    info["outputs"] += files
    info["outputs"].append(write_csv(out / "tc_summary.csv", SUMMARY_HEADER, [summary]))
    return EXIT_OK


def cmd_sweep_tc(args, scen, info, out):
    if not scen.phi_grid:
        raise ParameterError("no phi grid: pass --phi-grid or set phi_grid in the scenario")
    config = qvi_config(args)
    info["qvi_config"] = asdict(config)
    info["phi_grid"] = list(scen.phi_grid)
    info["workers"] = args.workers
    map_fn, pool = _pool_map(args.workers)
    try:
        results = sweep_tc(scen.params, scen.phi_grid, config, map_fn)
    finally:
        if pool is not None:
            pool.shutdown()
    summaries, grids = [], {}
    for phi, res in zip(scen.phi_grid, results):
        files, summary, grid = _tc_outputs(res, out, phi, "_" + phi_tag(phi))
        info["outputs"] += files
        summaries.append(summary)
        grids[fmt(phi)] = grid
    info["grid"] = grids
    info["outputs"].append(write_csv(out / "tc_summary.csv", SUMMARY_HEADER, summaries))
    return EXIT_OK


def cmd_simulate(args, scen, info, out):
    params = scen.params
    sol = solve_no_tc(params)
    horizon = args.horizon if args.horizon is not None else default_horizon(params, sol)
    sim = SimConfig(T=horizon, dt=args.dt, n_paths=args.paths, seed=args.seed)
    if args.strategy == "bands":
        config = qvi_config(args)
        info["qvi_config"] = asdict(config)
        res = solve_tc(params, config)
        strategy = band_strategy(res.bands, res.policy, res.value.grid)
        k0 = args.k0 if args.k0 is not None else args.x0 / (res.bands.z_star * args.p0)
        info["bands"] = asdict(res.bands)
    else:
        strategy = no_tc_strategy(sol)
        k0 = args.k0 if args.k0 is not None else 0.0
    info["sim_config"] = asdict(sim)
    info["initial_state"] = {"x0": args.x0, "p0": args.p0, "k0": k0}
    info["strategy"] = args.strategy
    info["backend"] = _jit.backend()
    r = simulate_paths(params, strategy, args.x0, args.p0, k0, sim, sol=sol)
    info["outputs"].append(write_csv(out / "sim.csv", SIM_HEADER, [
        (r.mean, r.stderr, r.truncation_bound, r.n_paths, r.dt, r.T, r.solvency_violations)]))
    if args.dump_paths:
        t = r.terminal
        info["outputs"].append(write_csv(
            out / "sim_paths.csv", PATH_HEADER,
            zip(range(r.n_paths), t.X, t.P, t.K, t.S, t.N1, t.N2, r.path_values)))
    return EXIT_OK


HANDLERS = {
    "solve-ntc": cmd_solve_ntc,
    "sweep-loading": cmd_sweep_loading,
    "solve-tc": cmd_solve_tc,
    "sweep-tc-loading": cmd_sweep_tc,
    "simulate": cmd_simulate,
}


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        scen, file_values, overrides = resolve_scenario(args)
    except (ParameterError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    info = {
        "command": args.command,
        "argv": list(sys.argv[1:] if argv is None else argv),
        "scenario_file": str(args.scenario),
        "scenario_name": scen.name,
        "file_values": file_values,
        "overrides": overrides,
        "params": scen.params.as_dict(),
        "outputs": [],
    }
    if args.command == "validate":
        return cmd_validate(args, scen, info)

    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create output directory {out}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    problems = validate_params(scen.params)
    if problems:
        print("error: " + "; ".join(problems), file=sys.stderr)
        return EXIT_CONFIG
    info["no_tc_settings"] = {"scan_lo": notc.SCAN_LO, "scan_hi": notc.SCAN_HI,
                              "scan_steps": notc.SCAN_STEPS, "objective_tol": notc.OBJECTIVE_TOL}
    try:
        status = HANDLERS[args.command](args, scen, info, out)
    except ParameterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    info["wall_time_s"] = time.perf_counter() - t0
    info["version"] = __version__
    info["numpy"] = np.__version__
    info["python"] = platform.python_version()
    info["backend"] = _jit.backend()
    with open(out / "manifest.json", "w") as fh:
        json.dump(info, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return status


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
