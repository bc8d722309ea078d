"""Execute one experiment configuration and collect scalars, tables and checked properties."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import __version__
from .bsde import compare_bsde, solve_bsde
from .driver import DriverPair, monotone_step
from .experiment import ConfigError, Problem, build_problem
from .paths import build_rho_arrays, is_rusc
from .reflected import (
    C_UNIFORM,
    barrier_dominates,
    compare_reflected,
    constraint_violation,
    jump_matching_residual,
    jump_support_violations,
    penalization_convergence,
    skorokhod_residual,
    solve_penalized,
    solve_reflected_lower,
    solve_reflected_upper,
    uniform_estimate,
    upper_jump_formula_residual,
)
from .stopping import (
    BRUTE_FORCE_MAX_BITS,
    BRUTE_FORCE_MAX_STEPS,
    C_EPSILON,
    brute_force_stopping_value,
    ef_supermartingale_check,
    epsilon_optimal_time,
    gain_from_solution,
    snell_envelope_linear,
)
from .tree import weighted_norms

RESIDUAL_TOL = 1e-9
SKOROKHOD_TOL = 1e-10
EXACT_TOL = 1e-12


@dataclass(slots=True)
class Table:
    name: str
    header: list[str]
    rows: list[list[Any]] = field(default_factory=list)


@dataclass(slots=True)
class RunResult:
    report: dict[str, Any]
    tables: list[Table]

    @property
    def passed(self) -> bool:
        return all(p["passed"] for p in self.report["properties"])


def clean(x: Any) -> Any:
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(x, dict):
        return {str(k): clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [clean(v) for v in x]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


class _Props:
    def __init__(self) -> None:
        self.items: list[dict[str, Any]] = []

    def at_most(self, name: str, value: float, tol: float) -> None:
        value = float(value)
        self.items.append(
            {"name": name, "passed": bool(value <= tol), "value": value, "tolerance": tol}
        )

    def holds(self, name: str, ok: bool, value: float = 0.0) -> None:
        self.items.append({"name": name, "passed": bool(ok), "value": float(value), "tolerance": None})


def _profile(tree, Y) -> Table:
    t = Table("profile", ["k", "t", "mean_y", "min_y", "max_y"])
    for k, y in enumerate(Y):
        t.rows.append([k, tree.grid.times[k], tree.expectation(k, y), np.min(y), np.max(y)])
    return t


def _norms(problem: Problem, Y, Z, U) -> dict[str, Any]:
    beta = problem.config.get("beta")
    if beta is None:
        return {}
    A = problem.driver.clock(problem.tree)
    try:
        ny = weighted_norms(problem.tree, Y, beta, A)
    except ValueError:
        ny = weighted_norms(problem.tree, Y, beta, A, with_sup=False)
    nz = weighted_norms(problem.tree, Z, beta, A, with_sup=False)
    nu = weighted_norms(problem.tree, U, beta, A, with_sup=False)
    return {
        "beta": beta, "s2_y": ny.s2, "s2_alpha_y": ny.s2_alpha, "h2_z": nz.h2, "m2_u": nu.m2,
    }


def _expect(props: _Props, run: dict[str, Any], y0: float) -> None:
    if "expect" in run:
        e = run["expect"]
        props.at_most("expected_y0", abs(y0 - e["y0"]), e["tolerance"])


def _reflected(problem: Problem):
    solver = solve_reflected_lower if problem.side == "lower" else solve_reflected_upper
    return solver(problem.tree, problem.driver, problem.xi, problem.barrier)


def _reflected_props(props: _Props, sol, prefix: str = "") -> None:
    props.at_most(prefix + "step_residual", max(float(np.max(r)) for r in sol.residuals), RESIDUAL_TOL)
    props.at_most(prefix + "skorokhod_residual", skorokhod_residual(sol), SKOROKHOD_TOL)
    props.at_most(prefix + "constraint_violation", constraint_violation(sol), EXACT_TOL)
    props.at_most(prefix + "jump_matching", jump_matching_residual(sol), EXACT_TOL)
    props.at_most(prefix + "jump_support_violations", jump_support_violations(sol), 0)
    if sol.side == "upper":
        props.at_most(prefix + "upper_jump_formula", upper_jump_formula_residual(sol), EXACT_TOL)
    jm = sol.right_jump_moments()[1]
    km = sol.k_moments()[1]
    props.at_most(prefix + "right_jumps_below_k", jm - km, EXACT_TOL * (1.0 + km))


def _need_side(problem: Problem, *sides: str) -> None:
    if problem.side not in sides:
        raise ConfigError(f"run kind {problem.run['kind']!r} needs barrier side in {sides}")


def _run_solve(problem: Problem, props: _Props, scalars: dict, tables: list[Table]) -> None:
    tree = problem.tree
    if problem.barrier is None:
        sol = solve_bsde(tree, problem.driver, problem.xi)
        props.at_most("step_residual", sol.max_residual, RESIDUAL_TOL)
    else:
        sol = _reflected(problem)
        _reflected_props(props, sol)
        km, k2 = sol.k_moments()
        scalars.update(k_mean=km, k_second=k2)
    scalars.update(y0=sol.Y[0][0], z0=sol.Z[0][0], u0=sol.U[0][0])
    scalars["norms"] = _norms(problem, sol.Y, sol.Z, sol.U)
    _expect(props, problem.run, float(sol.Y[0][0]))
    tables.append(_profile(tree, sol.Y))


def _run_snell(problem: Problem, props: _Props, scalars: dict, tables: list[Table]) -> None:
    _need_side(problem, "lower")
    sol = solve_reflected_lower(problem.tree, problem.driver, problem.xi, problem.barrier)
    _reflected_props(props, sol)
    snell = snell_envelope_linear(problem.tree, gain_from_solution(sol))
    props.at_most("reflected_minus_snell", abs(sol.y0 - snell.s0), SKOROKHOD_TOL)
    props.at_most("snell_supermartingale_defect", snell.supermartingale_defect, EXACT_TOL)
    scalars.update(y0=sol.y0, snell_s0=snell.s0)
    _expect(props, problem.run, sol.y0)
    tables.append(_profile(problem.tree, sol.Y))


def _brute_force_feasible(tree) -> bool:
    N = tree.steps
    return N <= BRUTE_FORCE_MAX_STEPS and sum(tree.size(k) for k in range(N)) <= BRUTE_FORCE_MAX_BITS


def _run_stopping(
    problem: Problem, props: _Props, scalars: dict, tables: list[Table], seed: int
) -> None:
    _need_side(problem, "lower")
    tree, barrier = problem.tree, problem.barrier
    if np.any(np.abs(problem.xi - barrier.terminal) > EXACT_TOL):
        raise ConfigError("stopping runs need the terminal equal to the barrier at T")
    sol = solve_reflected_lower(tree, problem.driver, problem.xi, barrier)
    _reflected_props(props, sol)
    scalars.update(y0=sol.y0, rusc=is_rusc(barrier), epsilon_constant=C_EPSILON)
    # the oracle equality needs an r.u.s.c. barrier and an order-preserving step
    oracle_ok = is_rusc(barrier) and monotone_step(problem.driver, tree)
    scalars["monotone_step"] = monotone_step(problem.driver, tree)
    if _brute_force_feasible(tree) and oracle_ok:
        bf = brute_force_stopping_value(tree, problem.driver, barrier, problem.xi)
        gap = max(float(np.max(np.abs(sol.Y[k] - bf.values[k]))) for k in range(tree.steps + 1))
        props.at_most("brute_force_gap", gap, RESIDUAL_TOL)
        scalars["rules_enumerated"] = bf.rules_enumerated
    trials = int(problem.run.get("trials", 20))
    bad = ef_supermartingale_check(sol, trials=trials, seed=seed)
    props.at_most("ef_supermartingale_violations", bad, 0)
    table = Table(
        "epsilon",
        ["eps", "value_gap", "ratio", "martingale_gap", "threshold_ok", "k_constant"],
    )
    for eps in problem.run.get("eps_list", [0.5, 0.1, 0.01]):
        r = epsilon_optimal_time(sol, None, eps)
        table.rows.append([eps, r.value_gap, r.ratio, r.martingale_gap, int(r.threshold_ok), int(r.k_constant)])
        props.holds(f"eps={eps!r}:threshold", r.threshold_ok)
        props.holds(f"eps={eps!r}:k_constant_before_eta", r.k_constant)
        props.at_most(f"eps={eps!r}:martingale_gap", r.martingale_gap, SKOROKHOD_TOL)
        if is_rusc(barrier):
            props.at_most(f"eps={eps!r}:value_gap_ratio", r.ratio, C_EPSILON)
    tables.append(table)


def _run_penalize(problem: Problem, props: _Props, scalars: dict, tables: list[Table]) -> None:
    _need_side(problem, "upper")
    n_list = problem.run.get("n_list", [1, 2, 4, 8, 16, 32, 64])
    tree, barrier = problem.tree, problem.barrier
    rep = penalization_convergence(tree, problem.driver, problem.xi, barrier, n_list)
    table = Table(
        "penalization",
        ["n", "y0", "sup_gap", "violation", "monotone_violations", "k_mean", "k_second",
         "positivity_cont", "positivity_jump"],
    )
    for r in rep.rows:
        table.rows.append([r.n, r.y0, r.sup_gap, r.violation, r.monotone_violations, r.k_mean,
                           r.k_second, r.positivity_cont, r.positivity_jump])
    tables.append(table)
    props.holds("monotone_in_n", rep.monotone, sum(r.monotone_violations for r in rep.rows))
    props.holds("violation_decreasing", rep.violation_decreasing)
    props.holds("gap_decreasing", rep.gap_decreasing)
    props.at_most("positivity", max(-min(r.positivity_cont, r.positivity_jump) for r in rep.rows), EXACT_TOL)
    rho = build_rho_arrays(barrier, max(n_list))
    scalars.update(
        direct_y0=rep.direct_y0,
        final_y0=rep.rows[-1].y0,
        final_gap=abs(rep.rows[-1].y0 - rep.direct_y0),
        rho_counts={str(n): len(rho[n - 1].times) for n in n_list},
    )
    beta = problem.config.get("beta")
    if beta is not None:
        sol = solve_penalized(tree, problem.driver, problem.xi, barrier, n_list[-1])
        try:
            est = uniform_estimate(sol, beta, C_UNIFORM)
        except ValueError as exc:
            # the exact sup norm is over the work cap on large trees
            scalars["uniform_estimate"] = {"skipped": str(exc)}
            return
        scalars["uniform_estimate"] = {"lhs": est.lhs, "data": est.data, "constant": C_UNIFORM}
        props.holds("uniform_estimate", est.holds, est.lhs / est.data if est.data > 0 else 0.0)


def _run_compare(problem: Problem, props: _Props, scalars: dict, tables: list[Table]) -> None:
    shift = problem.run.get("shift", {})
    c, g, d = shift.get("terminal", 0.0), shift.get("source", 0.0), shift.get("barrier", 0.0)
    tree, drv = problem.tree, problem.driver
    drv2 = drv.plus(g)
    pair = DriverPair(drv, drv2, dominance_certified=True)
    if problem.barrier is None:
        s1 = solve_bsde(tree, drv, problem.xi)
        s2 = solve_bsde(tree, drv2, problem.xi + c)
        rep = compare_bsde(s1, s2, pair)
    else:
        b2 = problem.barrier.shifted(d)
        flip = problem.side == "upper"
        if flip and d > 0.0:
            raise ConfigError("upper barriers compare with a lowered barrier; use barrier shift 0")
        solver = solve_reflected_lower if not flip else solve_reflected_upper
        s1 = solver(tree, drv, problem.xi, problem.barrier)
        s2 = solver(tree, drv2, problem.xi + c, b2)
        props.holds("barrier_dominance", barrier_dominates(problem.barrier, b2))
        rep = compare_reflected(s1, s2, pair)
    props.at_most("comparison_violations", rep.violations, 0)
    scalars.update(y0_first=s1.Y[0][0], y0_second=s2.Y[0][0], max_excess=rep.max_excess)
    table = Table("compare", ["k", "t", "max_y1_minus_y2", "min_y2_minus_y1"])
    for k in range(tree.steps + 1):
        diff = s1.Y[k] - s2.Y[k]
        table.rows.append([k, tree.grid.times[k], np.max(diff), np.min(-diff)])
    tables.append(table)


def run_problem(problem: Problem, seed: int = 0) -> RunResult:
    props = _Props()
    scalars: dict[str, Any] = {}
    tables: list[Table] = []
    kind = problem.run["kind"]
    if kind == "solve":
        _run_solve(problem, props, scalars, tables)
    elif kind == "snell":
        _run_snell(problem, props, scalars, tables)
    elif kind == "stopping":
        _run_stopping(problem, props, scalars, tables, seed)
    elif kind == "penalize":
        _run_penalize(problem, props, scalars, tables)
    else:
        _run_compare(problem, props, scalars, tables)
    report = {
        "tool": "rbsde",
        "version": __version__,
        "config": problem.config,
        "seed": seed,
        "tree": {"steps": problem.tree.steps, "nodes": problem.tree.total_nodes},
        "scalars": scalars,
        "properties": props.items,
        "tables": [t.name + ".csv" for t in tables],
    }
    return RunResult(clean(report), tables)


def run_config(config: dict[str, Any], seed: int | None = None) -> RunResult:
    if seed is None:
        seed = int(config.get("seed", 0))
    return run_problem(build_problem(config), seed)
