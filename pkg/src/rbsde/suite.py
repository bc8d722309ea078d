"""Seeded random families and the property battery behind ``rbsde suite``."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from .bsde import compare_bsde, doleans_exponential, girsanov_check, martingale_representation, solve_bsde
from .driver import Driver, DriverPair, linear_driver, robust_driver
from .fixtures import list_fixtures, load_fixture
from .paths import Barrier, RegulatedPath, integration_by_parts_check, ito_check, tanaka_check
from .reflected import (
    compare_reflected,
    skorokhod_residual,
    solve_reflected_lower,
    solve_reflected_upper,
    with_spurious_increment,
)
from .runner import RunResult, clean, run_config
from .stopping import brute_force_stopping_value, gain_from_solution, snell_envelope_linear
from .tree import ScenarioTree, build_grid, build_tree

# (N, gamma) shapes for the brute-force family; all fit the enumeration caps and keep the
# one-step map order preserving for every driver random_driver can draw.
ORACLE_SHAPES = ((2, 0.6), (3, 0.5), (3, 0.0), (4, 0.0), (5, 0.0), (2, 0.3), (3, 0.8))


def random_driver(rng: np.random.Generator) -> Driver:
    if rng.random() < 0.5:
        return robust_driver(rng.uniform(0.0, 1.0), rng.uniform(0.0, 0.5), rng.uniform(0.0, 1.0))
    return linear_driver(
        rng.uniform(-1.0, 1.0), rng.uniform(-0.5, 0.5), rng.uniform(-1.0, 1.0), rng.uniform(-0.5, 0.5)
    )


def random_barrier(tree: ScenarioTree, rng: np.random.Generator, rusc: bool = True) -> Barrier:
    """Node-dependent Gaussian barrier with random right and left jumps.

    With ``rusc`` right jumps are downward only; otherwise both signs appear.
    """
    N = tree.steps
    layers = []
    for k in range(N + 1):
        n = tree.size(k)
        v = rng.normal(0.0, 0.5, n)
        jump = -np.abs(rng.normal(0.0, 0.3, n)) if rusc else rng.normal(0.0, 0.3, n)
        r = v + jump * (rng.random(n) < 0.4)
        left = v + rng.normal(0.0, 0.3, n) * (rng.random(n) < 0.3)
        layers.append((left, v, r))
    return Barrier(
        tree,
        tuple([layers[0][1]] + [a for a, _, _ in layers[1:]]),
        tuple(b for _, b, _ in layers),
        tuple([c for _, _, c in layers[:-1]] + [layers[-1][1]]),
    )


@dataclass(frozen=True, slots=True, eq=False)
class StoppingCase:
    tree: ScenarioTree
    driver: Driver
    barrier: Barrier

    @property
    def xi(self) -> np.ndarray:
        return self.barrier.terminal


def oracle_family(count: int, seed: int, shapes=ORACLE_SHAPES) -> list[StoppingCase]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        N, g = shapes[i % len(shapes)]
        tree = build_tree(build_grid(1.0, N), g)
        out.append(StoppingCase(tree, random_driver(rng), random_barrier(tree, rng)))
    return out


def lower_family(
    count: int, seed: int, sizes=(10, 20, 40), gammas=(0.0, 0.2, 0.5), rusc: bool | None = None
) -> list[StoppingCase]:
    """Random lower-barrier problems with xi equal to the barrier at T.

    ``rusc=None`` alternates r.u.s.c. and general barriers.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        tree = build_tree(build_grid(1.0, sizes[i % len(sizes)]), gammas[(i // len(sizes)) % len(gammas)])
        flag = i % 2 == 0 if rusc is None else rusc
        out.append(StoppingCase(tree, random_driver(rng), random_barrier(tree, rng, rusc=flag)))
    return out


def random_regulated_path(rng: np.random.Generator, n: int = 12, T: float = 1.0) -> RegulatedPath:
    grid = build_grid(T, n)
    v = np.cumsum(rng.normal(0.0, 0.4, n + 1))
    left = v + rng.normal(0.0, 0.3, n + 1) * (rng.random(n + 1) < 0.5)
    right = v + rng.normal(0.0, 0.3, n + 1) * (rng.random(n + 1) < 0.5)
    left[0] = v[0]
    right[-1] = v[-1]
    return RegulatedPath(grid, left, v, right)


CONVEX: tuple[tuple[str, Callable[[float], float], Callable[[float], float]], ...] = (
    ("square", lambda x: x * x, lambda x: 2.0 * x),
    ("abs", abs, lambda x: 1.0 if x > 0.0 else -1.0),
    ("positive_part", lambda x: max(x, 0.0), lambda x: 1.0 if x > 0.0 else 0.0),
    ("exp", math.exp, math.exp),
)


def comparison_pair(rng: np.random.Generator, N: int, gamma: float, reflected: bool):
    """Two problems with certified dominance: larger terminal, source and barrier."""
    tree = build_tree(build_grid(1.0, N), gamma)
    d1 = linear_driver(rng.uniform(-1, 1), rng.uniform(-0.5, 0.5), rng.uniform(-1, 1), rng.uniform(-0.5, 0.5))
    d2 = d1.plus(float(rng.uniform(0.0, 0.3)))
    pair = DriverPair(d1, d2, dominance_certified=True)
    st = tree.states[-1]
    xi1 = rng.normal(0.0, 1.0, st.size)
    xi2 = xi1 + rng.uniform(0.0, 0.3, st.size)
    if not reflected:
        return compare_bsde(solve_bsde(tree, d1, xi1), solve_bsde(tree, d2, xi2), pair)
    b1 = random_barrier(tree, rng, rusc=False)
    b2 = b1.shifted(float(rng.uniform(0.0, 0.2)))
    xi1 = np.maximum(xi1, b1.terminal)
    xi2 = np.maximum(xi2, b2.terminal)
    if rng.random() < 0.5:
        return compare_reflected(
            solve_reflected_lower(tree, d1, xi1, b1), solve_reflected_lower(tree, d2, xi2, b2), pair
        )
    # Upper barriers: the dominating problem gets the higher barrier.
    u1 = -random_barrier(tree, rng, rusc=False)
    u2 = u1.shifted(float(rng.uniform(0.0, 0.2)))
    x1 = np.minimum(xi1 - 0.5, u1.terminal)
    x2 = np.minimum(x1 + rng.uniform(0.0, 0.3, st.size), u2.terminal)
    return compare_reflected(
        solve_reflected_upper(tree, d1, x1, u1), solve_reflected_upper(tree, d2, x2, u2), pair
    )


def equality_pair(rng: np.random.Generator, N: int, gamma: float):
    """Equal data on a subtree: xi2 = xi1 except on leaves below one branch."""
    tree = build_tree(build_grid(1.0, N), gamma)
    d = linear_driver(rng.uniform(-1, 1), rng.uniform(-0.5, 0.5), rng.uniform(-1, 1), 0.1)
    st = tree.states[-1]
    xi1 = rng.normal(0.0, 1.0, st.size)
    xi2 = xi1 + np.where(st.ups > N // 2, rng.uniform(0.0, 0.5, st.size), 0.0)
    return compare_bsde(
        solve_bsde(tree, d, xi1), solve_bsde(tree, d, xi2), DriverPair(d, d, True), strict=True
    )


class Battery:
    """Collects named checks with values and tolerances."""

    def __init__(self) -> None:
        self.rows: list[dict[str, Any]] = []

    def at_most(self, group: str, name: str, value: float, tol: float) -> None:
        value = float(value)
        self.rows.append({"group": group, "name": name, "value": value, "tolerance": tol,
                          "passed": bool(value <= tol)})

    def holds(self, group: str, name: str, ok: bool) -> None:
        self.rows.append({"group": group, "name": name, "value": float(not ok), "tolerance": 0.0,
                          "passed": bool(ok)})


def _representation(b: Battery, rng, fast: bool) -> None:
    worst = 0.0
    for N in (5, 20) if fast else (5, 20, 50):
        for g in (0.0, 0.1, 0.5):
            tree = build_tree(build_grid(1.0, N), g)
            for _ in range(5 if fast else 20):
                res, _ = martingale_representation(tree, rng.normal(0.0, 1.0, tree.size(N)))
                worst = max(worst, res)
    b.at_most("representation", "max_residual", worst, 1e-12)


def _oracle(b: Battery, seed: int, fast: bool) -> None:
    worst = 0.0
    for case in oracle_family(8 if fast else 25, seed):
        sol = solve_reflected_lower(case.tree, case.driver, case.xi, case.barrier)
        bf = brute_force_stopping_value(case.tree, case.driver, case.barrier, case.xi)
        worst = max(worst, max(float(np.max(np.abs(sol.Y[k] - bf.values[k])))
                               for k in range(case.tree.steps + 1)))
    b.at_most("stopping", "brute_force_gap", worst, 1e-9)


def _snell_and_skorokhod(b: Battery, seed: int, fast: bool) -> None:
    snell = sk = 0.0
    for case in lower_family(4 if fast else 9, seed):
        sol = solve_reflected_lower(case.tree, case.driver, case.xi, case.barrier)
        snell = max(snell, abs(sol.y0 - snell_envelope_linear(case.tree, gain_from_solution(sol)).s0))
        sk = max(sk, skorokhod_residual(sol))
    b.at_most("snell", "reflected_minus_snell", snell, 1e-10)
    b.at_most("skorokhod", "max_residual", sk, 1e-10)
    case = lower_family(1, seed + 1)[0]
    sol = solve_reflected_lower(case.tree, case.driver, case.xi, case.barrier)
    k = case.tree.steps // 2
    node = int(np.argmax(sol.Y[k] - case.barrier.value[k]))
    bad = with_spurious_increment(sol, k, node, 0.1)
    b.holds("skorokhod", "spurious_increment_flagged", skorokhod_residual(bad) > 1e-10)


def _comparison(b: Battery, rng, fast: bool) -> None:
    viol = fails = 0
    count = 20 if fast else 100
    for i in range(count):
        rep = comparison_pair(rng, (5, 10, 20)[i % 3], (0.0, 0.3, 0.8)[i % 3], reflected=i % 2 == 1)
        viol += rep.violations
    for i in range(5 if fast else 20):
        rep = equality_pair(rng, (6, 10)[i % 2], (0.0, 0.4)[i % 2])
        fails += rep.strict_failures
    b.at_most("comparison", "violations", viol, 0)
    b.at_most("comparison", "strict_failures", fails, 0)


def _girsanov(b: Battery, rng, fast: bool) -> None:
    mean_err = neg = mom = 0.0
    for i in range(5 if fast else 20):
        tree = build_tree(build_grid(1.0, 30), (0.0, 0.2, 0.6)[i % 3])
        phi = float(rng.uniform(-1.0, 1.0))
        psi = float(rng.uniform(-1.0, 2.0))
        mc = doleans_exponential(tree, phi, psi)
        N = tree.steps
        mean_err = max(mean_err, abs(tree.expectation(N, mc.Lam[N]) - 1.0))
        neg = max(neg, -min(float(np.min(lam)) for lam in mc.Lam))
        r = girsanov_check(mc)
        mom = max(mom, r.brownian, r.default)
    b.at_most("girsanov", "density_mean_error", mean_err, 1e-10)
    b.at_most("girsanov", "negative_density", neg, 0.0)
    b.at_most("girsanov", "reweighted_means", mom, 1e-10)


def _calculus(b: Battery, rng, fast: bool) -> None:
    ibp = ito = jump = 0.0
    monotone = True
    for _ in range(20 if fast else 100):
        x1, x2 = random_regulated_path(rng), random_regulated_path(rng)
        ibp = max(ibp, integration_by_parts_check(x1, x2))
        A = np.cumsum(np.concatenate([[0.0], rng.uniform(0.0, 0.2, x1.grid.steps)]))
        ito = max(ito, ito_check(x1, A, 3.0))
        for _, phi, dphi in CONVEX:
            rep = tanaka_check(x1, phi, dphi)
            monotone &= rep.monotone
            jump = max(jump, rep.jump_residual)
    b.at_most("calculus", "integration_by_parts", ibp, 1e-12)
    b.at_most("calculus", "weighted_square", ito, 1e-12)
    b.at_most("calculus", "tanaka_jump", jump, 1e-12)
    b.holds("calculus", "tanaka_monotone", monotone)


def run_suite(seed: int = 0, fast: bool = False) -> tuple[dict[str, Any], dict[str, RunResult]]:
    """Run every bundled fixture and the property battery; returns (report, fixture runs)."""
    runs = {name: run_config(load_fixture(name), seed) for name in list_fixtures()}
    rng = np.random.default_rng(seed)
    b = Battery()
    _representation(b, rng, fast)
    _oracle(b, seed, fast)
    _snell_and_skorokhod(b, seed, fast)
    _comparison(b, rng, fast)
    _girsanov(b, rng, fast)
    _calculus(b, rng, fast)
    fixtures = {
        name: {
            "passed": r.passed,
            "failed": [p["name"] for p in r.report["properties"] if not p["passed"]],
            "scalars": r.report["scalars"],
        }
        for name, r in runs.items()
    }
    report = {
        "tool": "rbsde",
        "version": runs[next(iter(runs))].report["version"],
        "seed": seed,
        "fast": fast,
        "fixtures": fixtures,
        "properties": b.rows,
        "passed": all(f["passed"] for f in fixtures.values()) and all(r["passed"] for r in b.rows),
    }
    return clean(report), runs
