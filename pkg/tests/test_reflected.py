from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rbsde.bsde import solve_bsde
from rbsde.driver import DriverPair, linear_driver, robust_driver, zero_driver
from rbsde.experiment import build_problem
from rbsde.fixtures import load_fixture
from rbsde.paths import Barrier
from rbsde.reflected import (
    barrier_dominates,
    compare_reflected,
    constraint_violation,
    jump_matching_residual,
    jump_support_violations,
    penalization_convergence,
    penalty_positivity_check,
    skorokhod_residual,
    solve_penalized,
    solve_reflected_lower,
    solve_reflected_upper,
    upper_jump_formula_residual,
    with_spurious_increment,
)
from rbsde.stopping import gain_from_solution, snell_envelope_linear
from rbsde.suite import lower_family, random_barrier, random_driver
from rbsde.tree import build_grid, build_tree

seeds = st.integers(0, 2**31 - 1)


def random_lower(seed: int, rusc: bool | None = None):
    rng = np.random.default_rng(seed)
    tree = build_tree(build_grid(1.0, int(rng.integers(2, 25))), float(rng.choice([0.0, 0.3, 0.7])))
    flag = bool(rng.random() < 0.5) if rusc is None else rusc
    bar = random_barrier(tree, rng, rusc=flag)
    xi = np.maximum(rng.normal(size=tree.size(tree.steps)), bar.terminal)
    return tree, random_driver(rng), xi, bar


def test_far_barrier_gives_plain_bsde():
    tree = build_tree(build_grid(1.0, 12), 0.3)
    d = linear_driver(0.3, 0.2, 0.4, 0.1)
    xi = np.sin(tree.states[12].b)
    sol = solve_reflected_lower(tree, d, xi, Barrier.constant(tree, -1e6))
    plain = solve_bsde(tree, d, xi)
    for k in range(13):
        np.testing.assert_allclose(sol.Y[k], plain.Y[k], atol=1e-12, rtol=0)
    assert sol.k_moments() == (0.0, 0.0)
    up = solve_reflected_upper(tree, d, xi, Barrier.constant(tree, 1e6))
    np.testing.assert_allclose(up.Y[0], plain.Y[0], atol=1e-12)


def test_constant_barrier_equal_to_terminal():
    tree = build_tree(build_grid(1.0, 6), 0.2)
    sol = solve_reflected_lower(tree, zero_driver(), np.full(tree.size(6), 1.5), Barrier.constant(tree, 1.5))
    assert all(np.all(y == 1.5) for y in sol.Y)
    assert sol.k_moments() == (0.0, 0.0)


def test_american_put_matches_snell_oracle():
    config = load_fixture("american-put")
    config["driver"] = {"name": "zero"}
    p = build_problem(config)
    sol = solve_reflected_lower(p.tree, p.driver, p.xi, p.barrier)
    snell = snell_envelope_linear(p.tree, gain_from_solution(sol))
    assert abs(sol.y0 - snell.s0) <= 1e-12
    assert sol.y0 > float(p.barrier.value[0][0])


def test_terminal_must_respect_barrier():
    tree = build_tree(build_grid(1.0, 3), 0.0)
    with pytest.raises(ValueError, match="below"):
        solve_reflected_lower(tree, zero_driver(), np.zeros(4), Barrier.constant(tree, 1.0))
    with pytest.raises(ValueError, match="above"):
        solve_reflected_upper(tree, zero_driver(), np.ones(4), Barrier.constant(tree, 0.0))
    with pytest.raises(ValueError):
        solve_penalized(tree, zero_driver(), np.ones(4), Barrier.constant(tree, 0.0), 1)
    with pytest.raises(ValueError):
        solve_penalized(tree, zero_driver(), np.zeros(4), Barrier.constant(tree, 0.0), 0)


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_upper_solver_mirrors_lower_solver(seed):
    tree, d, xi, bar = random_lower(seed)
    low = solve_reflected_lower(tree, d, xi, bar)
    up = solve_reflected_upper(tree, d.dual(), -xi, -bar)
    for k in range(tree.steps + 1):
        np.testing.assert_allclose(up.Y[k], -low.Y[k], atol=1e-12, rtol=0)
    assert upper_jump_formula_residual(up) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_direct_solver_invariants(seed):
    tree, d, xi, bar = random_lower(seed)
    sol = solve_reflected_lower(tree, d, xi, bar)
    assert max(float(np.max(r)) for r in sol.residuals) <= 1e-9
    assert constraint_violation(sol) <= 1e-12
    assert jump_matching_residual(sol) <= 1e-12
    assert jump_support_violations(sol) == 0
    assert skorokhod_residual(sol) <= 1e-10
    assert all(np.all(a >= 0) for a in sol.dK_interval + sol.dK_right)
    jm, km = sol.right_jump_moments()[1], sol.k_moments()[1]
    assert jm <= km + 1e-12 * (1 + km)


def test_skorokhod_flags_spurious_increment():
    case = lower_family(1, 5)[0]
    sol = solve_reflected_lower(case.tree, case.driver, case.xi, case.barrier)
    k = case.tree.steps // 2
    node = int(np.argmax(sol.Y[k] - case.barrier.value[k]))
    assert sol.Y[k][node] > case.barrier.value[k][node]
    assert skorokhod_residual(with_spurious_increment(sol, k, node, 0.1)) > 1e-10


def test_skorokhod_zero_without_reflection():
    tree = build_tree(build_grid(1.0, 6), 0.3)
    sol = solve_reflected_lower(tree, zero_driver(), np.zeros(tree.size(6)), Barrier.constant(tree, -5.0))
    assert skorokhod_residual(sol) == 0.0


def test_penalization_with_inactive_barrier_is_plain_bsde():
    tree = build_tree(build_grid(1.0, 20), 0.3)
    d = robust_driver(0.4, 0.2, 0.3)
    xi = tree.states[20].b
    far = Barrier.constant(tree, 1e6)
    plain = solve_bsde(tree, d, xi)
    for n in (1, 8, 64):
        pen = solve_penalized(tree, d, xi, far, n)
        np.testing.assert_allclose(pen.Y[0], plain.Y[0], atol=1e-12)
        pos = penalty_positivity_check(pen)
        assert pos.continuous_sum == 0.0 and pos.jump_sum == 0.0
    rep = penalization_convergence(tree, d, xi, far, [1, 2, 4])
    assert all(r.sup_gap <= 1e-12 and r.violation == 0.0 for r in rep.rows)
    with pytest.raises(ValueError):
        penalization_convergence(tree, d, xi, far, [4, 2])


def test_positivity_continuous_part_is_sum_of_squares():
    tree = build_tree(build_grid(1.0, 40), 0.2)
    d = linear_driver(0.1, 0.2, 0.3, 1.0)
    bar = Barrier.from_function(tree, lambda t, s: 0.2 + 0.3 * s.b)
    xi = np.minimum(tree.states[40].b, bar.terminal)
    pen = solve_penalized(tree, d, xi, bar, 16)
    expected = sum(
        tree.expectation(k, 16 * tree.grid.dt[k] * np.maximum(pen.Y_right[k] - bar.right[k], 0.0) ** 2)
        for k in range(40)
    )
    pos = penalty_positivity_check(pen)
    assert pos.continuous_sum > 0.0
    assert pos.continuous_sum == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("jump", [-0.6, 0.6])
def test_positivity_at_right_jumps(jump):
    tree = build_tree(build_grid(1.0, 40), 0.2)

    def fn(t, s):
        v = 0.3 + 0.2 * s.b
        return v, v, v + (jump if abs(t - 0.5) < 1e-12 else 0.0)

    bar = Barrier.from_function(tree, fn)
    xi = np.minimum(tree.states[40].b + 0.5, bar.terminal)
    d = linear_driver(0.1, 0.2, 0.3, 1.5)
    for n in (1, 4, 16):
        pos = penalty_positivity_check(solve_penalized(tree, d, xi, bar, n))
        assert pos.holds


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_penalization_is_monotone_in_level(seed):
    tree, d, xi, bar = random_lower(seed)
    up = -bar
    rep = penalization_convergence(tree, d, -xi, up, [1, 2, 4, 8, 16, 32])
    assert rep.monotone
    assert rep.violation_decreasing
    assert rep.rows[-1].sup_gap <= rep.rows[0].sup_gap + 1e-12


def test_compare_reflected_identical_data():
    tree, d, xi, bar = random_lower(11)
    s = solve_reflected_lower(tree, d, xi, bar)
    rep = compare_reflected(s, solve_reflected_lower(tree, d, xi, bar), DriverPair(d, d, True), strict=True)
    assert rep.ok and rep.equal_nodes == tree.total_nodes


def test_compare_reflected_barrier_shift_strict_where_binding():
    tree, d, xi, bar = random_lower(12, rusc=True)
    d = linear_driver(-0.2, 0.1, 0.3, 0.0)
    s1 = solve_reflected_lower(tree, d, xi, bar)
    bar2 = bar.shifted(0.5)
    s2 = solve_reflected_lower(tree, d, np.maximum(xi, bar2.terminal), bar2)
    assert barrier_dominates(bar, bar2) and not barrier_dominates(bar2, bar)
    assert compare_reflected(s1, s2, DriverPair(d, d, True)).violations == 0
    binding = [s1.Y[k] == bar.value[k] for k in range(tree.steps + 1)]
    assert any(m.any() for m in binding)
    for k, m in enumerate(binding):
        assert np.all(s1.Y[k][m] < s2.Y[k][m])


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_compare_reflected_random_terminal_shift(seed):
    tree, d, xi, bar = random_lower(seed)
    s1 = solve_reflected_lower(tree, d, xi, bar)
    s2 = solve_reflected_lower(tree, d, xi + 1.0, bar)
    assert compare_reflected(s1, s2, DriverPair(d, d, True)).violations == 0


def test_compare_reflected_needs_certificate():
    tree, d, xi, bar = random_lower(13)
    s = solve_reflected_lower(tree, d, xi, bar)
    with pytest.raises(ValueError, match="certificate"):
        compare_reflected(s, s, None)


def test_paths_of_solution_are_regulated():
    tree, d, xi, bar = random_lower(14)
    sol = solve_reflected_lower(tree, d, xi, bar)
    nodes = [0]
    for k in range(tree.steps):
        nodes.append(int(tree.branchings[k].up[nodes[-1]]))
    K = sol.K_along(nodes)
    Y = sol.Y_along(nodes)
    assert np.all(np.diff(np.ravel(np.column_stack([K.left, K.value, K.right]))) >= -1e-15)
    np.testing.assert_allclose(Y.right_jumps, -K.right_jumps, atol=1e-12)
