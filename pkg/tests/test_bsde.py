from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import all_paths, stopped_value
from rbsde.bsde import (
    C_BETA,
    SolverRefusal,
    apriori_gap_bound,
    compare_bsde,
    doleans_exponential,
    f_expectation,
    girsanov_check,
    precedes,
    solve_bsde,
)
from rbsde.driver import DriverPair, linear_driver, market_driver, robust_driver, zero_driver
from rbsde.stopping import StoppingRule, random_absorbing_rule
from rbsde.suite import random_driver
from rbsde.tree import Curve, build_grid, build_tree, default_probability

seeds = st.integers(0, 2**31 - 1)


def test_brownian_terminal_is_its_own_martingale():
    tree = build_tree(build_grid(1.0, 10), 0.2)
    sol = solve_bsde(tree, zero_driver(), tree.states[10].b)
    for k in range(10):
        np.testing.assert_allclose(sol.Y[k], tree.states[k].b, atol=1e-12)
        np.testing.assert_allclose(sol.Z[k], 1.0, atol=1e-12)
        np.testing.assert_allclose(sol.U[k], 0.0, atol=1e-12)


def test_default_digital_equals_default_probability():
    tree = build_tree(build_grid(1.0, 100), 0.1)
    sol = solve_bsde(tree, zero_driver(), (~tree.states[100].alive).astype(float))
    assert sol.y0 == pytest.approx(default_probability(tree, 1.0), abs=1e-14)
    assert abs(sol.y0 - (1 - math.exp(-0.1))) <= 1e-3


def test_discounting_closed_form():
    tree = build_tree(build_grid(1.0, 200), 0.0)
    sol = solve_bsde(tree, market_driver(0.05, 0.05, 0.2), np.ones(tree.size(200)))
    assert abs(sol.y0 - math.exp(-0.05)) <= 1e-3


def test_refuses_coarse_grid_with_required_steps():
    tree = build_tree(build_grid(1.0, 10), 0.0)
    with pytest.raises(SolverRefusal) as info:
        solve_bsde(tree, market_driver(50.0, 50.0, 0.2), np.ones(11))
    assert info.value.required_steps == 51
    assert isinstance(info.value, ValueError)


def test_terminal_validation():
    tree = build_tree(build_grid(1.0, 3), 0.0)
    with pytest.raises(ValueError):
        solve_bsde(tree, zero_driver(), np.ones(3))
    with pytest.raises(ValueError):
        solve_bsde(tree, zero_driver(), np.array([0, 1, math.inf, 0]))


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_recursion_residual_and_batch_consistency(seed):
    rng = np.random.default_rng(seed)
    tree = build_tree(build_grid(1.0, int(rng.integers(3, 25))), float(rng.choice([0.0, 0.3, 0.7])))
    drv = random_driver(rng)
    xi = rng.normal(size=(3, tree.size(tree.steps)))
    batch = solve_bsde(tree, drv, xi)
    assert batch.max_residual <= 1e-9
    order = rng.permutation(3)
    permuted = solve_bsde(tree, drv, xi[order])
    for k in range(tree.steps + 1):
        np.testing.assert_allclose(permuted.Y[k], batch.Y[k][order], atol=1e-12, rtol=0)
        np.testing.assert_allclose(solve_bsde(tree, drv, xi[1]).Y[k], batch.Y[k][1], atol=1e-12, rtol=0)


def test_f_expectation_with_zero_driver_is_conditional_expectation():
    tree = build_tree(build_grid(1.0, 4), 0.4)
    rng = np.random.default_rng(0)
    eta = random_absorbing_rule(tree, rng)
    payoff = [rng.normal(size=tree.size(k)) for k in range(5)]
    immediate = StoppingRule.immediate(tree)
    value = f_expectation(tree, zero_driver(), immediate, eta, payoff)[0][0]
    assert value == pytest.approx(stopped_value(tree, eta.stop, payoff), abs=1e-13)


def test_f_expectation_identity_when_rules_coincide():
    tree = build_tree(build_grid(1.0, 5), 0.2)
    rng = np.random.default_rng(1)
    eta = random_absorbing_rule(tree, rng)
    payoff = [rng.normal(size=tree.size(k)) for k in range(6)]
    out = f_expectation(tree, robust_driver(0.5, 0.3, 0.5), eta, eta, payoff)
    for k in range(6):
        np.testing.assert_array_equal(out[k][eta.stop[k]], payoff[k][eta.stop[k]])


def test_f_expectation_rejects_sigma_after_eta():
    tree = build_tree(build_grid(1.0, 4), 0.0)
    late, early = StoppingRule.at_layer(tree, 3), StoppingRule.at_layer(tree, 1)
    assert precedes(tree, early, late) and not precedes(tree, late, early)
    with pytest.raises(ValueError):
        f_expectation(tree, zero_driver(), late, early, [np.zeros(tree.size(k)) for k in range(5)])


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_f_expectation_flow_property(seed):
    rng = np.random.default_rng(seed)
    tree = build_tree(build_grid(1.0, int(rng.integers(2, 13))), float(rng.choice([0.0, 0.4])))
    drv = random_driver(rng)
    eta = random_absorbing_rule(tree, rng, 0.2)
    mid = eta.union(random_absorbing_rule(tree, rng, 0.2))
    sigma = mid.union(random_absorbing_rule(tree, rng, 0.2))
    payoff = [rng.normal(size=tree.size(k)) for k in range(tree.steps + 1)]
    inner = f_expectation(tree, drv, mid, eta, payoff)
    two_step = f_expectation(tree, drv, sigma, mid, inner)
    direct = f_expectation(tree, drv, sigma, eta, payoff)
    for k in range(tree.steps + 1):
        m = sigma.stop[k]
        np.testing.assert_allclose(two_step[k][m], direct[k][m], atol=1e-10, rtol=0)


def test_apriori_identical_inputs():
    tree = build_tree(build_grid(1.0, 10), 0.3)
    d = linear_driver(0.3, 0.2, 0.1, 0.5)
    xi = tree.states[10].b
    g = apriori_gap_bound(tree, d, d, xi, xi, 3.0)
    assert g.lhs == 0.0 and g.rhs == 0.0 and g.holds


@pytest.mark.parametrize("c", [0.1, 1.0, 10.0])
def test_apriori_terminal_and_source_shift(c):
    tree = build_tree(build_grid(1.0, 12), 0.3)
    d = linear_driver(-0.3, 0.2, 0.4, 0.1)
    xi = np.sin(tree.states[12].b)
    g = apriori_gap_bound(tree, d, d, xi, xi + c, 3.0)
    assert g.lhs > 0.0 and g.holds
    assert g.rhs == pytest.approx(C_BETA * math.exp(3.0 * d.clock(tree)[-1]) * c * c)
    assert apriori_gap_bound(tree, d, d.plus(c), xi, xi, 3.0).holds


def test_apriori_needs_beta_above_two():
    tree = build_tree(build_grid(1.0, 4), 0.0)
    with pytest.raises(ValueError):
        apriori_gap_bound(tree, zero_driver(), zero_driver(), np.zeros(5), np.zeros(5), 2.0)


def test_density_is_one_without_change():
    tree = build_tree(build_grid(1.0, 10), 0.3)
    mc = doleans_exponential(tree)
    assert all(np.all(lam == 1.0) for lam in mc.Lam)
    r = girsanov_check(mc)
    assert r.brownian == 0.0 and r.default == 0.0


def test_density_vanishes_after_default_when_psi_is_minus_one():
    tree = build_tree(build_grid(1.0, 8), 0.4)
    mc = doleans_exponential(tree, psi=-1.0)
    for k, st_ in enumerate(tree.states):
        assert np.all(mc.Lam[k][~st_.alive] == 0.0)
        assert np.all(mc.Lam[k][st_.alive] > 0.0)
    assert tree.expectation(8, mc.Lam[8]) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("phi, psi, gamma", [(0.3, 0.0, 0.2), (0.0, 0.5, 0.1), (-0.4, 1.5, 0.6)])
def test_girsanov_examples(phi, psi, gamma):
    tree = build_tree(build_grid(1.0, 30), gamma)
    r = girsanov_check(doleans_exponential(tree, phi, psi))
    assert r.brownian <= 1e-10 and r.default <= 1e-10


@settings(max_examples=25, deadline=None)
@given(st.floats(-1.0, 1.0), st.floats(-1.0, 2.0), st.sampled_from([0.0, 0.2, 0.6]))
def test_density_is_a_nonnegative_martingale(phi, psi, gamma):
    tree = build_tree(build_grid(1.0, 20), gamma)
    mc = doleans_exponential(tree, phi, psi)
    for k in range(tree.steps + 1):
        assert tree.expectation(k, mc.Lam[k]) == pytest.approx(1.0, abs=1e-10)
    assert min(float(np.min(lam)) for lam in mc.Lam) >= 0.0
    for lam, closed in zip(mc.Lam, mc.Lam_closed):
        np.testing.assert_allclose(lam, closed, rtol=1e-10)


def test_node_density_projects_path_density():
    tree = build_tree(build_grid(1.0, 5), 0.3)
    mc = doleans_exponential(tree, 0.8, 0.7)
    mass = [np.zeros(tree.size(k)) for k in range(6)]
    total = 0.0
    for nodes, p in all_paths(tree):
        lam = 1.0
        for k, i in enumerate(nodes):
            mass[k][i] += p * lam
            if k < 5:
                br = tree.branchings[k]
                nxt = nodes[k + 1]
                branch = 0 if nxt == br.up[i] else 1 if nxt == br.down[i] else 2
                lam *= mc.weights[k][branch][i]
        total += p * lam
    assert total == pytest.approx(1.0, abs=1e-12)
    for k in range(6):
        np.testing.assert_allclose(mass[k] / tree.probabilities[k], mc.Lam[k], rtol=1e-12)


def test_density_with_discount_and_curves():
    tree = build_tree(build_grid(1.0, 10), 0.2)
    mc = doleans_exponential(tree, Curve(np.array([0.0, 0.5]), np.array([0.1, -0.2])), 0.3, 0.05)
    assert mc.Lam_closed is None
    assert tree.expectation(10, mc.Lam[10]) == pytest.approx((1 + 0.05 * 0.1) ** 10, rel=1e-12)
    with pytest.raises(ValueError):
        doleans_exponential(tree, psi=-1.5)
    with pytest.raises(ValueError, match="negative branch"):
        doleans_exponential(tree, phi=5.0)


def test_compare_identical_data_is_strict_equality():
    tree = build_tree(build_grid(1.0, 8), 0.3)
    d = linear_driver(0.2, 0.3, 0.4, 0.1)
    xi = np.cos(tree.states[8].b)
    rep = compare_bsde(solve_bsde(tree, d, xi), solve_bsde(tree, d, xi), DriverPair(d, d, True), strict=True)
    assert rep.ok and rep.equal_nodes == tree.total_nodes


def test_compare_terminal_shift_is_strict_everywhere():
    tree = build_tree(build_grid(1.0, 10), 0.3)
    d = linear_driver(-0.3, 0.2, 0.5, 0.0)
    xi = tree.states[10].b
    s1, s2 = solve_bsde(tree, d, xi), solve_bsde(tree, d, xi + 1.0)
    assert compare_bsde(s1, s2, DriverPair(d, d, True)).ok
    assert all(np.all(a < b) for a, b in zip(s1.Y, s2.Y))


def test_compare_source_shift():
    tree = build_tree(build_grid(1.0, 10), 0.3)
    d = linear_driver(-0.3, 0.2, 0.5, 0.0)
    xi = tree.states[10].b
    s1, s2 = solve_bsde(tree, d, xi), solve_bsde(tree, d.plus(1.0), xi)
    assert compare_bsde(s1, s2, DriverPair(d, d.plus(1.0), True)).ok
    assert s1.y0 < s2.y0


def test_compare_needs_certificate_and_same_tree():
    tree = build_tree(build_grid(1.0, 4), 0.0)
    d = zero_driver()
    s = solve_bsde(tree, d, np.zeros(5))
    with pytest.raises(ValueError, match="certificate"):
        compare_bsde(s, s, DriverPair(d, d, False))
    other = solve_bsde(build_tree(build_grid(1.0, 4), 0.0), d, np.zeros(5))
    with pytest.raises(ValueError):
        compare_bsde(s, other, True)


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_compare_random_dominated_pairs(seed):
    rng = np.random.default_rng(seed)
    tree = build_tree(build_grid(1.0, int(rng.integers(2, 21))), float(rng.choice([0.0, 0.3, 0.8])))
    d1 = linear_driver(rng.uniform(-1, 1), rng.uniform(-0.5, 0.5), rng.uniform(-1, 1), rng.uniform(-0.5, 0.5))
    d2 = d1.plus(float(rng.uniform(0, 0.3)))
    xi1 = rng.normal(size=tree.size(tree.steps))
    xi2 = xi1 + rng.uniform(0, 0.3, xi1.size)
    rep = compare_bsde(solve_bsde(tree, d1, xi1), solve_bsde(tree, d2, xi2), DriverPair(d1, d2, True))
    assert rep.violations == 0
