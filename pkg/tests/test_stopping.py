from __future__ import annotations

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import all_rules, stopped_value
from rbsde.bsde import solve_bsde
from rbsde.driver import DriverPair, linear_driver, monotone_step, zero_driver
from rbsde.paths import Barrier, is_rusc
from rbsde.reflected import compare_reflected, solve_reflected_lower
from rbsde.stopping import (
    BRUTE_FORCE_MAX_STEPS,
    C_EPSILON,
    GainProcess,
    StoppingRule,
    brute_force_stopping_value,
    ef_supermartingale_check,
    epsilon_optimal_time,
    gain_from_solution,
    nonlinear_stopping_value,
    random_absorbing_rule,
    snell_envelope_linear,
)
from rbsde.suite import oracle_family, random_barrier, random_driver
from rbsde.tree import build_grid, build_tree

seeds = st.integers(0, 2**31 - 1)


def stop_gain(tree, values):
    zero = tuple(np.zeros(tree.size(k)) for k in range(tree.steps))
    return GainProcess(zero, tuple(values))


def test_constant_gain_stops_immediately():
    tree = build_tree(build_grid(1.0, 5), 0.3)
    snell = snell_envelope_linear(tree, stop_gain(tree, [np.full(tree.size(k), 2.0) for k in range(6)]))
    assert all(np.all(s == 2.0) for s in snell.S)
    assert snell.rule.stop[0][0]


def test_submartingale_gain_stops_at_terminal():
    tree = build_tree(build_grid(1.0, 6), 0.2)
    g = [tree.grid.times[k] + tree.states[k].b for k in range(7)]
    snell = snell_envelope_linear(tree, stop_gain(tree, g))
    assert snell.s0 == pytest.approx(tree.expectation(6, g[6]), abs=1e-14)
    assert not any(snell.rule.stop[k].any() for k in range(6))


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.sampled_from([0.0, 0.5]), seeds)
def test_snell_is_the_smallest_dominating_supermartingale(N, gamma, seed):
    tree = build_tree(build_grid(1.0, N), gamma)
    rng = np.random.default_rng(seed)
    g = [rng.normal(size=tree.size(k)) for k in range(N + 1)]
    snell = snell_envelope_linear(tree, stop_gain(tree, g))
    assert snell.supermartingale_defect <= 1e-12
    assert all(np.all(s >= v) for s, v in zip(snell.S, g))
    best = max(stopped_value(tree, masks, g) for masks in all_rules(tree))
    assert snell.s0 == pytest.approx(best, abs=1e-12)
    assert stopped_value(tree, snell.rule.stop, g) == pytest.approx(best, abs=1e-12)


def test_brute_force_matches_hand_enumeration():
    tree = build_tree(build_grid(1.0, 2), 0.3)
    rng = np.random.default_rng(0)
    bar = random_barrier(tree, rng)
    bf = brute_force_stopping_value(tree, zero_driver(), bar, bar.terminal)
    payoff = list(bar.value)
    manual = max(stopped_value(tree, masks, payoff) for masks in all_rules(tree))
    assert bf.values[0][0] == pytest.approx(manual, abs=1e-13)
    assert bf.rules_enumerated == 2 ** (1 + tree.size(1))


def test_brute_force_constant_problem():
    tree = build_tree(build_grid(1.0, 3), 0.5)
    bf = brute_force_stopping_value(tree, zero_driver(), Barrier.constant(tree, 0.7), np.full(tree.size(3), 0.7))
    assert all(np.allclose(v, 0.7, atol=1e-14) for v in bf.values)


@settings(max_examples=15, deadline=None)
@given(seeds)
def test_brute_force_dominates_immediate_and_terminal_rules(seed):
    case = oracle_family(1, seed)[0]
    tree = case.tree
    bf = brute_force_stopping_value(tree, case.driver, case.barrier, case.xi)
    payoff = list(case.barrier.value)
    for rule in (StoppingRule.immediate(tree), StoppingRule.terminal(tree)):
        v = solve_bsde(tree, case.driver, payoff, stop_at=rule).Y
        assert all(np.all(b >= a - 1e-12) for a, b in zip(v, bf.values))


def test_brute_force_refuses_large_trees():
    tree = build_tree(build_grid(1.0, BRUTE_FORCE_MAX_STEPS + 1), 0.0)
    with pytest.raises(ValueError, match="refused"):
        brute_force_stopping_value(tree, zero_driver(), Barrier.constant(tree, 0.0), np.zeros(tree.size(tree.steps)))
    wide = build_tree(build_grid(1.0, 6), 0.8)
    with pytest.raises(ValueError, match="2\\^"):
        brute_force_stopping_value(wide, zero_driver(), Barrier.constant(wide, 0.0), np.zeros(wide.size(6)))


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_reflected_value_equals_brute_force_on_rusc_barriers(seed):
    case = oracle_family(1, seed)[0]
    assert monotone_step(case.driver, case.tree)
    rng = np.random.default_rng(seed)
    sigma = random_absorbing_rule(case.tree, rng)
    v = nonlinear_stopping_value(case.tree, case.driver, case.barrier, case.xi, sigma, check_oracle=True)
    assert v.rusc and v.oracle_gap <= 1e-9
    for k in range(case.tree.steps + 1):
        assert np.all(np.isnan(v.values[k]) == ~sigma.stop[k])


def test_non_binding_barrier_gives_terminal_f_expectation():
    case = oracle_family(1, 3)[0]
    low = Barrier.constant(case.tree, -1e3)
    xi = np.full(case.tree.size(case.tree.steps), -1e3)
    low = Barrier(case.tree, low.left, low.value[:-1] + (xi,), low.right[:-1] + (xi,))
    v = nonlinear_stopping_value(case.tree, case.driver, low, xi)
    plain = solve_bsde(case.tree, case.driver, xi)
    assert v.values[0][0] == pytest.approx(plain.y0, abs=1e-12)


def test_zero_driver_value_is_linear_snell():
    case = oracle_family(3, 9)[2]
    v = nonlinear_stopping_value(case.tree, zero_driver(), case.barrier, case.xi)
    snell = snell_envelope_linear(case.tree, stop_gain(case.tree, list(case.barrier.value)))
    assert v.values[0][0] == pytest.approx(snell.s0, abs=1e-10)


def test_stopping_value_preconditions():
    case = oracle_family(1, 4)[0]
    with pytest.raises(ValueError, match="xi equal"):
        nonlinear_stopping_value(case.tree, case.driver, case.barrier, case.xi + 1.0)
    leaky = StoppingRule.from_masks(case.tree, [np.ones(1, bool)] + [np.zeros(case.tree.size(k), bool)
                                                                        for k in range(1, case.tree.steps + 1)])
    with pytest.raises(ValueError, match="absorbing"):
        nonlinear_stopping_value(case.tree, case.driver, case.barrier, case.xi, leaky)
    rng = np.random.default_rng(4)
    upward = random_barrier(case.tree, rng, rusc=False)
    if not is_rusc(upward):
        with pytest.warns(UserWarning, match="r.u.s.c"):
            nonlinear_stopping_value(case.tree, case.driver, upward, upward.terminal)


def test_rules_algebra():
    tree = build_tree(build_grid(1.0, 4), 0.3)
    rng = np.random.default_rng(0)
    raw = StoppingRule(tree, tuple(rng.random(tree.size(k)) < 0.3 for k in range(5)))
    closed = raw.closure()
    assert closed.is_absorbing()
    assert all(np.all(c | ~r) for c, r in zip(closed.stop, raw.stop))
    assert StoppingRule.at_layer(tree, 2).is_absorbing()
    assert all(m.all() for m in StoppingRule.terminal(tree).stop[-1:])
    both = closed.intersection(StoppingRule.at_layer(tree, 2))
    assert not both.stop[1].any()
    with pytest.raises(ValueError):
        StoppingRule(tree, tuple(np.zeros(3, bool) for _ in range(5)))


def test_snell_gain_requires_lower_solution():
    case = oracle_family(1, 1)[0]
    sol = solve_reflected_lower(case.tree, case.driver, case.xi, case.barrier)
    from rbsde.reflected import solve_reflected_upper

    up = solve_reflected_upper(case.tree, case.driver.dual(), -case.xi, -case.barrier)
    with pytest.raises(ValueError):
        gain_from_solution(up)
    with pytest.raises(ValueError):
        epsilon_optimal_time(up, None, 0.1)
    with pytest.raises(ValueError):
        epsilon_optimal_time(sol, None, 0.0)


def test_epsilon_time_is_sigma_when_already_close():
    case = oracle_family(1, 2)[0]
    sol = solve_reflected_lower(case.tree, case.driver, case.xi, case.barrier)
    r = epsilon_optimal_time(sol, None, 1e6)
    assert all(np.array_equal(a, b) for a, b in zip(r.rule.stop, StoppingRule.immediate(case.tree).stop))
    above = max(float(np.max(sol.Y[k] - case.barrier.value[k])) for k in range(case.tree.steps + 1))
    assert r.value_gap == pytest.approx(above, abs=1e-14)


def test_epsilon_time_is_terminal_when_barrier_is_far():
    tree = build_tree(build_grid(1.0, 6), 0.3)
    xi = tree.states[6].b

    def fn(t, s):
        return xi if t == 1.0 else np.full(s.size, -100.0)

    bar = Barrier.from_function(tree, fn)
    sol = solve_reflected_lower(tree, robust_driver_fixed(), xi, bar)
    r = epsilon_optimal_time(sol, None, 0.01)
    assert not any(r.rule.stop[k].any() for k in range(6))
    assert r.threshold_ok and r.k_constant and r.martingale_gap <= 1e-10


def robust_driver_fixed():
    from rbsde.driver import robust_driver

    return robust_driver(0.3, 0.2, 0.4)


@settings(max_examples=25, deadline=None)
@given(seeds, st.sampled_from([0.5, 0.1, 0.01]))
def test_epsilon_lemma_checks(seed, eps):
    rng = np.random.default_rng(seed)
    tree = build_tree(build_grid(1.0, int(rng.integers(3, 20))), float(rng.choice([0.0, 0.4])))
    bar = random_barrier(tree, rng, rusc=True)
    sol = solve_reflected_lower(tree, random_driver(rng), bar.terminal, bar)
    sigma = random_absorbing_rule(tree, rng) if rng.random() < 0.5 else None
    r = epsilon_optimal_time(sol, sigma, eps)
    assert r.threshold_ok and r.k_constant
    assert r.martingale_gap <= 1e-10
    assert r.ratio <= C_EPSILON


def test_ef_supermartingale_examples():
    case = oracle_family(2, 7)[1]
    sol = solve_reflected_lower(case.tree, case.driver, case.xi, case.barrier)
    assert sum(a.sum() for a in sol.dK_right + sol.dK_interval) > 0
    assert ef_supermartingale_check(sol, trials=50, seed=1) == 0
    free = solve_reflected_lower(case.tree, case.driver, case.xi, Barrier(
        case.tree,
        tuple(a - 1e3 for a in case.barrier.left[:-1]) + (case.xi,),
        tuple(a - 1e3 for a in case.barrier.value[:-1]) + (case.xi,),
        tuple(a - 1e3 for a in case.barrier.right[:-1]) + (case.xi,),
    ))
    assert free.k_moments()[0] == 0.0
    rng = np.random.default_rng(0)
    eta = random_absorbing_rule(case.tree, rng)
    ef = solve_bsde(case.tree, case.driver, list(free.Y), stop_at=eta)
    for k in range(case.tree.steps + 1):
        np.testing.assert_allclose(ef.Y[k], free.Y[k], atol=1e-12)
    assert ef_supermartingale_check(free, trials=20, seed=2) == 0


def test_value_is_monotone_in_barrier():
    case = oracle_family(1, 8)[0]
    s1 = solve_reflected_lower(case.tree, case.driver, case.xi, case.barrier)
    higher = case.barrier.shifted(0.3)
    s2 = solve_reflected_lower(case.tree, case.driver, higher.terminal, higher)
    assert compare_reflected(s1, s2, DriverPair(case.driver, case.driver, True)).violations == 0


def test_oracle_can_differ_when_the_step_is_not_order_preserving():
    tree = build_tree(build_grid(1.0, 2), 1.0)
    drv = linear_driver(0.9, -0.36, 0.9, -0.19)
    assert not monotone_step(drv, tree)
    gaps = []
    for seed in range(40):
        bar = random_barrier(tree, np.random.default_rng(seed))
        sol = solve_reflected_lower(tree, drv, bar.terminal, bar)
        bf = brute_force_stopping_value(tree, drv, bar, bar.terminal)
        gaps.append(abs(sol.y0 - bf.values[0][0]))
    assert max(gaps) > 1e-6


def test_no_warning_for_rusc_barrier():
    case = oracle_family(1, 6)[0]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        nonlinear_stopping_value(case.tree, case.driver, case.barrier, case.xi)
