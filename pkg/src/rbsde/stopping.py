"""Optimal stopping on the tree: Snell envelope, brute-force oracle, epsilon-optimal times."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .bsde import check_contraction, descendants, implicit_step, precedes, solve_bsde, split
from .driver import Driver
from .paths import Barrier, is_rusc
from .reflected import ReflectedSolution, solve_reflected_lower
from .tree import ScenarioTree

BRUTE_FORCE_MAX_STEPS = 6
BRUTE_FORCE_MAX_BITS = 22

# Frozen for the epsilon-optimality gap: calibration max 1.003 times 2, rounded up
# (tests/calibration.py).  Valid for r.u.s.c. barriers.
C_EPSILON = 2.1


@dataclass(frozen=True, slots=True, eq=False)
class StoppingRule:
    """Per-node stop decisions; the stopping time is the first node hit.  Leaves always stop."""

    tree: ScenarioTree
    stop: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        N = self.tree.steps
        if len(self.stop) != N + 1:
            raise ValueError("stopping rule needs one mask per layer")
        masks = []
        for k, m in enumerate(self.stop):
            m = np.asarray(m, dtype=bool).copy()
            if m.shape != (self.tree.size(k),):
                raise ValueError(f"mask for layer {k} has the wrong size")
            masks.append(m)
        masks[N][:] = True
        object.__setattr__(self, "stop", tuple(masks))

    @classmethod
    def from_masks(cls, tree: ScenarioTree, masks: Sequence[np.ndarray]) -> StoppingRule:
        return cls(tree, tuple(masks))

    @classmethod
    def immediate(cls, tree: ScenarioTree) -> StoppingRule:
        return cls(tree, tuple(np.ones(tree.size(k), bool) for k in range(tree.steps + 1)))

    @classmethod
    def terminal(cls, tree: ScenarioTree) -> StoppingRule:
        return cls(tree, tuple(np.zeros(tree.size(k), bool) for k in range(tree.steps + 1)))

    @classmethod
    def at_layer(cls, tree: ScenarioTree, layer: int) -> StoppingRule:
        return cls(
            tree, tuple(np.full(tree.size(k), k >= layer) for k in range(tree.steps + 1))
        )

    def is_absorbing(self) -> bool:
        """Closed under descendants, so 'after the stop' is a property of the node."""
        for k in range(self.tree.steps):
            br = self.tree.branchings[k]
            m = self.stop[k]
            nxt = self.stop[k + 1]
            if not (np.all(nxt[br.up[m]]) and np.all(nxt[br.down[m]])):
                return False
            if not np.all(nxt[br.default[m & br.has_default]]):
                return False
        return True

    def closure(self) -> StoppingRule:
        """Smallest absorbing rule containing this one."""
        masks = [m.copy() for m in self.stop]
        for k in range(self.tree.steps + 1):
            if np.any(masks[k]):
                for j, sub in enumerate(descendants(self.tree, k, masks[k])):
                    masks[k + j] |= sub
        return StoppingRule(self.tree, tuple(masks))

    def union(self, other: StoppingRule) -> StoppingRule:
        return StoppingRule(self.tree, tuple(a | b for a, b in zip(self.stop, other.stop)))

    def intersection(self, other: StoppingRule) -> StoppingRule:
        return StoppingRule(self.tree, tuple(a & b for a, b in zip(self.stop, other.stop)))


def random_absorbing_rule(tree: ScenarioTree, rng: np.random.Generator, density: float = 0.3) -> StoppingRule:
    masks = [rng.random(tree.size(k)) < density for k in range(tree.steps + 1)]
    return StoppingRule(tree, tuple(masks)).closure()


@dataclass(frozen=True, slots=True, eq=False)
class GainProcess:
    """Gain at stop = accrued running reward + stop reward.

    ``running[k]`` is the driver value F_k paid over step k; ``value`` and ``right`` are the
    stop rewards at t_k and just after t_k.  The terminal layer of ``value`` holds xi.
    """

    running: tuple[np.ndarray, ...]
    value: tuple[np.ndarray, ...]
    right: tuple[np.ndarray, ...] | None = None


def gain_from_solution(sol: ReflectedSolution) -> GainProcess:
    if sol.side != "lower":
        raise ValueError("gain process is defined for lower-barrier solutions")
    b = sol.barrier
    value = list(b.value[:-1]) + [sol.Y[-1]]
    right = list(b.right[:-1]) + [sol.Y[-1]]
    return GainProcess(sol.F, tuple(value), tuple(right))


@dataclass(frozen=True, slots=True, eq=False)
class SnellResult:
    S: tuple[np.ndarray, ...]
    S_right: tuple[np.ndarray, ...]
    rule: StoppingRule
    supermartingale_defect: float

    @property
    def s0(self) -> float:
        return float(self.S[0][0])


def snell_envelope_linear(tree: ScenarioTree, gain: GainProcess) -> SnellResult:
    """Backward S+ = max(G+, F dt + E S_{k+1}), S = max(G, S+).

    Node values exclude the reward accrued before t_k, which is zero at the root.
    """
    N = tree.steps
    S = [None] * (N + 1)
    Sr = [None] * (N + 1)
    S[N] = np.asarray(gain.value[N], dtype=float)
    Sr[N] = S[N]
    defect = 0.0
    for k in range(N - 1, -1, -1):
        cont = tree.conditional_expectation(k, S[k + 1]) + gain.running[k] * tree.grid.dt[k]
        sr = cont if gain.right is None else np.maximum(cont, gain.right[k])
        s = np.maximum(gain.value[k], sr)
        S[k], Sr[k] = s, sr
        defect = max(defect, float(np.max(cont - s)))
    rule = StoppingRule(tree, tuple(S[k] == np.asarray(gain.value[k]) for k in range(N + 1)))
    return SnellResult(tuple(S), tuple(Sr), rule, defect)


def _payoff(barrier: Barrier, xi: np.ndarray) -> list[np.ndarray]:
    return list(barrier.value[:-1]) + [np.asarray(xi, dtype=float)]


def _check_sigma(sigma: StoppingRule | None, tree: ScenarioTree) -> StoppingRule:
    if sigma is None:
        return StoppingRule.immediate(tree)
    if not sigma.is_absorbing():
        raise ValueError("sigma must be absorbing (closed under descendants)")
    return sigma


@dataclass(frozen=True, slots=True, eq=False)
class BruteForceResult:
    values: tuple[np.ndarray, ...]
    rules_enumerated: int

    def at(self, sigma: StoppingRule) -> list[np.ndarray]:
        return [np.where(sigma.stop[k], v, np.nan) for k, v in enumerate(self.values)]


def brute_force_stopping_value(
    tree: ScenarioTree,
    driver: Driver,
    barrier: Barrier,
    xi: np.ndarray,
    chunk: int = 1 << 15,
) -> BruteForceResult:
    """Max over every stopping rule of the E^f value of the stop reward, at every node.

    Rules are subsets of non-leaf nodes; leaves always stop.  The value at a node only
    depends on the rule's restriction to the node's subtree, so the node-wise maximum over
    all rules is the optimal value from that node.
    """
    N = tree.steps
    if N > BRUTE_FORCE_MAX_STEPS:
        raise ValueError(f"brute force refused for N = {N} > {BRUTE_FORCE_MAX_STEPS}")
    check_contraction(tree, driver)
    sizes = [tree.size(k) for k in range(N)]
    bits = sum(sizes)
    if bits > BRUTE_FORCE_MAX_BITS:
        raise ValueError(f"brute force refused: 2^{bits} stopping rules")
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    payoff = _payoff(barrier, xi)
    total = 1 << bits
    best = [np.full(tree.size(k), -np.inf) for k in range(N + 1)]
    best[N] = np.asarray(xi, dtype=float).copy()
    for lo in range(0, total, chunk):
        codes = np.arange(lo, min(total, lo + chunk), dtype=np.int64)
        Y = np.broadcast_to(payoff[N], (codes.size, tree.size(N)))
        for k in range(N - 1, -1, -1):
            shifts = np.arange(offsets[k], offsets[k + 1], dtype=np.int64)
            mask = ((codes[:, None] >> shifts[None, :]) & 1).astype(bool)
            mean, z, u = split(tree, k, Y)
            c, _ = implicit_step(driver, tree, k, mean, z, u)
            Y = np.where(mask, payoff[k], c)
            best[k] = np.maximum(best[k], Y.max(axis=0))
    return BruteForceResult(tuple(best), total)


@dataclass(frozen=True, slots=True, eq=False)
class StoppingValue:
    values: tuple[np.ndarray, ...]
    solution: ReflectedSolution
    rusc: bool
    oracle_gap: float | None


def nonlinear_stopping_value(
    tree: ScenarioTree,
    driver: Driver,
    barrier: Barrier,
    xi: np.ndarray,
    sigma: StoppingRule | None = None,
    check_oracle: bool = False,
) -> StoppingValue:
    """Reflected Y on sigma nodes; optionally the max gap to the brute-force oracle there."""
    xi = np.asarray(xi, dtype=float)
    if np.any(np.abs(xi - barrier.terminal) > 1e-12):
        raise ValueError("optimal stopping needs xi equal to the barrier at T")
    sigma = _check_sigma(sigma, tree)
    rusc = is_rusc(barrier)
    if not rusc:
        warnings.warn("barrier is not r.u.s.c.; value and oracle may differ", stacklevel=2)
    sol = solve_reflected_lower(tree, driver, xi, barrier)
    vals = tuple(np.where(sigma.stop[k], sol.Y[k], np.nan) for k in range(tree.steps + 1))
    gap = None
    if check_oracle:
        bf = brute_force_stopping_value(tree, driver, barrier, xi)
        gap = max(
            float(np.max(np.abs(sol.Y[k] - bf.values[k])[sigma.stop[k]]))
            if np.any(sigma.stop[k]) else 0.0
            for k in range(tree.steps + 1)
        )
    return StoppingValue(vals, sol, rusc, gap)


@dataclass(frozen=True, slots=True, eq=False)
class EpsilonResult:
    rule: StoppingRule
    threshold_ok: bool
    k_constant: bool
    martingale_gap: float
    value_gap: float
    eps: float

    @property
    def ratio(self) -> float:
        return self.value_gap / self.eps


def epsilon_optimal_time(
    sol: ReflectedSolution,
    sigma: StoppingRule | None,
    eps: float,
) -> EpsilonResult:
    """First node at or after sigma with Y <= L + eps, with both lemma checks.

    ``martingale_gap`` is max |Y_sigma - E^f_{sigma,eta}(Y_eta)|; ``value_gap`` is
    max (Y_sigma - E^f_{sigma,eta}(L_eta)) over sigma nodes.
    """
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    if sol.side != "lower":
        raise ValueError("epsilon-optimal times are defined for lower barriers")
    tree = sol.tree
    N = tree.steps
    sigma = _check_sigma(sigma, tree)
    b = sol.barrier
    near = [sol.Y[k] <= b.value[k] + eps for k in range(N + 1)]
    eta = StoppingRule(tree, tuple(sigma.stop[k] & near[k] for k in range(N + 1)))
    if not precedes(tree, sigma, eta):
        raise ValueError("internal: eta precedes sigma")
    threshold_ok = all(
        bool(np.all(sol.Y[k][eta.stop[k]] <= b.value[k][eta.stop[k]] + eps)) for k in range(N + 1)
    )
    between = [sigma.stop[k] & ~eta.stop[k] for k in range(N)]
    k_constant = all(
        bool(np.all(sol.dK_right[k][m] == 0.0) and np.all(sol.dK_interval[k][m] == 0.0))
        for k, m in enumerate(between)
    )
    mart = solve_bsde(tree, sol.driver, list(sol.Y), stop_at=eta)
    val = solve_bsde(tree, sol.driver, _payoff(b, sol.Y[-1]), stop_at=eta)
    mg = vg = 0.0
    for k in range(N + 1):
        s = sigma.stop[k]
        if np.any(s):
            mg = max(mg, float(np.max(np.abs(sol.Y[k][s] - mart.Y[k][s]))))
            vg = max(vg, float(np.max(sol.Y[k][s] - val.Y[k][s])))
    return EpsilonResult(eta, threshold_ok, k_constant, mg, vg, eps)


def ef_supermartingale_check(
    sol: ReflectedSolution, trials: int = 50, seed: int = 0, tol: float = 1e-10
) -> int:
    """Count nodes where E^f_{sigma,eta}(Y_eta) > Y_sigma + tol over random sigma <= eta."""
    rng = np.random.default_rng(seed)
    tree = sol.tree
    N = tree.steps
    bad = 0
    for _ in range(trials):
        q = rng.uniform(0.05, 0.6)
        eta = StoppingRule(tree, tuple(rng.random(tree.size(k)) < q for k in range(N + 1)))
        extra = StoppingRule(tree, tuple(rng.random(tree.size(k)) < q for k in range(N + 1)))
        sigma = eta.union(extra)
        ef = solve_bsde(tree, sol.driver, list(sol.Y), stop_at=eta)
        for k in range(N + 1):
            s = sigma.stop[k]
            bad += int(np.sum(ef.Y[k][s] > sol.Y[k][s] + tol))
    return bad
