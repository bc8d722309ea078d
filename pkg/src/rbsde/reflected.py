"""Reflected BSDEs with regulated barriers: direct projection solver and penalization.

Per backward step the lower solver projects twice.  The continuation value ``c`` is first
lifted to the barrier's right limit, which is the constraint on ``(t_k, t_{k+1}]``; that
lift is a left jump of K booked at ``t_{k+1}``.  Then the value at ``t_k`` is lifted to
the barrier value, a right jump of K at ``t_k``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .bsde import (
    BSDESolution,
    ComparisonReport,
    check_contraction,
    compare_layers,
    implicit_step,
    split,
)
from .driver import Driver
from .paths import Barrier, RegulatedPath
from .tree import ScenarioTree, expected_path_max, path_sum_moments, weighted_norms

TOL = 1e-12

# Frozen for the uniform estimate at beta = 3: calibration max 1.16 times 2, rounded up
# (tests/calibration.py).
C_UNIFORM = 2.4


@dataclass(frozen=True, slots=True, eq=False)
class ReflectedSolution:
    tree: ScenarioTree
    driver: Driver
    barrier: Barrier
    side: str
    Y: tuple[np.ndarray, ...]
    Y_right: tuple[np.ndarray, ...]
    Z: tuple[np.ndarray, ...]
    U: tuple[np.ndarray, ...]
    F: tuple[np.ndarray, ...]
    cont: tuple[np.ndarray, ...]
    dK_interval: tuple[np.ndarray, ...]
    dK_right: tuple[np.ndarray, ...]
    residuals: tuple[np.ndarray, ...] = field(default=())

    @property
    def y0(self) -> float:
        return float(self.Y[0][0])

    @property
    def xi(self) -> np.ndarray:
        return self.Y[-1]

    def k_moments(self) -> tuple[float, float]:
        """(E K_T, E K_T^2)."""
        incs = [self.dK_interval[k] + self.dK_right[k] for k in range(self.tree.steps)]
        return path_sum_moments(self.tree, incs)

    def right_jump_moments(self) -> tuple[float, float]:
        """(E sum d+Y, E (sum d+Y)^2)."""
        sign = -1.0 if self.side == "lower" else 1.0
        return path_sum_moments(self.tree, [sign * d for d in self.dK_right[:-1]])

    def as_bsde(self) -> BSDESolution:
        return BSDESolution(
            self.tree, self.driver, self.Y, self.Z, self.U, self.F, self.residuals or tuple(
                np.zeros(self.tree.size(k)) for k in range(self.tree.steps)
            )
        )

    def Y_along(self, nodes: Sequence[int]) -> RegulatedPath:
        idx = list(nodes)
        N = self.tree.steps
        value = np.array([self.Y[k][i] for k, i in enumerate(idx)])
        right = np.array([self.Y_right[k][i] for k, i in enumerate(idx)])
        left = np.concatenate([[value[0]], right[:-1]])
        return RegulatedPath(self.tree.grid, left, value, np.concatenate([right[:N], [value[N]]]))

    def K_along(self, nodes: Sequence[int]) -> RegulatedPath:
        """K triples along a path: interval accrual is a left jump at the next grid time."""
        idx = list(nodes)
        N = self.tree.steps
        left = np.zeros(N + 1)
        value = np.zeros(N + 1)
        right = np.zeros(N + 1)
        acc = 0.0
        for k, i in enumerate(idx):
            if k > 0:
                left[k] = acc
                acc += self.dK_interval[k - 1][idx[k - 1]]
            value[k] = acc
            if k < N:
                acc += self.dK_right[k][i]
            right[k] = acc
        return RegulatedPath(self.tree.grid, left, value, right)


def _check_terminal(xi: np.ndarray, barrier: Barrier, side: str) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    if xi.shape != barrier.terminal.shape:
        raise ValueError("terminal must have one value per leaf")
    if side == "lower" and np.any(xi < barrier.terminal - TOL):
        raise ValueError("terminal value below the lower barrier at T")
    if side == "upper" and np.any(xi > barrier.terminal + TOL):
        raise ValueError("terminal value above the upper barrier at T")
    return xi


def _as_barrier(tree: ScenarioTree, barrier: Barrier | RegulatedPath) -> Barrier:
    return barrier if isinstance(barrier, Barrier) else Barrier.from_path(tree, barrier)


def solve_reflected_lower(
    tree: ScenarioTree, driver: Driver, xi: np.ndarray, barrier: Barrier | RegulatedPath
) -> ReflectedSolution:
    barrier = _as_barrier(tree, barrier)
    xi = _check_terminal(xi, barrier, "lower")
    check_contraction(tree, driver)
    N = tree.steps
    Y = [None] * (N + 1)
    Yr = [None] * (N + 1)
    Z, U, F, C, dKi, res = ([None] * N for _ in range(6))
    dKr = [None] * (N + 1)
    Y[N] = xi
    Yr[N] = xi
    dKr[N] = np.zeros_like(xi)
    for k in range(N - 1, -1, -1):
        mean, z, u = split(tree, k, Y[k + 1])
        c, f = implicit_step(driver, tree, k, mean, z, u)
        st = tree.states[k]
        res[k] = np.abs(c - (mean + driver(st.t, st, c, z, u) * tree.grid.dt[k]))
        yp = np.maximum(c, barrier.right[k])
        y = np.maximum(barrier.value[k], yp)
        Y[k], Yr[k], Z[k], U[k], F[k], C[k] = y, yp, z, u, f, c
        dKi[k] = yp - c
        dKr[k] = y - yp
    return ReflectedSolution(
        tree, driver, barrier, "lower", tuple(Y), tuple(Yr), tuple(Z), tuple(U), tuple(F),
        tuple(C), tuple(dKi), tuple(dKr), tuple(res),
    )


def solve_reflected_upper(
    tree: ScenarioTree, driver: Driver, xi: np.ndarray, barrier: Barrier | RegulatedPath
) -> ReflectedSolution:
    """Upper barrier through the lower problem for (-xi, -f(t,-y,-z,-u), -barrier)."""
    barrier = _as_barrier(tree, barrier)
    xi = _check_terminal(xi, barrier, "upper")
    low = solve_reflected_lower(tree, driver.dual(), -xi, -barrier)
    neg = lambda seq: tuple(-a for a in seq)  # noqa: E731
    return ReflectedSolution(
        tree, driver, barrier, "upper", neg(low.Y), neg(low.Y_right), neg(low.Z), neg(low.U),
        neg(low.F), neg(low.cont), low.dK_interval, low.dK_right, low.residuals,
    )


def skorokhod_residual(sol: ReflectedSolution, barrier: Barrier | None = None) -> float:
    """E sum |(Y+ - L+) dK_interval| + |(Y - L) dK_right|, signed to the barrier side."""
    b = barrier or sol.barrier
    sign = 1.0 if sol.side == "lower" else -1.0
    total = 0.0
    for k in range(sol.tree.steps):
        t1 = sign * (sol.Y_right[k] - b.right[k]) * sol.dK_interval[k]
        t2 = sign * (sol.Y[k] - b.value[k]) * sol.dK_right[k]
        total += sol.tree.expectation(k, np.abs(t1) + np.abs(t2))
    return float(total)


def constraint_violation(sol: ReflectedSolution) -> float:
    """Largest breach of the barrier at grid values or on open intervals (0 if none)."""
    sign = 1.0 if sol.side == "lower" else -1.0
    worst = 0.0
    for k in range(sol.tree.steps + 1):
        gap_v = sign * (sol.barrier.value[k] - sol.Y[k])
        gap_r = sign * (sol.barrier.right[k] - sol.Y_right[k])
        worst = max(worst, float(np.max(gap_v)), float(np.max(gap_r)))
    return worst


def jump_matching_residual(sol: ReflectedSolution) -> float:
    """max |d+Y + d+K| (lower) or |d+Y - d+K| (upper) over nodes."""
    sign = 1.0 if sol.side == "lower" else -1.0
    return max(
        float(np.max(np.abs((sol.Y_right[k] - sol.Y[k]) + sign * sol.dK_right[k])))
        for k in range(sol.tree.steps + 1)
    )


def jump_support_violations(sol: ReflectedSolution) -> int:
    """Nodes where d+K > 0 although Y is off the barrier or the barrier has no matching jump."""
    count = 0
    for k in range(sol.tree.steps + 1):
        active = sol.dK_right[k] > 0.0
        on = sol.Y[k] == sol.barrier.value[k]
        jump = sol.barrier.right_jump(k)
        ok = on & ((jump < 0.0) if sol.side == "lower" else (jump > 0.0))
        count += int(np.sum(active & ~ok))
    return count


def upper_jump_formula_residual(sol: ReflectedSolution) -> float:
    """max |d+K - (Y+ - zeta)^+ 1{Y = zeta}| for an upper-barrier solution."""
    if sol.side != "upper":
        raise ValueError("jump formula applies to upper-barrier solutions")
    worst = 0.0
    for k in range(sol.tree.steps + 1):
        z = sol.barrier.value[k]
        pred = np.where(sol.Y[k] == z, np.maximum(sol.Y_right[k] - z, 0.0), 0.0)
        worst = max(worst, float(np.max(np.abs(sol.dK_right[k] - pred))))
    return worst


def with_spurious_increment(sol: ReflectedSolution, k: int, node: int, amount: float) -> ReflectedSolution:
    """Copy of ``sol`` with an extra right jump of K at one node; for adversarial checks."""
    dkr = list(sol.dK_right)
    bump = dkr[k].copy()
    bump[node] += amount
    dkr[k] = bump
    return replace(sol, dK_right=tuple(dkr))


@dataclass(frozen=True, slots=True, eq=False)
class PenalizedSolution:
    level: int
    tree: ScenarioTree
    driver: Driver
    barrier: Barrier
    Y: tuple[np.ndarray, ...]
    Y_right: tuple[np.ndarray, ...]
    Z: tuple[np.ndarray, ...]
    U: tuple[np.ndarray, ...]
    F: tuple[np.ndarray, ...]
    dK_cont: tuple[np.ndarray, ...]
    dK_jump: tuple[np.ndarray, ...]
    rho: tuple[np.ndarray, ...]

    @property
    def y0(self) -> float:
        return float(self.Y[0][0])

    def k_moments(self) -> tuple[float, float]:
        incs = [self.dK_cont[k] + self.dK_jump[k] for k in range(self.tree.steps)]
        return path_sum_moments(self.tree, incs)

    def as_bsde(self) -> BSDESolution:
        zeros = tuple(np.zeros(self.tree.size(k)) for k in range(self.tree.steps))
        return BSDESolution(self.tree, self.driver, self.Y, self.Z, self.U, self.F, zeros)


def solve_penalized(
    tree: ScenarioTree,
    driver: Driver,
    xi: np.ndarray,
    barrier: Barrier | RegulatedPath,
    n: int,
) -> PenalizedSolution:
    """Penalized scheme for an upper barrier at level n.

    On each open interval the step solves y = x - n dt (y - zeta_{k+})^+ exactly; at rho
    times (right jumps above 1/n, and time 0) the value is capped: Y = min(Y+, zeta).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    barrier = _as_barrier(tree, barrier)
    xi = _check_terminal(xi, barrier, "upper")
    check_contraction(tree, driver)
    N = tree.steps
    rho = barrier.rho_activation(n)
    Y = [None] * (N + 1)
    Yr = [None] * (N + 1)
    Z, U, F, dKc = ([None] * N for _ in range(4))
    dKj = [None] * (N + 1)
    Y[N] = xi
    Yr[N] = xi
    dKj[N] = np.zeros_like(xi)
    for k in range(N - 1, -1, -1):
        mean, z, u = split(tree, k, Y[k + 1])
        zr = barrier.right[k]
        s = n * float(tree.grid.dt[k])

        def resolvent(x, zr=zr, s=s):
            return np.where(x <= zr, x, (x + s * zr) / (1.0 + s))

        yp, f = implicit_step(driver, tree, k, mean, z, u, resolvent)
        y = np.where(rho[k], np.minimum(yp, barrier.value[k]), yp)
        Y[k], Yr[k], Z[k], U[k], F[k] = y, yp, z, u, f
        dKc[k] = s * np.maximum(yp - zr, 0.0)
        dKj[k] = yp - y
    return PenalizedSolution(
        n, tree, driver, barrier, tuple(Y), tuple(Yr), tuple(Z), tuple(U), tuple(F),
        tuple(dKc), tuple(dKj), tuple(rho),
    )


@dataclass(frozen=True, slots=True)
class PositivityReport:
    continuous_sum: float
    jump_sum: float

    @property
    def holds(self) -> bool:
        return self.continuous_sum >= -TOL and self.jump_sum >= -TOL


def penalty_positivity_check(sol: PenalizedSolution) -> PositivityReport:
    """E sum (Y - zeta) dK^* and E sum (Y - zeta) d+K for the level-n output."""
    cont = jump = 0.0
    b = sol.barrier
    for k in range(sol.tree.steps):
        cont += sol.tree.expectation(k, (sol.Y_right[k] - b.right[k]) * sol.dK_cont[k])
        jump += sol.tree.expectation(k, (sol.Y[k] - b.value[k]) * sol.dK_jump[k])
    return PositivityReport(float(cont), float(jump))


@dataclass(frozen=True, slots=True)
class LevelRow:
    n: int
    y0: float
    sup_gap: float
    violation: float
    monotone_violations: int
    k_mean: float
    k_second: float
    positivity_cont: float
    positivity_jump: float


@dataclass(frozen=True, slots=True)
class PenalizationReport:
    rows: tuple[LevelRow, ...]
    direct_y0: float

    @property
    def monotone(self) -> bool:
        return all(r.monotone_violations == 0 for r in self.rows)

    @property
    def violation_decreasing(self) -> bool:
        v = [r.violation for r in self.rows]
        return all(b <= a + TOL for a, b in zip(v, v[1:]))

    @property
    def gap_decreasing(self) -> bool:
        g = [r.sup_gap for r in self.rows]
        return all(b <= a + TOL for a, b in zip(g, g[1:]))


def penalization_convergence(
    tree: ScenarioTree,
    driver: Driver,
    xi: np.ndarray,
    barrier: Barrier | RegulatedPath,
    n_list: Sequence[int],
) -> PenalizationReport:
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError("n_list must be increasing")
    barrier = _as_barrier(tree, barrier)
    direct = solve_reflected_upper(tree, driver, xi, barrier)
    rows = []
    prev: PenalizedSolution | None = None
    for n in n_list:
        sol = solve_penalized(tree, driver, xi, barrier, n)
        gap = viol = 0.0
        mono = 0
        for k in range(tree.steps + 1):
            gap = max(gap, float(np.max(np.abs(sol.Y[k] - direct.Y[k]))))
            viol = max(
                viol,
                float(np.max(sol.Y[k] - barrier.value[k])),
                float(np.max(sol.Y_right[k] - barrier.right[k])),
            )
            if prev is not None:
                mono += int(np.sum(sol.Y[k] > prev.Y[k] + TOL))
                mono += int(np.sum(sol.Y_right[k] > prev.Y_right[k] + TOL))
        pos = penalty_positivity_check(sol)
        km, k2 = sol.k_moments()
        rows.append(
            LevelRow(n, sol.y0, gap, max(viol, 0.0), mono, km, k2, pos.continuous_sum, pos.jump_sum)
        )
        prev = sol
    return PenalizationReport(tuple(rows), direct.y0)


@dataclass(frozen=True, slots=True)
class UniformEstimate:
    lhs: float
    data: float
    holds: bool


def uniform_estimate(
    sol: PenalizedSolution, beta: float, constant: float = C_UNIFORM
) -> UniformEstimate:
    """Weighted norms of (Y^n, Z^n, U^n) plus E|K^n_T|^2 against the data norms.

    Data: E e^{beta A_T} xi^2 + E int e^{beta A}|f(t,0,0,0)/alpha|^2 + E sup e^{2 beta A}|zeta^-|^2.
    """
    tree, drv = sol.tree, sol.driver
    A = drv.clock(tree)
    a2 = drv.alpha2(tree)
    w = np.exp(beta * A)
    ny = weighted_norms(tree, sol.Y, beta, A)
    nz = weighted_norms(tree, sol.Z, beta, A, with_sup=False)
    nu = weighted_norms(tree, sol.U, beta, A, with_sup=False)
    lhs = ny.s2 + ny.s2_alpha + nz.h2 + nu.m2 + sol.k_moments()[1]
    N = tree.steps
    data = w[N] * tree.expectation(N, sol.Y[N] ** 2)
    for k in range(N):
        st = tree.states[k]
        zero = np.zeros(st.size)
        f0 = drv(st.t, st, zero, zero, zero)
        data += w[k] * tree.expectation(k, f0**2) / a2[k] * tree.grid.dt[k]
    neg = []
    for k in range(N + 1):
        worst = np.maximum(np.maximum(-sol.barrier.value[k], -sol.barrier.right[k]), 0.0)
        neg.append(w[k] ** 2 * worst**2)
    data += expected_path_max(tree, neg)
    return UniformEstimate(float(lhs), float(data), bool(lhs <= constant * data + 1e-14))


def compare_reflected(
    sol1: ReflectedSolution, sol2: ReflectedSolution, certificate, strict: bool = False
) -> ComparisonReport:
    """Node-wise Y1 <= Y2 given certified dominance of terminal, driver and barrier."""
    if not certificate or (
        hasattr(certificate, "dominance_certified") and not certificate.dominance_certified
    ):
        raise ValueError("comparison needs a dominance certificate")
    if sol1.tree is not sol2.tree:
        raise ValueError("solutions live on different trees")
    return compare_layers(sol1.tree, sol1.Y, sol2.Y, strict)


def barrier_dominates(b1: Barrier, b2: Barrier) -> bool:
    """b1 <= b2 at every node, including right limits."""
    return all(
        bool(np.all(b1.value[k] <= b2.value[k]) and np.all(b1.right[k] <= b2.right[k]))
        for k in range(b1.tree.steps + 1)
    )
