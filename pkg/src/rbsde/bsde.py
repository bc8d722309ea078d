"""Backward solver for BSDEs with a default jump on the scenario tree.

Every step solves ``y = E[Y_{k+1}] + f(t_k, y, z, u) dt`` per node, with ``(z, u)`` read off
the exact branch representation of ``Y_{k+1}``.  Leading array axes are batch axes, so
many terminal conditions or stopping rules can be solved in one pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .driver import Driver
from .tree import Curve, ScenarioTree, expected_path_max, represent

PICARD_TOL = 1e-12
PICARD_MAX = 50

# Frozen for apriori_gap_bound at beta = 3: calibration max 1.21 times 2, rounded up
# (tests/calibration.py).
C_BETA = 2.5


class SolverRefusal(ValueError):
    """Raised when the grid is too coarse for the implicit step to contract."""

    def __init__(self, message: str, required_steps: int | None = None) -> None:
        super().__init__(message)
        self.required_steps = required_steps


def check_contraction(tree: ScenarioTree, driver: Driver) -> None:
    dt = tree.grid.dt
    mu = driver.mu.on_steps(tree.grid)
    q = mu * dt
    if np.any(q >= 1.0):
        need = int(math.floor(float(np.max(mu)) * tree.grid.horizon)) + 1
        raise SolverRefusal(
            f"mu*dt = {float(np.max(q)):.3g} >= 1: implicit step does not contract; use N >= {need}",
            need,
        )


def implicit_step(
    driver: Driver,
    tree: ScenarioTree,
    k: int,
    mean: np.ndarray,
    z: np.ndarray,
    u: np.ndarray,
    resolvent: Callable[[np.ndarray], np.ndarray] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Fixed point y = R(mean + f(y) dt).  Returns (y, F) with y = R(mean + F dt) exactly."""
    st = tree.states[k]
    dt = float(tree.grid.dt[k])
    y = mean if resolvent is None else resolvent(mean)
    for _ in range(PICARD_MAX):
        F = driver(st.t, st, y, z, u)
        x = mean + F * dt
        y_new = x if resolvent is None else resolvent(x)
        if np.all(np.abs(y_new - y) <= PICARD_TOL * (1.0 + np.abs(y))):
            return y_new, F
        y = y_new
    raise SolverRefusal(f"Picard iteration did not converge at layer {k}")


def split(tree: ScenarioTree, k: int, values: np.ndarray):
    """(mean, z, u) of next-layer values at every layer-k node."""
    br = tree.branchings[k]
    v = np.asarray(values, dtype=float)
    vu, vd, vD = v[..., br.up], v[..., br.down], v[..., br.default]
    mean = br.p_up * vu + br.p_down * vd + br.p_default * vD
    z = (vu - vd) / (2.0 * br.sqrt_dt)
    u = np.where(br.has_default, vD - 0.5 * (vu + vd), 0.0)
    return mean, z, u


@dataclass(frozen=True, slots=True, eq=False)
class BSDESolution:
    tree: ScenarioTree
    driver: Driver
    Y: tuple[np.ndarray, ...]
    Z: tuple[np.ndarray, ...]
    U: tuple[np.ndarray, ...]
    F: tuple[np.ndarray, ...]
    residuals: tuple[np.ndarray, ...]
    stopped: tuple[np.ndarray, ...] | None = None

    @property
    def y0(self) -> float:
        return float(np.asarray(self.Y[0])[..., 0].ravel()[0])

    @property
    def max_residual(self) -> float:
        return max(float(np.max(r)) if r.size else 0.0 for r in self.residuals)


def _masks(stop_at) -> list[np.ndarray] | None:
    if stop_at is None:
        return None
    return list(getattr(stop_at, "stop", stop_at))


def solve_bsde(
    tree: ScenarioTree,
    driver: Driver,
    terminal: np.ndarray | Sequence[np.ndarray],
    stop_at=None,
) -> BSDESolution:
    """Solve backward from the leaves, or from the first hit of ``stop_at``.

    Without ``stop_at`` the terminal is a leaf array.  With it, ``terminal`` holds one array
    per layer and only the entries on stopping nodes are read; the driver is switched off
    after the stop, so stopped nodes carry Z = U = 0.
    """
    check_contraction(tree, driver)
    N = tree.steps
    masks = _masks(stop_at)
    if masks is None:
        xi = np.asarray(terminal, dtype=float)
        if xi.shape[-1] != tree.size(N):
            raise ValueError("terminal must have one value per leaf")
        payoff = None
    else:
        if len(masks) != N + 1:
            raise ValueError("stopping rule needs one mask per layer")
        payoff = [np.asarray(p, dtype=float) for p in terminal]
        if len(payoff) != N + 1:
            raise ValueError("payoff needs one array per layer")
        xi = payoff[N]
    if not np.all(np.isfinite(xi)):
        raise ValueError("terminal values must be finite")
    Y: list[np.ndarray] = [None] * (N + 1)  # type: ignore[list-item]
    Z: list[np.ndarray] = [None] * N  # type: ignore[list-item]
    U: list[np.ndarray] = [None] * N  # type: ignore[list-item]
    F: list[np.ndarray] = [None] * N  # type: ignore[list-item]
    R: list[np.ndarray] = [None] * N  # type: ignore[list-item]
    Y[N] = xi
    for k in range(N - 1, -1, -1):
        mean, z, u = split(tree, k, Y[k + 1])
        y, f = implicit_step(driver, tree, k, mean, z, u)
        st = tree.states[k]
        res = np.abs(y - (mean + driver(st.t, st, y, z, u) * tree.grid.dt[k]))
        if masks is not None:
            m = masks[k]
            y = np.where(m, payoff[k], y)
            z = np.where(m, 0.0, z)
            u = np.where(m, 0.0, u)
            f = np.where(m, 0.0, f)
            res = np.where(m, 0.0, res)
        Y[k], Z[k], U[k], F[k], R[k] = y, z, u, f, res
    stopped = tuple(masks) if masks is not None else None
    return BSDESolution(tree, driver, tuple(Y), tuple(Z), tuple(U), tuple(F), tuple(R), stopped)


def reachable_before(tree: ScenarioTree, sigma: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Nodes reachable by a path that has not hit ``sigma`` strictly earlier."""
    out = [np.ones(1, dtype=bool)]
    for k in range(tree.steps):
        br = tree.branchings[k]
        live = out[k] & ~np.asarray(sigma[k], dtype=bool)
        nxt = np.zeros(tree.size(k + 1), dtype=bool)
        nxt[br.up[live]] = True
        nxt[br.down[live]] = True
        nxt[br.default[live & br.has_default]] = True
        out.append(nxt)
    return out


def precedes(tree: ScenarioTree, sigma, eta) -> bool:
    """True iff the first hit of ``sigma`` is never after the first hit of ``eta``."""
    s, e = _masks(sigma), _masks(eta)
    reach = reachable_before(tree, s)
    return not any(
        bool(np.any(reach[k] & np.asarray(e[k], bool) & ~np.asarray(s[k], bool)))
        for k in range(tree.steps + 1)
    )


def f_expectation(
    tree: ScenarioTree,
    driver: Driver,
    sigma,
    eta,
    payoff: Sequence[np.ndarray],
) -> list[np.ndarray]:
    """E^f_{sigma, eta}(payoff): BSDE value on sigma nodes (NaN elsewhere)."""
    if not precedes(tree, sigma, eta):
        raise ValueError("sigma must not exceed eta")
    sol = solve_bsde(tree, driver, payoff, stop_at=eta)
    s = _masks(sigma)
    return [np.where(np.asarray(s[k], bool), sol.Y[k], np.nan) for k in range(tree.steps + 1)]


@dataclass(frozen=True, slots=True)
class GapBound:
    lhs: float
    rhs: float
    holds: bool


def apriori_gap_bound(
    tree: ScenarioTree,
    driver1: Driver,
    driver2: Driver,
    xi1: np.ndarray,
    xi2: np.ndarray,
    beta: float,
    constant: float = C_BETA,
) -> GapBound:
    """E sup e^{beta A}|Y1 - Y2|^2 against c (E e^{beta A_T}|dxi|^2 + E int e^{beta A}|df/alpha|^2).

    The driver gap is evaluated along the second solution; A is the first driver's clock.
    """
    if beta <= 2.0:
        raise ValueError("beta must exceed 2")
    s1 = solve_bsde(tree, driver1, xi1)
    s2 = solve_bsde(tree, driver2, xi2)
    A = driver1.clock(tree)
    a2 = driver1.alpha2(tree)
    w = np.exp(beta * A)
    N = tree.steps
    diff = [w[k] * (s1.Y[k] - s2.Y[k]) ** 2 for k in range(N + 1)]
    lhs = expected_path_max(tree, diff)
    term = w[N] * tree.expectation(N, (np.asarray(xi1) - np.asarray(xi2)) ** 2)
    for k in range(N):
        st = tree.states[k]
        args = (st.t, st, s2.Y[k], s2.Z[k], s2.U[k])
        df = driver1(*args) - driver2(*args)
        term += w[k] * tree.expectation(k, df**2) / a2[k] * tree.grid.dt[k]
    rhs = constant * term
    return GapBound(float(lhs), float(rhs), bool(lhs <= rhs + 1e-14))


def _node_curve(value, tree: ScenarioTree, k: int) -> np.ndarray:
    st = tree.states[k]
    if callable(value) and not isinstance(value, Curve):
        return np.broadcast_to(np.asarray(value(st.t, st), float), (st.size,))
    return np.full(st.size, float(Curve.coerce(value)(st.t)))


@dataclass(frozen=True, slots=True, eq=False)
class MeasureChange:
    tree: ScenarioTree
    weights: tuple[tuple[np.ndarray, np.ndarray, np.ndarray], ...]
    discount: np.ndarray
    Lam: tuple[np.ndarray, ...]
    Lam_closed: tuple[np.ndarray, ...] | None
    phi: tuple[np.ndarray, ...]
    psi: tuple[np.ndarray, ...]

    def branch_probabilities(self, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        br = self.tree.branchings[k]
        wu, wd, wD = self.weights[k]
        return br.p_up * wu, br.p_down * wd, br.p_default * wD


def doleans_exponential(tree: ScenarioTree, phi=0.0, psi=0.0, delta=0.0) -> MeasureChange:
    """Discrete Doleans-Dade density with branch factors (1 + delta dt)(1 + a dB + b dM).

    ``a = phi/(1-p)`` and ``b = psi/(1-p)`` on alive nodes make the reweighted means of
    dB and dM equal phi dt and psi gamma dt exactly; the default branch factor is 1 + psi.
    """
    N = tree.steps
    weights, phis, psis = [], [], []
    disc = np.ones(N + 1)
    for k in range(N):
        br = tree.branchings[k]
        st = tree.states[k]
        dt = float(tree.grid.dt[k])
        ph = _node_curve(phi, tree, k)
        ps = np.where(st.alive, _node_curve(psi, tree, k), 0.0)
        de = float(Curve.coerce(delta)(st.t)) if not callable(delta) else float(delta(st.t, st))
        if np.any(ps[st.alive] < -1.0):
            raise ValueError("psi < -1 loses the sign of the density")
        p = np.where(st.alive, st.gamma * dt, 0.0)
        a = ph / (1.0 - p)
        bb = np.where(br.has_default, ps / (1.0 - p), 0.0)
        wu = 1.0 + a * br.sqrt_dt + bb * br.dm_cont
        wd = 1.0 - a * br.sqrt_dt + bb * br.dm_cont
        wD = np.where(br.has_default, 1.0 + ps, 1.0)
        if np.any(wu < 0.0) or np.any(wd < 0.0):
            raise ValueError(f"negative branch factor at layer {k}; refine the grid or shrink phi")
        weights.append((wu, wd, wD))
        phis.append(ph)
        psis.append(ps)
        disc[k + 1] = disc[k] * (1.0 + de * dt)
    Pm = [np.ones(1)]
    Qm = [np.ones(1)]
    for k in range(N):
        br = tree.branchings[k]
        wu, wd, wD = weights[k]
        nq = np.zeros(tree.size(k + 1))
        np.add.at(nq, br.up, br.p_up * wu * Qm[k])
        np.add.at(nq, br.down, br.p_down * wd * Qm[k])
        np.add.at(nq, br.default, br.p_default * wD * Qm[k])
        Qm.append(nq)
        Pm.append(tree.probabilities[k + 1])
    lam = tuple(disc[k] * Qm[k] / Pm[k] for k in range(N + 1))
    closed = _closed_product(tree, phi, psi, delta)
    return MeasureChange(tree, tuple(weights), disc, lam, closed, tuple(phis), tuple(psis))


def _closed_product(tree: ScenarioTree, phi, psi, delta) -> tuple[np.ndarray, ...] | None:
    """Node density from up/down/default counts; needs constant coefficients on a uniform grid."""
    consts = [phi, psi, delta]
    if any(callable(c) and not isinstance(c, Curve) for c in consts):
        return None
    if any(isinstance(c, Curve) and c.values.size > 1 for c in consts) or tree.gamma.values.size > 1:
        return None
    if not tree.grid.is_uniform:
        return None
    ph, ps, de = (float(Curve.coerce(c).values[0]) for c in consts)
    dt = float(tree.grid.dt[0])
    h = math.sqrt(dt)
    p = float(tree.gamma.values[0]) * dt
    wu = 1.0 + ph / (1 - p) * h - ps / (1 - p) * p
    wd = 1.0 - ph / (1 - p) * h - ps / (1 - p) * p
    wD = 1.0 + ps
    vu, vd = 1.0 + ph * h, 1.0 - ph * h
    out = []
    for k, st in enumerate(tree.states):
        disc = (1.0 + de * dt) ** k
        lam = np.empty(st.size)
        for i in range(st.size):
            s = int(st.ups[i])
            if st.alive[i]:
                lam[i] = wu**s * wd ** (k - s)
                continue
            m = int(st.default_step[i])
            pre, post = m - 1, k - m
            tot = 0.0
            for a in range(max(0, s - post), min(pre, s) + 1):
                tot += (
                    math.comb(pre, a) * math.comb(post, s - a)
                    * wu**a * wd ** (pre - a) * vu ** (s - a) * vd ** (post - s + a)
                )
            lam[i] = wD * tot / math.comb(k - 1, s)
        out.append(disc * lam)
    return tuple(out)


@dataclass(frozen=True, slots=True)
class GirsanovResiduals:
    brownian: float
    default: float


def girsanov_check(mc: MeasureChange) -> GirsanovResiduals:
    """Max |E^Q[dB] - phi dt| and |E^Q[dM] - psi gamma dt| over nodes with positive density."""
    tree = mc.tree
    rb = rm = 0.0
    for k in range(tree.steps):
        br = tree.branchings[k]
        st = tree.states[k]
        dt = float(tree.grid.dt[k])
        qu, qd, qD = mc.branch_probabilities(k)
        tot = qu + qd + qD
        qu, qd, qD = qu / tot, qd / tot, qD / tot
        live = mc.Lam[k] > 0.0
        eb = (qu - qd) * br.sqrt_dt - mc.phi[k] * dt
        em = (qu + qd) * br.dm_cont + qD * br.dm_default - mc.psi[k] * st.gamma * dt
        if np.any(live):
            rb = max(rb, float(np.max(np.abs(eb[live]))))
            rm = max(rm, float(np.max(np.abs(em[live]))))
    return GirsanovResiduals(rb, rm)


@dataclass(frozen=True, slots=True)
class ComparisonReport:
    violations: int
    max_excess: float
    strict_failures: int
    equal_nodes: int

    @property
    def ok(self) -> bool:
        return self.violations == 0 and self.strict_failures == 0


def descendants(tree: ScenarioTree, k: int, mask: np.ndarray) -> list[np.ndarray]:
    """Layer masks of the subtrees rooted at ``mask`` nodes of layer k (inclusive)."""
    out = [np.asarray(mask, bool)]
    for j in range(k, tree.steps):
        br = tree.branchings[j]
        cur = out[-1]
        nxt = np.zeros(tree.size(j + 1), dtype=bool)
        nxt[br.up[cur]] = True
        nxt[br.down[cur]] = True
        nxt[br.default[cur & br.has_default]] = True
        out.append(nxt)
    return out


def compare_layers(
    tree: ScenarioTree,
    Y1: Sequence[np.ndarray],
    Y2: Sequence[np.ndarray],
    strict: bool,
    tol: float = 1e-10,
) -> ComparisonReport:
    viol = 0
    excess = 0.0
    for a, b in zip(Y1, Y2):
        d = np.asarray(a) - np.asarray(b)
        viol += int(np.sum(d > tol))
        excess = max(excess, float(np.max(d)))
    fails = 0
    eq_nodes = 0
    if strict:
        for k in range(tree.steps + 1):
            eq = np.abs(np.asarray(Y1[k]) - np.asarray(Y2[k])) <= tol
            eq_nodes += int(np.sum(eq))
            if not np.any(eq):
                continue
            sub = descendants(tree, k, eq)
            for j, m in enumerate(sub):
                d = np.abs(np.asarray(Y1[k + j]) - np.asarray(Y2[k + j]))
                fails += int(np.sum(m & (d > tol)))
    return ComparisonReport(viol, excess, fails, eq_nodes)


def compare_bsde(
    sol1: BSDESolution, sol2: BSDESolution, certificate, strict: bool = False
) -> ComparisonReport:
    """Node-wise Y1 <= Y2; with ``strict``, equality at a node must persist on its subtree."""
    if not certificate or (hasattr(certificate, "dominance_certified") and not certificate.dominance_certified):
        raise ValueError("comparison needs a dominance certificate")
    if sol1.tree is not sol2.tree:
        raise ValueError("solutions live on different trees")
    return compare_layers(sol1.tree, sol1.Y, sol2.Y, strict)


def martingale_representation(tree: ScenarioTree, xi: np.ndarray) -> tuple[float, float]:
    """(max branch residual, min |determinant|) of the exact per-node representation of xi."""
    v = np.asarray(xi, dtype=float)
    worst = 0.0
    det = np.inf
    for k in range(tree.steps - 1, -1, -1):
        rep = represent(tree, k, v)
        worst = max(worst, float(np.max(rep.residual)))
        det = min(det, float(np.min(np.abs(rep.determinant))))
        v = rep.mean
    return worst, det
