"""Generators f(t, y, z, u) with declared stochastic-Lipschitz curves and the shipped examples."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .tree import Curve, NodeState, ScenarioTree, weight_process

DriverFn = Callable[[float, NodeState, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
Source = Callable[[float, NodeState], np.ndarray]

DEFAULT_EPS = 1e-6


@dataclass(frozen=True, slots=True, eq=False)
class Driver:
    name: str
    fn: DriverFn
    mu: Curve
    theta: Curve
    nu: Curve
    lambda_floor: float = -1.0
    eps_floor: float = DEFAULT_EPS
    monotone_in_u: bool = True
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in ("mu", "theta", "nu"):
            c = Curve.coerce(getattr(self, name))
            if np.any(c.values < 0.0):
                raise ValueError(f"{name} must be non-negative")
            object.__setattr__(self, name, c)
        if self.lambda_floor < -1.0:
            raise ValueError("lambda_floor must be >= -1")
        if self.eps_floor <= 0.0:
            raise ValueError("eps_floor must be positive")

    def __call__(self, t: float, state: NodeState, y, z, u) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        out = self.fn(t, state, y, np.asarray(z, dtype=float), np.asarray(u, dtype=float))
        return np.broadcast_to(np.asarray(out, dtype=float), np.broadcast(y, z, u).shape)

    def alpha2(self, tree: ScenarioTree) -> np.ndarray:
        """mu + theta^2 + nu^2 gamma on each step (pre-default gamma)."""
        grid = tree.grid
        g = tree.gamma.on_steps(grid)
        return self.mu.on_steps(grid) + self.theta.on_steps(grid) ** 2 + self.nu.on_steps(grid) ** 2 * g

    def clock(self, tree: ScenarioTree) -> np.ndarray:
        return weight_process(self.alpha2(tree), tree.grid, self.eps_floor)

    def check_alpha(self, tree: ScenarioTree) -> None:
        a2 = self.alpha2(tree)
        if np.any(a2 < self.eps_floor):
            k = int(np.argmax(a2 < self.eps_floor))
            raise ValueError(f"alpha^2 = {a2[k]:.3g} below eps_floor at step {k}")

    def dual(self) -> Driver:
        """The generator -f(t, -y, -z, -u) used to turn an upper barrier into a lower one."""
        fn = self.fn

        def flipped(t, st, y, z, u):
            return -fn(t, st, -y, -z, -u)

        return Driver(
            f"dual({self.name})",
            flipped,
            self.mu,
            self.theta,
            self.nu,
            self.lambda_floor,
            self.eps_floor,
            self.monotone_in_u,
            dict(self.params),
        )

    def plus(self, source: float | Source, name: str | None = None) -> Driver:
        """f + g for a source term g(t, state) free of (y, z, u)."""
        fn = self.fn
        g = _source(source)

        def shifted(t, st, y, z, u):
            return fn(t, st, y, z, u) + g(t, st)

        return Driver(
            name or f"{self.name}+g",
            shifted,
            self.mu,
            self.theta,
            self.nu,
            self.lambda_floor,
            self.eps_floor,
            self.monotone_in_u,
            dict(self.params),
        )


@dataclass(frozen=True, slots=True, eq=False)
class DriverPair:
    first: Driver
    second: Driver
    dominance_certified: bool = False


def _source(g: float | Source) -> Source:
    if callable(g):
        return g
    c = float(g)
    return lambda t, st: np.full(st.size, c)


def zero_driver(eps_floor: float = DEFAULT_EPS) -> Driver:
    return Driver(
        "zero",
        lambda t, st, y, z, u: np.zeros(np.broadcast(y, z, u).shape),
        Curve.constant(eps_floor),
        Curve.constant(0.0),
        Curve.constant(0.0),
        eps_floor=eps_floor,
        params={},
    )


def linear_driver(
    a: float = 0.0,
    b: float = 0.0,
    c: float = 0.0,
    g: float | Source = 0.0,
    eps_floor: float = DEFAULT_EPS,
) -> Driver:
    """f = a y + b z + c gamma u + g(t, node)."""
    src = _source(g)

    def fn(t, st, y, z, u):
        return a * y + b * z + c * st.gamma * u + src(t, st)

    return Driver(
        "linear",
        fn,
        Curve.constant(max(abs(a), eps_floor)),
        Curve.constant(abs(b)),
        Curve.constant(abs(c)),
        lambda_floor=max(-1.0, min(c, 0.0)),
        eps_floor=eps_floor,
        monotone_in_u=-1.0 <= c <= 1.0,
        params={"a": a, "b": b, "c": c, "g": g if not callable(g) else "callable"},
    )


def robust_driver(a: float = 0.0, b: float = 0.0, c: float = 0.0, eps_floor: float = DEFAULT_EPS) -> Driver:
    """f = -a y + b |z| + c gamma u^+, a concave-convex example with lambda in [0, c]."""
    if c < 0.0:
        raise ValueError("c must be non-negative")

    def fn(t, st, y, z, u):
        return -a * y + b * np.abs(z) + c * st.gamma * np.maximum(u, 0.0)

    return Driver(
        "robust",
        fn,
        Curve.constant(max(abs(a), eps_floor)),
        Curve.constant(abs(b)),
        Curve.constant(c),
        lambda_floor=0.0,
        eps_floor=eps_floor,
        monotone_in_u=c <= 1.0,
        params={"a": a, "b": b, "c": c},
    )


def market_driver(
    r: float | Curve, mu1: float | Curve, sigma1: float | Curve, eps_floor: float = DEFAULT_EPS
) -> Driver:
    """Replication driver -r y - ((mu1 - r)/sigma1) z of the default-free market part."""
    r, mu1, sigma1 = Curve.coerce(r), Curve.coerce(mu1), Curve.coerce(sigma1)
    knots = np.unique(np.concatenate([r.knots, mu1.knots, sigma1.knots]))
    sig = sigma1(knots)
    if np.any(sig == 0.0):
        raise ValueError("sigma1 must be non-zero")
    rv = r(knots)
    risk = (mu1(knots) - rv) / sig
    r_c = Curve(knots, rv)
    risk_c = Curve(knots, risk)

    def fn(t, st, y, z, u):
        return -r_c(t) * y - risk_c(t) * z

    return Driver(
        "market",
        fn,
        Curve(knots, np.maximum(np.abs(rv), eps_floor)),
        Curve(knots, np.abs(risk)),
        Curve.constant(0.0),
        lambda_floor=0.0,
        eps_floor=eps_floor,
        params={"r": r, "mu1": mu1, "sigma1": sigma1},
    )


@dataclass(frozen=True, slots=True)
class LipschitzReport:
    max_violation: float
    witness: dict[str, float] | None


def check_lipschitz(
    driver: Driver, tree: ScenarioTree, samples: int = 10_000, seed: int = 0, scale: float = 10.0
) -> LipschitzReport:
    """Largest |f(a) - f(b)| - (mu|dy| + theta|dz| + nu gamma|du|) over random argument pairs.

    A rounding slack of 1e-12 relative is subtracted so exact equality reports <= 0.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    N = tree.steps
    layers = rng.integers(0, N, size=samples)
    worst = -np.inf
    witness = None
    for k in np.unique(layers):
        m = int(np.sum(layers == k))
        st_full = tree.states[k]
        idx = rng.integers(0, st_full.size, size=m)
        st = st_full.take(idx)
        y1, y2, z1, z2, u1, u2 = (rng.normal(0.0, scale, m) for _ in range(6))
        t = st.t
        f1 = driver(t, st, y1, z1, u1)
        f2 = driver(t, st, y2, z2, u2)
        bound = (
            driver.mu(t) * np.abs(y1 - y2)
            + driver.theta(t) * np.abs(z1 - z2)
            + driver.nu(t) * st.gamma * np.abs(u1 - u2)
        )
        slack = 1e-12 * (1.0 + np.abs(f1) + np.abs(f2) + bound)
        v = np.abs(f1 - f2) - bound - slack
        i = int(np.argmax(v))
        if v[i] > worst:
            worst = float(v[i])
            witness = {
                "t": float(t), "node": int(idx[i]),
                "y1": float(y1[i]), "y2": float(y2[i]),
                "z1": float(z1[i]), "z2": float(z2[i]),
                "u1": float(u1[i]), "u2": float(u2[i]),
            }
    return LipschitzReport(worst, witness if worst > 0.0 else None)


def estimate_lambda(
    driver: Driver,
    tree: ScenarioTree,
    k: int,
    node: int,
    y: float,
    z: float,
    u1: float,
    u2: float,
) -> float:
    """Finite-difference (f(u1) - f(u2)) / ((u1 - u2) gamma) at one node."""
    if u1 == u2:
        raise ValueError("u1 and u2 must differ")
    st = tree.states[k].take(np.array([node]))
    g = float(st.gamma[0])
    if g <= 0.0:
        raise ValueError("lambda is undefined where gamma = 0")
    f1 = driver(st.t, st, np.array([y]), np.array([z]), np.array([u1]))[0]
    f2 = driver(st.t, st, np.array([y]), np.array([z]), np.array([u2]))[0]
    return float((f1 - f2) / ((u1 - u2) * g))


def source_integrability(driver: Driver, tree: ScenarioTree, beta: float) -> float:
    """E sum e^{beta A} |f(t,0,0,0)/alpha|^2 dt; finite on any finite tree."""
    A = driver.clock(tree)
    a2 = driver.alpha2(tree)
    total = 0.0
    for k in range(tree.steps):
        st = tree.states[k]
        zeros = np.zeros(st.size)
        f0 = driver(st.t, st, zeros, zeros, zeros)
        total += np.exp(beta * A[k]) * tree.expectation(k, f0**2) / a2[k] * tree.grid.dt[k]
    return float(total)


def monotone_step(driver: Driver, tree: ScenarioTree) -> bool:
    """Sufficient condition for the one-step map to be order preserving.

    Needs mu dt < 1, lambda >= -1 and theta sqrt(dt) + gamma dt (1 + nu) <= 1 on every step.
    """
    grid = tree.grid
    dt = grid.dt
    g = tree.gamma.on_steps(grid)
    mu, th, nu = driver.mu.on_steps(grid), driver.theta.on_steps(grid), driver.nu.on_steps(grid)
    return bool(
        driver.monotone_in_u
        and np.all(mu * dt < 1.0)
        and np.all(th * np.sqrt(dt) + g * dt * (1.0 + nu) <= 1.0)
    )
