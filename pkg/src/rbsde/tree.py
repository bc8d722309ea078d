"""Time grid and recombining scenario tree for a binomial Brownian motion with a default jump.

Layer ``k`` holds the alive nodes (indexed by their up-move count) followed by one
block per default step ``m <= k``.  A node in block ``m`` defaulted during step
``m - 1`` and keeps that bucket for the rest of the tree.  Alive nodes branch
up/down/default, defaulted nodes branch up/down only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse

GRID_TOL = 1e-12


@dataclass(frozen=True, slots=True, eq=False)
class TimeGrid:
    times: np.ndarray

    def __post_init__(self) -> None:
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("grid needs at least two times")
        if not np.all(np.isfinite(t)):
            raise ValueError("grid times must be finite")
        if t[0] != 0.0:
            raise ValueError("grid must start at 0")
        if np.any(np.diff(t) <= 0.0):
            raise ValueError("grid times must be strictly increasing")
        object.__setattr__(self, "times", t)

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def steps(self) -> int:
        return self.times.size - 1

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def is_uniform(self) -> bool:
        d = self.dt
        return bool(np.allclose(d, d[0], rtol=1e-12, atol=0.0))

    def index(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > GRID_TOL * max(1.0, self.horizon):
            raise ValueError(f"time {t} is not on the grid")
        return k


def build_grid(T: float, N: int, mandatory: Sequence[float] = ()) -> TimeGrid:
    """Uniform grid on [0, T] with ``N`` steps, refined to contain every mandatory time."""
    if not math.isfinite(T) or T <= 0.0:
        raise ValueError("T must be finite and positive")
    if int(N) != N or N < 1:
        raise ValueError("N must be a positive integer")
    tol = GRID_TOL * T
    times = list(np.linspace(0.0, T, int(N) + 1))
    for m in mandatory:
        m = float(m)
        if not math.isfinite(m) or m < -tol or m > T + tol:
            raise ValueError(f"mandatory time {m} outside [0, {T}]")
        if min(abs(m - s) for s in times) > tol:
            times.append(m)
    return TimeGrid(np.array(sorted(times)))


@dataclass(frozen=True, slots=True, eq=False)
class Curve:
    """Piecewise-constant, right-continuous function of time."""

    knots: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        k = np.atleast_1d(np.asarray(self.knots, dtype=float))
        v = np.atleast_1d(np.asarray(self.values, dtype=float))
        if k.shape != v.shape or k.size == 0:
            raise ValueError("knots and values must have the same non-zero length")
        if k[0] != 0.0 or np.any(np.diff(k) <= 0.0):
            raise ValueError("knots must start at 0 and increase")
        if not np.all(np.isfinite(v)):
            raise ValueError("curve values must be finite")
        object.__setattr__(self, "knots", k)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, value: float) -> Curve:
        return cls(np.array([0.0]), np.array([float(value)]))

    @classmethod
    def coerce(cls, value: float | Curve) -> Curve:
        return value if isinstance(value, Curve) else cls.constant(value)

    def __call__(self, t: float | np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self.knots, t, side="right") - 1
        return self.values[np.clip(idx, 0, None)]

    def on_steps(self, grid: TimeGrid) -> np.ndarray:
        """Value used on each step [t_k, t_{k+1})."""
        return np.asarray(self(grid.times[:-1]), dtype=float)


def intensity_curve(gamma: float | Curve) -> Curve:
    c = Curve.coerce(gamma)
    if np.any(c.values < 0.0):
        raise ValueError("intensity must be non-negative")
    return c


@dataclass(frozen=True, slots=True, eq=False)
class NodeState:
    """Per-node state of one layer; every field is an array over the layer's nodes."""

    t: float
    b: np.ndarray
    alive: np.ndarray
    gamma: np.ndarray
    ups: np.ndarray
    default_step: np.ndarray
    default_time: np.ndarray

    @property
    def size(self) -> int:
        return self.b.size

    def take(self, idx: np.ndarray) -> NodeState:
        return NodeState(
            self.t,
            self.b[idx],
            self.alive[idx],
            self.gamma[idx],
            self.ups[idx],
            self.default_step[idx],
            self.default_time[idx],
        )


@dataclass(frozen=True, slots=True, eq=False)
class Branching:
    """Transitions from layer k to layer k+1.  Missing default branches carry probability 0."""

    up: np.ndarray
    down: np.ndarray
    default: np.ndarray
    p_up: np.ndarray
    p_down: np.ndarray
    p_default: np.ndarray
    has_default: np.ndarray
    sqrt_dt: float
    dm_cont: np.ndarray
    dm_default: np.ndarray


@dataclass(frozen=True, slots=True, eq=False)
class ScenarioTree:
    grid: TimeGrid
    gamma: Curve
    states: tuple[NodeState, ...]
    branchings: tuple[Branching, ...]
    probabilities: tuple[np.ndarray, ...]
    _transitions: list = field(default_factory=list, repr=False)

    @property
    def steps(self) -> int:
        return self.grid.steps

    def size(self, k: int) -> int:
        return self.states[k].size

    @property
    def total_nodes(self) -> int:
        return sum(s.size for s in self.states)

    def transition(self, k: int) -> sparse.csr_matrix:
        """Sparse matrix mapping layer-k masses to layer-(k+1) masses."""
        if not self._transitions:
            for k_, br in enumerate(self.branchings):
                n0, n1 = self.size(k_), self.size(k_ + 1)
                cols = np.arange(n0)
                rows = np.concatenate([br.up, br.down, br.default])
                data = np.concatenate([br.p_up, br.p_down, br.p_default])
                mat = sparse.coo_matrix(
                    (data, (rows, np.concatenate([cols, cols, cols]))), shape=(n1, n0)
                ).tocsr()
                self._transitions.append(mat)
        return self._transitions[k]

    def conditional_expectation(self, k: int, values: np.ndarray) -> np.ndarray:
        """Exact E[values_{k+1} | node at layer k]; leading axes are batch axes."""
        return conditional_expectation(self, k, values)

    def expectation(self, k: int, values: np.ndarray) -> float:
        v = np.asarray(values, dtype=float)
        if v.shape[-1] != self.size(k):
            raise ValueError("size mismatch")
        return float(np.dot(self.probabilities[k], v))

    def forward(self, k: int, mass: np.ndarray) -> np.ndarray:
        return self.transition(k) @ mass


def build_tree(grid: TimeGrid, gamma: float | Curve = 0.0) -> ScenarioTree:
    gamma = intensity_curve(gamma)
    dt = grid.dt
    N = grid.steps
    g = gamma.on_steps(grid)
    p = g * dt
    if np.any(p >= 1.0):
        k = int(np.argmax(p >= 1.0))
        raise ValueError(f"intensity too large for step {k}: gamma*dt = {p[k]:.6g} >= 1")
    h = math.sqrt(grid.horizon / N)

    blocks: list[list[int]] = []
    for k in range(N + 1):
        blocks.append([m for m in range(1, k + 1) if p[m - 1] > 0.0])

    states = []
    for k in range(N + 1):
        nb = len(blocks[k])
        ups = np.concatenate([np.arange(k + 1), np.tile(np.arange(k), nb)]).astype(np.int64)
        alive = np.zeros(ups.size, dtype=bool)
        alive[: k + 1] = True
        moves = np.where(alive, k, k - 1)
        dstep = np.concatenate(
            [np.full(k + 1, -1), np.repeat(np.array(blocks[k], dtype=np.int64), k)]
        ).astype(np.int64)
        dtime = np.where(dstep >= 0, grid.times[np.clip(dstep, 0, None)], np.nan)
        gam = np.where(alive, g[k] if k < N else 0.0, 0.0)
        states.append(
            NodeState(
                t=float(grid.times[k]),
                b=(2 * ups - moves) * h,
                alive=alive,
                gamma=gam.astype(float),
                ups=ups,
                default_step=dstep,
                default_time=dtime,
            )
        )

    branchings = []
    for k in range(N):
        n0 = states[k].size
        n1_alive = k + 2
        up = np.empty(n0, dtype=np.int64)
        down = np.empty(n0, dtype=np.int64)
        dflt = np.empty(n0, dtype=np.int64)
        i = np.arange(k + 1)
        up[: k + 1] = i + 1
        down[: k + 1] = i
        has_default = np.zeros(n0, dtype=bool)
        if p[k] > 0.0:
            j_new = len(blocks[k + 1]) - 1
            dflt[: k + 1] = n1_alive + j_new * (k + 1) + i
            has_default[: k + 1] = True
        else:
            dflt[: k + 1] = i
        for j in range(len(blocks[k])):
            s = np.arange(k)
            src = (k + 1) + j * k + s
            base = n1_alive + j * (k + 1)
            up[src] = base + s + 1
            down[src] = base + s
            dflt[src] = base + s
        alive = states[k].alive
        pk = p[k]
        p_cont = np.where(alive, 0.5 * (1.0 - pk), 0.5)
        p_def = np.where(has_default, pk, 0.0)
        branchings.append(
            Branching(
                up=up,
                down=down,
                default=dflt,
                p_up=p_cont,
                p_down=p_cont.copy(),
                p_default=p_def,
                has_default=has_default,
                sqrt_dt=math.sqrt(dt[k]),
                dm_cont=np.where(alive, -pk, 0.0),
                dm_default=np.where(has_default, 1.0 - pk, 0.0),
            )
        )

    probs = [np.ones(1)]
    for k, br in enumerate(branchings):
        nxt = np.zeros(states[k + 1].size)
        np.add.at(nxt, br.up, br.p_up * probs[k])
        np.add.at(nxt, br.down, br.p_down * probs[k])
        np.add.at(nxt, br.default, br.p_default * probs[k])
        probs.append(nxt)

    return ScenarioTree(grid, gamma, tuple(states), tuple(branchings), tuple(probs))


def _children(tree: ScenarioTree, k: int, values: np.ndarray):
    if not 0 <= k < tree.steps:
        raise ValueError(f"layer {k} has no successors")
    v = np.asarray(values, dtype=float)
    if v.shape[-1] != tree.size(k + 1):
        raise ValueError(
            f"size mismatch: layer {k + 1} has {tree.size(k + 1)} nodes, got {v.shape[-1]}"
        )
    br = tree.branchings[k]
    return br, v[..., br.up], v[..., br.down], v[..., br.default]


def conditional_expectation(tree: ScenarioTree, k: int, values: np.ndarray) -> np.ndarray:
    br, vu, vd, vD = _children(tree, k, values)
    return br.p_up * vu + br.p_down * vd + br.p_default * vD


@dataclass(frozen=True, slots=True, eq=False)
class Representation:
    mean: np.ndarray
    z: np.ndarray
    u: np.ndarray
    residual: np.ndarray
    determinant: np.ndarray


def represent(tree: ScenarioTree, k: int, values: np.ndarray) -> Representation:
    """Exact per-node decomposition values_{k+1} = mean + z*dB + u*dM on every branch."""
    br, vu, vd, vD = _children(tree, k, values)
    mean = br.p_up * vu + br.p_down * vd + br.p_default * vD
    z = (vu - vd) / (2.0 * br.sqrt_dt)
    u = np.where(br.has_default, vD - 0.5 * (vu + vd), 0.0)
    res_u = vu - (mean + z * br.sqrt_dt + u * br.dm_cont)
    res_d = vd - (mean - z * br.sqrt_dt + u * br.dm_cont)
    res_D = np.where(br.has_default, vD - (mean + u * br.dm_default), 0.0)
    residual = np.maximum(np.maximum(np.abs(res_u), np.abs(res_d)), np.abs(res_D))
    # rows (1, dB, dM) per branch; 2x2 system where the default branch is absent
    det3 = -2.0 * br.sqrt_dt * (br.dm_default - br.dm_cont)
    det2 = np.full_like(det3, -2.0 * br.sqrt_dt)
    det = np.where(br.has_default, det3, det2)
    return Representation(mean, z, u, residual, det)


def default_probability(tree: ScenarioTree, t: float) -> float:
    k = tree.grid.index(t)
    st = tree.states[k]
    return float(np.sum(tree.probabilities[k][~st.alive]))


def weight_process(alpha2: np.ndarray | float, grid: TimeGrid, eps: float = 0.0) -> np.ndarray:
    """Clock A with A_0 = 0 and A_{k+1} = A_k + alpha2_k dt_k."""
    a2 = np.broadcast_to(np.asarray(alpha2, dtype=float), (grid.steps,))
    if np.any(a2 < 0.0):
        raise ValueError("alpha^2 must be non-negative")
    if np.any(a2 <= 0.0) or np.any(a2 < eps):
        raise ValueError("alpha^2 must be bounded below by a positive epsilon")
    return np.concatenate([[0.0], np.cumsum(a2 * grid.dt)])


def expected_path_max(
    tree: ScenarioTree, values: Sequence[np.ndarray], max_work: float = 5e8
) -> float:
    """E[max_k X_k] along paths, exact, via a forward pass per distinct threshold."""
    vals = [np.asarray(v, dtype=float) for v in values]
    if len(vals) != tree.steps + 1:
        raise ValueError("need one value array per layer")
    levels = np.unique(np.concatenate(vals))
    if levels.size == 1:
        return float(levels[0])
    thresholds = levels[1:]
    work = float(tree.total_nodes) * thresholds.size
    if work > max_work:
        raise ValueError(f"path maximum too expensive ({work:.3g} > {max_work:.3g})")
    prob_ge = np.empty(thresholds.size)
    chunk = max(1, int(2e6 // max(s.size for s in tree.states)))
    for lo in range(0, thresholds.size, chunk):
        c = thresholds[lo : lo + chunk]
        below = (vals[0][:, None] < c[None, :]).astype(float)
        for k in range(tree.steps):
            below = tree.transition(k) @ below
            below *= vals[k + 1][:, None] < c[None, :]
        prob_ge[lo : lo + chunk] = 1.0 - below.sum(axis=0)
    return float(levels[0] + np.sum(np.diff(levels) * prob_ge))


def path_sum_moments(tree: ScenarioTree, increments: Sequence[np.ndarray]) -> tuple[float, float]:
    """(E S, E S^2) for S = sum_k d_k(node at layer k), exact forward recursion."""
    if len(increments) != tree.steps:
        raise ValueError("need one increment array per step")
    m0 = np.ones(1)
    m1 = np.zeros(1)
    m2 = np.zeros(1)
    for k in range(tree.steps):
        d = np.asarray(increments[k], dtype=float)
        a1 = m1 + d * m0
        a2 = m2 + 2.0 * d * m1 + d * d * m0
        T = tree.transition(k)
        m0, m1, m2 = T @ m0, T @ a1, T @ a2
    return float(m1.sum()), float(m2.sum())


@dataclass(frozen=True, slots=True)
class Norms:
    s2: float
    s2_alpha: float
    h2: float
    m2: float


def weighted_norms(
    tree: ScenarioTree,
    process: Sequence[np.ndarray],
    beta: float,
    A: np.ndarray,
    with_sup: bool = True,
) -> Norms:
    """Squared weighted norms of a node process.

    ``s2`` is E[max_k e^{beta A_k} |X_k|^2]; the integral norms use the left point of
    each step.  ``m2`` weights alive nodes by gamma only.
    """
    if beta < 0.0:
        raise ValueError("beta must be non-negative")
    A = np.asarray(A, dtype=float)
    N = tree.steps
    if A.shape != (N + 1,):
        raise ValueError("A must have one entry per grid time")
    proc = [np.broadcast_to(np.asarray(p, dtype=float), (tree.size(k),)) for k, p in
            enumerate(process)]
    if len(proc) not in (N, N + 1):
        raise ValueError("process must cover layers 0..N-1 or 0..N")
    w = np.exp(beta * A)
    dt = tree.grid.dt
    a2 = np.diff(A) / dt
    s2a = h2 = m2 = 0.0
    for k in range(N):
        x2 = proc[k] ** 2
        e = tree.expectation(k, x2)
        s2a += w[k] * a2[k] * e * dt[k]
        h2 += w[k] * e * dt[k]
        m2 += w[k] * tree.expectation(k, x2 * tree.states[k].gamma) * dt[k]
    s2 = float("nan")
    if with_sup:
        full = proc if len(proc) == N + 1 else proc + [np.zeros(tree.size(N))]
        s2 = expected_path_max(tree, [w[k] * full[k] ** 2 for k in range(N + 1)])
    return Norms(s2, float(s2a), float(h2), float(m2))


def sample_paths(tree: ScenarioTree, count: int, rng: np.random.Generator) -> np.ndarray:
    """Node indices per layer for ``count`` sampled paths, shape (count, N+1)."""
    out = np.zeros((count, tree.steps + 1), dtype=np.int64)
    for k, br in enumerate(tree.branchings):
        cur = out[:, k]
        r = rng.random(count)
        pu, pd = br.p_up[cur], br.p_down[cur]
        out[:, k + 1] = np.where(
            r < pu, br.up[cur], np.where(r < pu + pd, br.down[cur], br.default[cur])
        )
    return out
