"""Regulated (left and right limited) paths and barriers, with discrete calculus checks.

A regulated path stores a triple ``(left, value, right)`` at every grid time.  Between
two grid times the path moves in three segments: the right jump at ``t_k``, the
interval move up to the left limit at ``t_{k+1}``, then the left jump at ``t_{k+1}``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tree import ScenarioTree, TimeGrid

Triple = tuple[float, float, float]


@dataclass(frozen=True, slots=True, eq=False)
class RegulatedPath:
    grid: TimeGrid
    left: np.ndarray
    value: np.ndarray
    right: np.ndarray

    def __post_init__(self) -> None:
        n = self.grid.times.size
        arrs = []
        for name in ("left", "value", "right"):
            a = np.asarray(getattr(self, name), dtype=float)
            if a.shape != (n,):
                raise ValueError(f"{name} must have one entry per grid time")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} must be finite")
            arrs.append(a.copy())
        left, value, right = arrs
        if left[0] != value[0]:
            raise ValueError("left limit at t_0 must equal the value")
        if right[-1] != value[-1]:
            raise ValueError("right limit at T must equal the value")
        for name, a in zip(("left", "value", "right"), arrs):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @classmethod
    def continuous(cls, grid: TimeGrid, values: Sequence[float]) -> RegulatedPath:
        v = np.asarray(values, dtype=float)
        return cls(grid, v, v, v)

    @classmethod
    def from_triples(cls, grid: TimeGrid, triples: Sequence[Triple]) -> RegulatedPath:
        a = np.asarray(triples, dtype=float)
        if a.ndim != 2 or a.shape[1] != 3:
            raise ValueError("triples must be (left, value, right) rows")
        return cls(grid, a[:, 0], a[:, 1], a[:, 2])

    @property
    def right_jumps(self) -> np.ndarray:
        return self.right - self.value

    @property
    def left_jumps(self) -> np.ndarray:
        return self.value - self.left

    def __neg__(self) -> RegulatedPath:
        return RegulatedPath(self.grid, -self.left, -self.value, -self.right)


def limits_at(path: RegulatedPath, t: float) -> Triple:
    k = path.grid.index(t)
    return float(path.left[k]), float(path.value[k]), float(path.right[k])


def right_jump_times(path: RegulatedPath, threshold: float) -> list[float]:
    if threshold <= 0.0:
        raise ValueError("threshold must be positive")
    mask = path.right_jumps > threshold
    return [float(t) for t in path.grid.times[mask]]


@dataclass(frozen=True, slots=True)
class RhoArray:
    level: int
    times: tuple[float, ...]


def build_rho_arrays(path: RegulatedPath | Barrier, n_max: int) -> list[RhoArray]:
    """Level-n list {0} U {t : right jump > 1/n} U {T} for n = 1..n_max."""
    if n_max < 1:
        raise ValueError("n_max must be at least 1")
    times = path.grid.times if isinstance(path, RegulatedPath) else path.tree.grid.times
    jumps = (
        path.right_jumps
        if isinstance(path, RegulatedPath)
        else np.array([float(np.max(path.right[k] - path.value[k])) for k in range(times.size)])
    )
    out = []
    for n in range(1, n_max + 1):
        sel = set(times[jumps > 1.0 / n].tolist()) | {0.0, float(times[-1])}
        out.append(RhoArray(n, tuple(sorted(sel))))
    return out


def rho_nesting_holds(arrays: Sequence[RhoArray]) -> bool:
    return all(set(a.times) <= set(b.times) for a, b in zip(arrays, arrays[1:]))


@dataclass(frozen=True, slots=True, eq=False)
class FVDecomposition:
    continuous: np.ndarray
    left_jump: np.ndarray
    right_jump: np.ndarray

    @property
    def right_continuous(self) -> np.ndarray:
        return self.continuous + self.left_jump

    def reconstruct(self) -> np.ndarray:
        return self.right_continuous + self.right_jump


def decompose_fv(K: RegulatedPath, tol: float = 1e-12) -> FVDecomposition:
    """Split a non-decreasing regulated path into continuous, left-jump and right-jump parts.

    Values are reported at grid times; each part starts at 0.
    """
    if abs(K.value[0]) > tol:
        raise ValueError("K must start at 0")
    dl = K.value - K.left
    dr = K.right - K.value
    interval = K.left[1:] - K.right[:-1]
    if np.any(dl < -tol) or np.any(dr < -tol) or np.any(interval < -tol):
        raise ValueError("K is not non-decreasing")
    kd = np.cumsum(dl)
    kg = np.concatenate([[0.0], np.cumsum(dr[:-1])])
    kc = np.concatenate([[0.0], np.cumsum(interval)])
    return FVDecomposition(kc, kd, kg)


def is_rusc(path: RegulatedPath | Barrier) -> bool:
    if isinstance(path, RegulatedPath):
        return bool(np.all(path.value >= path.right))
    return all(bool(np.all(v >= r)) for v, r in zip(path.value, path.right))


def _segments(path: RegulatedPath) -> list[tuple[float, float, str, int]]:
    """(start, end, kind, k) for each path segment in time order."""
    segs = []
    n = path.grid.steps
    for k in range(n):
        segs.append((path.value[k], path.right[k], "right", k))
        segs.append((path.right[k], path.left[k + 1], "interval", k))
        segs.append((path.left[k + 1], path.value[k + 1], "left", k))
    return segs


def _check_same_grid(a: RegulatedPath, b: RegulatedPath) -> None:
    if a.grid.times.shape != b.grid.times.shape or np.any(a.grid.times != b.grid.times):
        raise ValueError("paths live on different grids")


def integration_by_parts_check(x1: RegulatedPath, x2: RegulatedPath) -> float:
    """Max over grid times of |X1 X2 - (X1_0 X2_0 + stochastic, bracket and right-jump terms)|."""
    _check_same_grid(x1, x2)
    s1, s2 = _segments(x1), _segments(x2)
    acc = x1.value[0] * x2.value[0]
    worst = 0.0
    for (a0, a1, kind, k), (b0, b1, _, _) in zip(s1, s2):
        da, db = a1 - a0, b1 - b0
        # integrands at the segment start, plus the bracket (or product of right jumps)
        acc += a0 * db + b0 * da + da * db
        if kind == "left":
            worst = max(worst, abs(x1.value[k + 1] * x2.value[k + 1] - acc))
    return float(worst)


def ito_check(y: RegulatedPath, A: np.ndarray, beta: float) -> float:
    """Residual of the weighted-square expansion of exp(beta A) Y^2 along one path."""
    A = np.asarray(A, dtype=float)
    if A.shape != y.grid.times.shape:
        raise ValueError("A must have one entry per grid time")
    w = np.exp(beta * A)
    acc = w[0] * y.value[0] ** 2
    worst = 0.0
    for y0, y1, kind, k in _segments(y):
        d = y1 - y0
        if kind == "interval":
            acc += (w[k + 1] - w[k]) * y1**2  # beta int e^{beta A} Y^2 dA
            acc += w[k] * (2.0 * y0 * d + d * d)
        elif kind == "left":
            acc += w[k + 1] * (2.0 * y0 * d + d * d)
            worst = max(worst, abs(w[k + 1] * y.value[k + 1] ** 2 - acc))
        else:
            acc += w[k] * (2.0 * y0 * d + d * d)
    return float(worst)


@dataclass(frozen=True, slots=True, eq=False)
class TanakaReport:
    local_time: RegulatedPath
    increments: np.ndarray
    monotone: bool
    jump_residual: float


def tanaka_check(
    y: RegulatedPath,
    phi: Callable[[float], float],
    dphi: Callable[[float], float],
    tol: float = 1e-12,
) -> TanakaReport:
    """Rebuild the convexity remainder of phi(Y) and test that it never decreases.

    ``dphi`` is the left derivative.  A negative increment flags a non-convex phi.
    """
    segs = _segments(y)
    n = y.grid.times.size
    left = np.zeros(n)
    value = np.zeros(n)
    right = np.zeros(n)
    incs = np.zeros(len(segs))
    acc = 0.0
    for i, (a, b, kind, k) in enumerate(segs):
        incs[i] = phi(b) - phi(a) - dphi(a) * (b - a)
        acc += incs[i]
        if kind == "right":
            right[k] = acc
        elif kind == "interval":
            left[k + 1] = acc
        else:
            value[k + 1] = acc
    right[-1] = value[-1]
    lt = RegulatedPath(y.grid, left, value, right)
    expected = np.array(
        [phi(r) - phi(v) - dphi(v) * (r - v) for v, r in zip(y.value, y.right)]
    )
    jump_res = float(np.max(np.abs(lt.right_jumps - expected)))
    monotone = bool(np.all(incs >= -tol))
    return TanakaReport(lt, incs, monotone, jump_res)


@dataclass(frozen=True, slots=True, eq=False)
class Barrier:
    """Node-dependent regulated barrier: per layer arrays of left limit, value and right limit."""

    tree: ScenarioTree
    left: tuple[np.ndarray, ...]
    value: tuple[np.ndarray, ...]
    right: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        N = self.tree.steps
        if not (len(self.left) == len(self.value) == len(self.right) == N + 1):
            raise ValueError("barrier needs one array per layer")
        for k in range(N + 1):
            n = self.tree.size(k)
            for a in (self.left[k], self.value[k], self.right[k]):
                if a.shape != (n,) or not np.all(np.isfinite(a)):
                    raise ValueError(f"barrier layer {k} must hold {n} finite values")
        if np.any(self.left[0] != self.value[0]):
            raise ValueError("left limit at t_0 must equal the value")
        if np.any(self.right[N] != self.value[N]):
            raise ValueError("right limit at T must equal the value")

    @classmethod
    def from_path(cls, tree: ScenarioTree, path: RegulatedPath) -> Barrier:
        if path.grid.times.shape != tree.grid.times.shape or np.any(
            path.grid.times != tree.grid.times
        ):
            raise ValueError("path grid differs from tree grid")
        l, v, r = [], [], []
        for k in range(tree.steps + 1):
            n = tree.size(k)
            l.append(np.full(n, path.left[k]))
            v.append(np.full(n, path.value[k]))
            r.append(np.full(n, path.right[k]))
        return cls(tree, tuple(l), tuple(v), tuple(r))

    @classmethod
    def from_function(cls, tree: ScenarioTree, fn: Callable) -> Barrier:
        """``fn(t, state)`` returns node values or a (left, value, right) tuple of node arrays."""
        l, v, r = [], [], []
        N = tree.steps
        for k, st in enumerate(tree.states):
            out = fn(st.t, st)
            if isinstance(out, tuple):
                a, b, c = (np.broadcast_to(np.asarray(x, float), (st.size,)).copy() for x in out)
            else:
                b = np.broadcast_to(np.asarray(out, float), (st.size,)).copy()
                a, c = b.copy(), b.copy()
            if k == 0:
                a = b.copy()
            if k == N:
                c = b.copy()
            l.append(a)
            v.append(b)
            r.append(c)
        return cls(tree, tuple(l), tuple(v), tuple(r))

    @classmethod
    def constant(cls, tree: ScenarioTree, level: float) -> Barrier:
        return cls.from_function(tree, lambda t, st: np.full(st.size, float(level)))

    def __neg__(self) -> Barrier:
        return Barrier(
            self.tree,
            tuple(-a for a in self.left),
            tuple(-a for a in self.value),
            tuple(-a for a in self.right),
        )

    def shifted(self, c: float) -> Barrier:
        return Barrier(
            self.tree,
            tuple(a + c for a in self.left),
            tuple(a + c for a in self.value),
            tuple(a + c for a in self.right),
        )

    @property
    def terminal(self) -> np.ndarray:
        return self.value[-1]

    def right_jump(self, k: int) -> np.ndarray:
        return self.right[k] - self.value[k]

    def rho_activation(self, n: int) -> list[np.ndarray]:
        """Per-layer node mask of right jumps above 1/n, with time 0 always active."""
        masks = [self.right_jump(k) > 1.0 / n for k in range(self.tree.steps + 1)]
        masks[0] = np.ones_like(masks[0])
        return masks

    def along(self, nodes: Sequence[int]) -> RegulatedPath:
        """The barrier seen along one path of node indices."""
        idx = list(nodes)
        return RegulatedPath(
            self.tree.grid,
            np.array([self.left[k][i] for k, i in enumerate(idx)]),
            np.array([self.value[k][i] for k, i in enumerate(idx)]),
            np.array([self.right[k][i] for k, i in enumerate(idx)]),
        )
