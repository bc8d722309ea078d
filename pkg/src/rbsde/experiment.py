"""Experiment configurations: JSON schema validation and construction of solver inputs."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from typing import Any

import jsonschema
import numpy as np

from .driver import Driver, linear_driver, market_driver, robust_driver, zero_driver
from .paths import Barrier
from .tree import Curve, ScenarioTree, build_grid, build_tree


class ConfigError(ValueError):
    """Schema violation or an unresolvable configuration."""


def load_schema() -> dict[str, Any]:
    text = resources.files("rbsde").joinpath("data/config.schema.json").read_text("utf-8")
    return json.loads(text)


def validate_config(config: dict[str, Any]) -> None:
    try:
        jsonschema.validate(config, load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None


@dataclass(frozen=True, slots=True, eq=False)
class Problem:
    """Everything a run needs: tree, driver, terminal leaf values and optional barrier."""

    config: dict[str, Any]
    tree: ScenarioTree
    driver: Driver
    xi: np.ndarray
    barrier: Barrier | None
    side: str

    @property
    def run(self) -> dict[str, Any]:
        return self.config["run"]


def _intensity(spec: Any) -> float | Curve:
    if spec is None:
        return 0.0
    if isinstance(spec, dict):
        return Curve(np.asarray(spec["knots"], float), np.asarray(spec["values"], float))
    return float(spec)


def make_driver(spec: dict[str, Any]) -> Driver:
    p = dict(spec.get("params", {}))
    name = spec["name"]
    try:
        if name == "zero":
            return zero_driver(**p)
        if name == "linear":
            return linear_driver(**p)
        if name == "robust":
            return robust_driver(**p)
        return market_driver(p.pop("r"), p.pop("mu1"), p.pop("sigma1"), **p)
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"driver {name!r}: bad parameters ({exc})") from None


def _stock(st, s0: float, sigma: float, rate: float) -> np.ndarray:
    return s0 * np.exp(sigma * st.b + (rate - 0.5 * sigma**2) * st.t)


def _affine(spec: dict[str, Any], t: float, st) -> np.ndarray:
    base = (
        spec.get("level", 0.0)
        + spec.get("slope_t", 0.0) * t
        + spec.get("slope_b", 0.0) * st.b
        + spec.get("default_shift", 0.0) * (~st.alive)
    )
    return np.asarray(base, float)


def make_barrier(spec: dict[str, Any], tree: ScenarioTree) -> Barrier | None:
    side = spec.get("side", "none")
    if side == "none":
        return None
    shape = spec.get("shape")
    if shape is None:
        raise ConfigError("barrier/shape is required when side is lower or upper")
    grid = tree.grid
    if shape == "triples":
        triples = spec.get("triples")
        if triples is None or len(triples) != grid.times.size:
            raise ConfigError("barrier/triples needs one [left, value, right] per grid time")
        arr = np.asarray(triples, float)
        return Barrier.from_function(
            tree, lambda t, st: tuple(arr[grid.index(t)])
        )
    jumps = spec.get("jumps", [])
    for j in jumps:
        try:
            grid.index(j["t"])
        except ValueError:
            raise ConfigError(f"barrier jump time {j['t']} is not a grid time") from None

    def fn(t, st):
        if shape == "constant":
            v = np.full(st.size, float(spec.get("level", 0.0)))
        elif shape == "affine":
            v = _affine(spec, t, st)
        else:
            s = _stock(st, spec["s0"], spec["sigma"], spec.get("rate", 0.0))
            v = np.maximum(spec["strike"] - s, 0.0)
        left, right = v.copy(), v.copy()
        for j in jumps:
            tj = j["t"]
            dr, dl = j.get("right", 0.0), j.get("left", 0.0)
            if abs(t - tj) <= 1e-12:
                right = right + dr
            elif t > tj:
                v, left, right = v + dr, left + dr, right + dr
            if abs(t - tj) <= 1e-12:
                v, right = v + dl, right + dl
            elif t > tj:
                v, left, right = v + dl, left + dl, right + dl
        return left, v, right

    try:
        return Barrier.from_function(tree, fn)
    except KeyError as exc:
        raise ConfigError(f"barrier shape {shape!r} needs {exc}") from None


def make_terminal(spec: dict[str, Any], tree: ScenarioTree, barrier: Barrier | None) -> np.ndarray:
    st = tree.states[-1]
    kind = spec["kind"]
    try:
        if kind == "constant":
            return np.full(st.size, float(spec["value"]))
        if kind == "affine":
            return _affine(spec, st.t, st)
        if kind == "default_digital":
            return np.where(st.alive, 0.0, float(spec.get("value", 1.0)))
        if kind == "put":
            s = _stock(st, spec["s0"], spec["sigma"], spec.get("rate", 0.0))
            return np.maximum(spec["strike"] - s, 0.0)
    except KeyError as exc:
        raise ConfigError(f"terminal kind {kind!r} needs {exc}") from None
    if barrier is None:
        raise ConfigError("terminal kind 'barrier' needs a barrier")
    return barrier.terminal.copy()


def build_problem(config: dict[str, Any]) -> Problem:
    validate_config(config)
    g = config["grid"]
    bspec = config.get("barrier", {"side": "none"})
    mandatory = list(g.get("mandatory", [])) + [j["t"] for j in bspec.get("jumps", [])]
    try:
        grid = build_grid(g["T"], g["N"], mandatory)
        tree = build_tree(grid, _intensity(config.get("intensity")))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    barrier = make_barrier(bspec, tree)
    xi = make_terminal(config["terminal"], tree, barrier)
    return Problem(config, tree, make_driver(config["driver"]), xi, barrier, bspec["side"])
