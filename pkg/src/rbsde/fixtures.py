"""Bundled experiment configurations."""

from __future__ import annotations

import copy
import math
from typing import Any

_FIXTURES: dict[str, dict[str, Any]] = {
    "plain-bsde": {
        "name": "plain-bsde",
        "grid": {"T": 1.0, "N": 50},
        "intensity": 0.1,
        "driver": {"name": "zero"},
        "terminal": {"kind": "affine", "slope_b": 1.0},
        "run": {"kind": "solve", "expect": {"y0": 0.0, "tolerance": 1e-12}},
        "beta": 3.0,
    },
    "default-digital": {
        "name": "default-digital",
        "grid": {"T": 1.0, "N": 100},
        "intensity": 0.1,
        "driver": {"name": "zero"},
        "terminal": {"kind": "default_digital", "value": 1.0},
        "run": {"kind": "solve", "expect": {"y0": 1.0 - math.exp(-0.1), "tolerance": 1e-3}},
        "beta": 3.0,
    },
    "american-put": {
        "name": "american-put",
        "grid": {"T": 1.0, "N": 200},
        "intensity": 0.0,
        "driver": {"name": "market", "params": {"r": 0.05, "mu1": 0.05, "sigma1": 0.2}},
        "barrier": {
            "side": "lower", "shape": "put", "strike": 100.0, "s0": 100.0, "sigma": 0.2, "rate": 0.05,
        },
        "terminal": {"kind": "barrier"},
        "run": {"kind": "snell"},
    },
    "rusc-barrier": {
        "name": "rusc-barrier",
        "grid": {"T": 1.0, "N": 5},
        "intensity": 0.0,
        "driver": {"name": "robust", "params": {"a": 0.5, "b": 0.3, "c": 0.5}},
        "barrier": {
            "side": "lower", "shape": "affine", "level": 0.0, "slope_t": 0.1, "slope_b": 0.5,
            "jumps": [{"t": 0.4, "right": -0.3}],
        },
        "terminal": {"kind": "barrier"},
        "run": {"kind": "stopping", "eps_list": [0.5, 0.1, 0.01], "trials": 30},
        "beta": 3.0,
    },
    "right-jump-barrier": {
        "name": "right-jump-barrier",
        "grid": {"T": 1.0, "N": 100},
        "intensity": 0.2,
        "driver": {"name": "linear", "params": {"a": -0.1, "b": 0.2, "c": 0.3, "g": 1.6}},
        "barrier": {
            "side": "upper", "shape": "affine", "level": 2.0, "slope_t": -1.4, "slope_b": 0.3,
            "jumps": [{"t": 0.2, "right": -1.0}, {"t": 0.5, "right": 0.8}],
        },
        "terminal": {"kind": "affine", "level": 0.3, "slope_b": 0.3},
        "run": {"kind": "penalize", "n_list": [1, 2, 4, 8, 16, 32, 64]},
        "beta": 3.0,
    },
    "comparison-pair": {
        "name": "comparison-pair",
        "grid": {"T": 1.0, "N": 40},
        "intensity": 0.3,
        "driver": {"name": "linear", "params": {"a": -0.2, "b": 0.4, "c": 0.5, "g": 0.05}},
        "barrier": {"side": "lower", "shape": "affine", "level": -0.1, "slope_b": 0.3,
                    "default_shift": -0.2},
        "terminal": {"kind": "barrier"},
        "run": {"kind": "compare", "shift": {"terminal": 0.2, "source": 0.1, "barrier": 0.05}},
    },
    "market-pricing": {
        "name": "market-pricing",
        "grid": {"T": 1.0, "N": 200},
        "intensity": 0.0,
        "driver": {"name": "market", "params": {"r": 0.05, "mu1": 0.08, "sigma1": 0.2}},
        "terminal": {"kind": "constant", "value": 1.0},
        "run": {"kind": "solve", "expect": {"y0": math.exp(-0.05), "tolerance": 1e-3}},
        "beta": 3.0,
    },
}


def list_fixtures() -> list[str]:
    return list(_FIXTURES)


def load_fixture(name: str) -> dict[str, Any]:
    """A fresh copy of the named configuration."""
    try:
        return copy.deepcopy(_FIXTURES[name])
    except KeyError:
        raise ValueError(f"unknown fixture {name!r}; known: {', '.join(_FIXTURES)}") from None
