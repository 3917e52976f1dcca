"""TOML scenarios: system, margins, sets, numerics and enabled checks."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from .grid import Window
from .inclusion import Margin, SetValuedField, field_from_dict
from .regions import Box, Disk, HalfSpace, Shape, Union, shape_from_dict

CHECKS = ("candidate", "c2", "c3", "invariance", "separation", "simulate", "consistency")

NUMERIC_DEFAULTS = {
    "dt": None,
    "horizon": None,
    "n_random": 4,
    "band_u1": None,
    "band_u1_hat": None,
    "band_retries": 1,
    "quadrature_radial": 24,
    "quadrature_angular": 24,
    "directions_m": 16,
    "refine": 2,
    "rho_scale": 0.9,
    "c2_starts": 20,
    "c3_tol": 0.1,
    "c3_mode": "rate-one",
    "sim_solutions": 200,
    "sim_horizon": 5.0,
    "sim_dt": None,
    "invariance_samples": 200,
    "invariance_directions": 1024,
}


class ScenarioError(ValueError):
    """Malformed or inconsistent scenario."""


def _margin_from(spec, key) -> Margin:
    try:
        if isinstance(spec, dict):
            w = Window(tuple(spec["lo"]), tuple(spec["hi"]), tuple(np.atleast_1d(spec["cells"])))
            return Margin.from_grid(w, np.asarray(spec["values"], dtype=float))
        return Margin.constant(float(spec))
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"margin {key}: {exc}") from exc


def _shape_bounds_ok(shape: Shape, window: Window) -> bool:
    lo, hi = np.asarray(window.lo), np.asarray(window.hi)
    if isinstance(shape, Disk):
        return bool(np.all((np.asarray(shape.center) >= lo) & (np.asarray(shape.center) <= hi)))
    if isinstance(shape, Box):
        return bool(np.all(np.asarray(shape.lo) >= lo) and np.all(np.asarray(shape.hi) <= hi))
    if isinstance(shape, Union):
        return all(_shape_bounds_ok(p, window) for p in shape.parts)
    return True


@dataclass
class Scenario:
    name: str
    window: Window
    field: SetValuedField
    eps_bar: Margin
    eps1: Margin
    eps2: Margin
    X0: Shape
    Xu: Shape
    eps_bar_o: Margin | None = None
    halfspace: HalfSpace | None = None
    seed: int = 0
    numerics: dict = field(default_factory=lambda: dict(NUMERIC_DEFAULTS))
    checks: tuple = ()
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def margins(self) -> dict:
        out = {"eps_bar": self.eps_bar, "eps1": self.eps1, "eps2": self.eps2}
        if self.eps_bar_o is not None:
            out["eps_bar_o"] = self.eps_bar_o
        return out

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "seed": int(self.seed),
            "checks": list(self.checks),
            "window": {"lo": list(self.window.lo), "hi": list(self.window.hi),
                       "cells": list(self.window.cells)},
            "field": self.field.to_dict(),
            "margins": {k: m.spec for k, m in self.margins.items()},
            "initial": self.X0.to_dict(),
            "unsafe": self.Xu.to_dict(),
            "numerics": {k: v for k, v in self.numerics.items() if v is not None},
        }
        if self.halfspace is not None:
            d["invariance"] = {"normal": list(self.halfspace.normal),
                               "offset": self.halfspace.offset}
        return d

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def with_overrides(self, *, seed: int | None = None, cells: int | None = None) -> "Scenario":
        d = copy.deepcopy(self.to_dict())
        if seed is not None:
            d["seed"] = int(seed)
        if cells is not None:
            d["window"]["cells"] = [int(cells)] * len(self.window.lo)
        return scenario_from_dict(d)


def scenario_from_dict(d: dict) -> Scenario:
    try:
        win = d["window"]
        cells = win["cells"]
        lo = tuple(win["lo"])
        window = Window(lo, tuple(win["hi"]),
                        tuple(np.broadcast_to(np.atleast_1d(cells), (len(lo),)).tolist()))
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"window: {exc}") from exc
    try:
        F = field_from_dict(d["field"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"field: {exc}") from exc
    if F.ndim != window.ndim:
        raise ScenarioError("field dimension does not match the window")
    mdict = d.get("margins", {})
    for key in ("eps_bar", "eps1", "eps2"):
        if key not in mdict:
            raise ScenarioError(f"margins: missing {key}")
    margins = {k: _margin_from(v, k) for k, v in mdict.items()}
    unknown = set(margins) - {"eps_bar", "eps1", "eps2", "eps_bar_o"}
    if unknown:
        raise ScenarioError(f"margins: unknown keys {sorted(unknown)}")
    try:
        X0 = shape_from_dict(d["initial"])
        Xu = shape_from_dict(d["unsafe"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"sets: {exc}") from exc
    numerics = dict(NUMERIC_DEFAULTS)
    extra = set(d.get("numerics", {})) - set(NUMERIC_DEFAULTS)
    if extra:
        raise ScenarioError(f"numerics: unknown keys {sorted(extra)}")
    numerics.update(d.get("numerics", {}))
    if numerics["c3_mode"] not in ("rate-one", "strict-negative"):
        raise ScenarioError("numerics: c3_mode must be 'rate-one' or 'strict-negative'")
    hs = None
    if "invariance" in d:
        try:
            hs = HalfSpace(tuple(d["invariance"]["normal"]), d["invariance"].get("offset", 0.0))
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"invariance: {exc}") from exc
    checks = tuple(d.get("checks", [c for c in CHECKS if c != "invariance" or hs is not None]))
    bad = set(checks) - set(CHECKS)
    if bad:
        raise ScenarioError(f"unknown checks {sorted(bad)}")
    if "invariance" in checks and hs is None:
        raise ScenarioError("the invariance check needs an [invariance] half-space")
    sc = Scenario(
        name=str(d.get("name", "scenario")), window=window, field=F,
        eps_bar=margins["eps_bar"], eps1=margins["eps1"], eps2=margins["eps2"],
        eps_bar_o=margins.get("eps_bar_o"), X0=X0, Xu=Xu, halfspace=hs,
        seed=int(d.get("seed", 0)), numerics=numerics, checks=checks, raw=d,
    )
    validate(sc)
    return sc


def validate(sc: Scenario) -> None:
    """Margin ordering ``0 < eps2 < eps1 < eps_bar (< eps_bar_o)`` and set placement."""
    c = sc.window.centers()
    e2, e1, eb = sc.eps2(c), sc.eps1(c), sc.eps_bar(c)
    if np.any(e2 <= 0):
        raise ScenarioError("margin ordering violated: eps2 must be positive")
    if np.any(e2 >= e1):
        raise ScenarioError("margin ordering violated: eps2 < eps1 required")
    if np.any(e1 >= eb):
        raise ScenarioError("margin ordering violated: eps1 < eps_bar required")
    if sc.eps_bar_o is not None and np.any(eb >= sc.eps_bar_o(c)):
        raise ScenarioError("margin ordering violated: eps_bar < eps_bar_o required")
    for label, shape in (("initial", sc.X0), ("unsafe", sc.Xu)):
        if not _shape_bounds_ok(shape, sc.window):
            raise ScenarioError(f"{label} set lies outside the window")
        if not np.any(shape.sdf(c) <= 0):
            raise ScenarioError(f"{label} set covers no cell of the window")


def parse_scenario(path) -> Scenario:
    """Load and validate a TOML scenario file.

    Raises:
        ScenarioError: with the decoder's line information on syntax errors,
            or a description of the violated invariant.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario: {exc}") from exc
    try:
        d = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ScenarioError(f"{path.name}: {exc}") from exc
    return scenario_from_dict(d)


def bundled_scenario_path(name: str) -> Path:
    """Path of a scenario shipped with the package (``example1``, ``linear``)."""
    ref = resources.files("incluse") / "scenarios" / f"{name}.toml"
    return Path(str(ref))


def load_bundled(name: str) -> Scenario:
    return parse_scenario(bundled_scenario_path(name))
