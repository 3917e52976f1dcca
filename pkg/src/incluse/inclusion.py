"""Set-valued vector fields, perturbation margins and Euler integration of
selections of the perturbed inclusion ``x' ∈ F(x) + eps(x)·B``.

Backward integration runs the reversed inclusion ``x' ∈ -F(x) + eps(x)·B``.
Trajectory times are always the elapsed (nonnegative, increasing) time; the
``direction`` attribute carries the sign.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .grid import OutOfWindowError, Window
from .regions import Shape, shape_from_dict

FORWARD = "forward"
BACKWARD = "backward"
_CHUNK = 256


def _direction_sign(direction: str) -> float:
    if direction == FORWARD:
        return 1.0
    if direction == BACKWARD:
        return -1.0
    raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")


# -----------------------------------------------------------------------------
# Fields and margins
# -----------------------------------------------------------------------------


class SetValuedField:
    """Polytope-valued map ``x -> conv{v_1(x), ..., v_V(x)}``.

    ``vertex_fn`` maps points ``(N, n)`` to vertices ``(N, V, n)``; rows with
    fewer distinct vertices repeat one of them, which leaves the hull intact.
    """

    def __init__(self, vertex_fn, max_vertices: int, ndim: int, *, name: str = "custom",
                 params: dict | None = None, continuity_modulus: float | None = None):
        self._fn = vertex_fn
        self.max_vertices = int(max_vertices)
        self.ndim = int(ndim)
        self.name = name
        self.params = dict(params or {})
        self.continuity_modulus = continuity_modulus

    def vertices(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float).reshape(-1, self.ndim)
        out = np.asarray(self._fn(pts), dtype=float)
        return out.reshape(len(pts), self.max_vertices, self.ndim)

    def eval(self, x) -> np.ndarray:
        """Distinct vertices of ``F(x)`` in first-appearance order."""
        verts = self.vertices(np.asarray(x, dtype=float).reshape(1, -1))[0]
        _, first = np.unique(verts, axis=0, return_index=True)
        return verts[np.sort(first)]

    def speed_bound(self, window: Window) -> float:
        v = self.vertices(window.centers())
        return float(np.linalg.norm(v, axis=-1).max())

    def to_dict(self) -> dict:
        return {"name": self.name, **self.params}

    def __repr__(self):
        return f"SetValuedField({self.name}, V={self.max_vertices})"


def example1_field() -> SetValuedField:
    """``{(0,1)}`` below the axis, ``conv{(0,1), (-1,0)}`` on or above it."""

    def fn(pts):
        out = np.empty((len(pts), 2, 2))
        out[:, 0] = (0.0, 1.0)
        out[:, 1] = (-1.0, 0.0)
        below = pts[:, 1] < 0
        out[below, 1] = (0.0, 1.0)
        return out

    return SetValuedField(fn, 2, 2, name="example1")


def linear_field(A) -> SetValuedField:
    """Single-valued ``F(x) = {A x}``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]

    def fn(pts):
        return (pts @ A.T)[:, None, :]

    return SetValuedField(fn, 1, n, name="linear", params={"A": A.tolist()},
                          continuity_modulus=float(np.linalg.norm(A, 2)))


def constant_field(vertices) -> SetValuedField:
    """``F(x) = conv(vertices)`` everywhere."""
    verts = np.atleast_2d(np.asarray(vertices, dtype=float))

    def fn(pts):
        return np.broadcast_to(verts, (len(pts),) + verts.shape)

    return SetValuedField(fn, len(verts), verts.shape[1], name="constant",
                          params={"vertices": verts.tolist()}, continuity_modulus=0.0)


def table_field(rows, default) -> SetValuedField:
    """Piecewise-constant polytope field.

    Args:
        rows: sequence of ``(shape, vertices)``; the first shape containing a
            point decides its polytope.
        default: vertices used where no shape matches.
    """
    rows = [(s, np.atleast_2d(np.asarray(v, dtype=float))) for s, v in rows]
    default = np.atleast_2d(np.asarray(default, dtype=float))
    n = default.shape[1]
    V = max([default.shape[0]] + [v.shape[0] for _, v in rows])

    def pad(v):
        return np.concatenate([v, np.repeat(v[-1:], V - len(v), axis=0)])

    padded = [(s, pad(v)) for s, v in rows]
    dpad = pad(default)

    def fn(pts):
        out = np.broadcast_to(dpad, (len(pts), V, n)).copy()
        done = np.zeros(len(pts), dtype=bool)
        for shape, v in padded:
            hit = ~done & (shape.sdf(pts) <= 0)
            out[hit] = v
            done |= hit
        return out

    params = {
        "rows": [{"region": s.to_dict(), "vertices": v.tolist()} for s, v in rows],
        "default": default.tolist(),
    }
    return SetValuedField(fn, V, n, name="table", params=params)


def field_from_dict(spec: dict) -> SetValuedField:
    name = spec.get("name")
    if name == "example1":
        return example1_field()
    if name == "linear":
        return linear_field(spec["A"])
    if name == "constant":
        return constant_field(spec["vertices"])
    if name == "table":
        rows = [(shape_from_dict(r["region"]), r["vertices"]) for r in spec["rows"]]
        return table_field(rows, spec["default"])
    raise ValueError(f"unknown field {name!r}")


class Margin:
    """Nonnegative continuous scalar field ``eps(x)``.

    Scenario loading enforces strict positivity and the margin ordering; a
    zero margin is accepted here so unperturbed runs share the same code.
    """

    def __init__(self, fn, *, value: float | None = None, spec=None):
        self._fn = fn
        self.value = value
        self.spec = spec

    @classmethod
    def constant(cls, c: float) -> "Margin":
        c = float(c)
        if c < 0 or not math.isfinite(c):
            raise ValueError("margin must be finite and nonnegative")
        return cls(lambda pts: np.full(len(pts), c), value=c, spec=c)

    @classmethod
    def from_grid(cls, window: Window, values) -> "Margin":
        """Piecewise-bilinear margin through cell-center samples."""
        vals = np.asarray(values, dtype=float).reshape(window.shape)
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise ValueError("margin samples must be finite and nonnegative")
        interp = RegularGridInterpolator(window.axes(), vals, method="linear",
                                         bounds_error=False, fill_value=None)
        lo = np.array([a[0] for a in window.axes()])
        hi = np.array([a[-1] for a in window.axes()])

        def fn(pts):
            return np.maximum(interp(np.clip(pts, lo, hi)), 0.0)

        return cls(fn, spec={"lo": list(window.lo), "hi": list(window.hi),
                             "cells": list(window.cells), "values": vals.tolist()})

    @property
    def is_constant(self) -> bool:
        return self.value is not None

    def __call__(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return np.asarray(self._fn(pts), dtype=float).reshape(len(pts))

    def eval(self, x) -> float:
        return float(self(np.atleast_2d(x))[0])

    def on_window(self, window: Window) -> np.ndarray:
        return self(window.centers()).reshape(window.shape)

    def __repr__(self):
        return f"Margin({self.value if self.is_constant else 'grid'})"


def eval_F(F: SetValuedField, x) -> np.ndarray:
    """Vertices of the polytope ``F(x)``."""
    return F.eval(x)


def ball_directions(n: int, m: int) -> np.ndarray:
    """``m`` unit directions evenly spaced on the circle (``±1`` in 1-D)."""
    if n == 1:
        return np.array([[1.0], [-1.0]])
    ang = 2 * np.pi * np.arange(m) / m
    return np.stack([np.cos(ang), np.sin(ang)], axis=-1)


def minkowski_vertices(F: SetValuedField, eps: Margin, x, m: int) -> np.ndarray:
    """Vertices ``v + eps(x)·d_j`` approximating ``F(x) + eps(x)·B``.

    Raises:
        ValueError: if ``m < 4``.
    """
    if m < 4:
        raise ValueError("at least four ball directions are required")
    x = np.asarray(x, dtype=float).reshape(1, -1)
    verts = F.eval(x[0])
    e = eps.eval(x[0])
    if e == 0:
        return verts
    d = ball_directions(F.ndim, m)
    return (verts[:, None, :] + e * d[None, :, :]).reshape(-1, F.ndim)


def minkowski_vertices_batch(F: SetValuedField, eps: Margin, pts, m: int) -> np.ndarray:
    """Vectorized :func:`minkowski_vertices`, shape ``(N, V·m', n)`` with padding."""
    pts = np.asarray(pts, dtype=float).reshape(-1, F.ndim)
    verts = F.vertices(pts)
    e = eps(pts)
    d = ball_directions(F.ndim, m)
    out = verts[:, :, None, :] + e[:, None, None, None] * d[None, None, :, :]
    return out.reshape(len(pts), -1, F.ndim)


# -----------------------------------------------------------------------------
# Selections and trajectories
# -----------------------------------------------------------------------------

_KINDS = ("vertex", "random", "extremal")
_PERTURB = ("none", "fixed", "random", "guide")


@dataclass(frozen=True)
class SelectionStrategy:
    """Rule picking one velocity from ``F(x) + eps(x)·B`` at every step.

    Attributes:
        kind: ``"vertex"`` (vertex ``index``), ``"random"`` (Dirichlet(1)
            convex weights per step) or ``"extremal"`` (vertex maximizing the
            projection on ``direction``, or on the guide field when
            ``direction`` is None).
        perturb: ``"none"``, ``"fixed"`` (unit ``perturb_direction``),
            ``"random"`` (uniform unit direction per step) or ``"guide"``
            (unit guide direction).
        seed, stream: randomness source for ``random`` rules; ``stream`` is
            an integer or a tuple of integers.
    """

    kind: str = "vertex"
    index: int = 0
    direction: tuple | None = None
    perturb: str = "none"
    perturb_direction: tuple | None = None
    seed: int = 0
    stream: int | tuple = 0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown selection kind {self.kind!r}")
        if self.perturb not in _PERTURB:
            raise ValueError(f"unknown perturbation rule {self.perturb!r}")
        if self.perturb == "fixed":
            if self.perturb_direction is None:
                raise ValueError("fixed perturbation needs a direction")
            d = np.asarray(self.perturb_direction, dtype=float)
            object.__setattr__(self, "perturb_direction", tuple(d / np.linalg.norm(d)))
        if self.direction is not None:
            d = np.asarray(self.direction, dtype=float)
            object.__setattr__(self, "direction", tuple(d / np.linalg.norm(d)))

    @property
    def uses_guide(self) -> bool:
        return (self.kind == "extremal" and self.direction is None) or self.perturb == "guide"

    @property
    def is_random(self) -> bool:
        return self.kind == "random" or self.perturb == "random"


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    direction: str = FORWARD
    dt: float = 0.0
    truncated: bool = False
    strategy: SelectionStrategy | None = None

    def __len__(self):
        return len(self.times)

    @property
    def signed_times(self) -> np.ndarray:
        return self.times * _direction_sign(self.direction)


@dataclass
class SolutionBundle:
    origin: np.ndarray
    trajectories: list = field(default_factory=list)
    horizon: float = 0.0
    dt: float = 0.0
    direction: str = FORWARD

    def __len__(self):
        return len(self.trajectories)

    def endpoints(self) -> np.ndarray:
        return np.array([t.states[-1] for t in self.trajectories])


def step_plan(dt: float, horizon: float) -> tuple[float, int]:
    """Number of Euler steps covering ``horizon`` and the matching step."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if horizon < dt * (1 - 1e-12):
        raise ValueError("horizon must be at least dt")
    steps = max(1, math.ceil(horizon / dt - 1e-9))
    return horizon / steps, steps


def default_dt(F: SetValuedField, eps: Margin, window: Window) -> float:
    """``h_min / (2·v_max)`` with ``v_max`` the largest perturbed speed on the window."""
    c = window.centers()
    v = np.linalg.norm(F.vertices(c), axis=-1).max(axis=1) + eps(c)
    vmax = float(v.max())
    return window.h_min / (2 * vmax) if vmax > 0 else window.h_min


class _Plan:
    """Array form of a list of strategies for vectorized stepping."""

    def __init__(self, strategies, F: SetValuedField):
        M, n, V = len(strategies), F.ndim, F.max_vertices
        self.M = M
        self.kind = np.array([_KINDS.index(s.kind) for s in strategies], dtype=np.int8)
        self.index = np.array([min(s.index, V - 1) for s in strategies], dtype=np.int64)
        self.use_guide_sel = np.array(
            [s.kind == "extremal" and s.direction is None for s in strategies])
        self.direction = np.array(
            [s.direction if s.direction is not None else (0.0,) * n for s in strategies],
            dtype=float).reshape(M, n)
        self.pert = np.array([_PERTURB.index(s.perturb) for s in strategies], dtype=np.int8)
        self.pvec = np.array(
            [s.perturb_direction if s.perturb_direction is not None else (0.0,) * n
             for s in strategies], dtype=float).reshape(M, n)
        self.random_ids = np.flatnonzero([s.is_random for s in strategies])
        self.slot = np.full(M, -1, dtype=np.int64)
        self.slot[self.random_ids] = np.arange(len(self.random_ids))
        self.rngs = [np.random.default_rng(np.random.SeedSequence([s.seed, *np.atleast_1d(s.stream).tolist()]))
                     for s in (strategies[i] for i in self.random_ids)]
        self.needs_guide = any(s.uses_guide for s in strategies)
        R = len(self.random_ids)
        self.wbuf = np.zeros((R, _CHUNK, V))
        self.dbuf = np.zeros((R, _CHUNK, n))
        self.V, self.n = V, n

    def refill(self, active_random_slots):
        for r in active_random_slots:
            rng = self.rngs[r]
            self.wbuf[r] = rng.dirichlet(np.ones(self.V), size=_CHUNK)
            d = rng.standard_normal((_CHUNK, self.n))
            nrm = np.linalg.norm(d, axis=1, keepdims=True)
            nrm[nrm == 0] = 1.0
            self.dbuf[r] = d / nrm


def _unit(g):
    nrm = np.linalg.norm(g, axis=1, keepdims=True)
    return np.divide(g, nrm, out=np.zeros_like(g), where=nrm > 0)


def euler_stream(F, eps, x0s, strategies, dt, steps, direction, *, window=None,
                 guide=None, on_step=None):
    """Vectorized explicit Euler for many trajectories at once.

    Args:
        x0s: starting points ``(M, n)``.
        strategies: one :class:`SelectionStrategy` per trajectory.
        guide: callable ``(N, n) -> (N, n)`` used by guide-driven strategies.
        on_step: callback ``(k, ids, x_old, x_new) -> stop_mask`` called after
            every step with the indices of the trajectories still running.

    Returns:
        ``(final_states, lengths, truncated)`` where ``lengths`` counts the
        stored states of each trajectory.
    """
    sign = _direction_sign(direction)
    x = np.array(x0s, dtype=float).reshape(-1, F.ndim)
    M = len(x)
    plan = _Plan(list(strategies), F)
    if plan.M != M:
        raise ValueError("one strategy per starting point is required")
    if plan.needs_guide and guide is None:
        raise ValueError("guide-driven strategies need a guide field")
    lengths = np.ones(M, dtype=np.int64)
    truncated = np.zeros(M, dtype=bool)
    active = np.arange(M)
    for k in range(steps):
        if len(active) == 0:
            break
        c = k % _CHUNK
        if c == 0 and len(plan.random_ids):
            plan.refill(plan.slot[active][plan.slot[active] >= 0])
        xa = x[active]
        verts = sign * F.vertices(xa)
        kind = plan.kind[active]
        sel = verts[np.arange(len(active)), plan.index[active]]
        g = None
        if plan.needs_guide:
            g = _unit(np.asarray(guide(xa), dtype=float).reshape(len(active), -1))
        ext = kind == 2
        if ext.any():
            dirs = plan.direction[active].copy()
            ug = plan.use_guide_sel[active]
            if ug.any():
                dirs[ug] = g[ug]
            scores = np.einsum("avn,an->av", verts[ext], dirs[ext])
            sel[ext] = verts[ext][np.arange(ext.sum()), scores.argmax(axis=1)]
        slots = plan.slot[active]
        rnd = kind == 1
        if rnd.any():
            w = plan.wbuf[slots[rnd], c]
            sel[rnd] = np.einsum("av,avn->an", w, verts[rnd])
        pert = plan.pert[active]
        d = np.zeros_like(xa)
        fixed = pert == 1
        d[fixed] = plan.pvec[active][fixed]
        prnd = pert == 2
        if prnd.any():
            d[prnd] = plan.dbuf[slots[prnd], c]
        pg = pert == 3
        if pg.any():
            d[pg] = g[pg]
        vel = sel + eps(xa)[:, None] * d
        xn = xa + dt * vel
        keep = np.ones(len(active), dtype=bool)
        if window is not None:
            inside = window.contains(xn)
            truncated[active[~inside]] = True
            keep &= inside
        ids = active[keep]
        x_old = xa[keep]
        x[ids] = xn[keep]
        lengths[ids] += 1
        if on_step is not None and len(ids):
            stop = np.asarray(on_step(k, ids, x_old, xn[keep]), dtype=bool)
            keep_ids = ids[~stop]
        else:
            keep_ids = ids
        active = keep_ids
    return x, lengths, truncated


def integrate(F: SetValuedField, eps: Margin, x0, strat: SelectionStrategy, dt: float,
              horizon: float, direction: str = FORWARD, *, window: Window | None = None,
              guide=None) -> Trajectory:
    """Explicit Euler trajectory of one selection.

    The step is shrunk so that an integer number of steps ends exactly at
    ``horizon``. With a ``window`` the trajectory stops before leaving it and
    is flagged ``truncated``.
    """
    x0 = np.asarray(x0, dtype=float).reshape(1, -1)
    if window is not None and not window.contains(x0)[0]:
        raise OutOfWindowError("initial state lies outside the window")
    _direction_sign(direction)
    dt, steps = step_plan(dt, horizon)
    states = [x0[0].copy()]

    def record(k, ids, x_old, x_new):
        states.append(x_new[0].copy())
        return np.zeros(len(ids), dtype=bool)

    _, _, trunc = euler_stream(F, eps, x0, [strat], dt, steps, direction,
                               window=window, guide=guide, on_step=record)
    states = np.array(states)
    times = dt * np.arange(len(states))
    return Trajectory(times, states, direction, dt, bool(trunc[0]), strat)


def bundle_strategies(F: SetValuedField, n_random: int, seed: int = 0) -> list:
    """Vertex selections times {none, ±axis} perturbations, then random ones."""
    if n_random < 0:
        raise ValueError("n_random must be nonnegative")
    strategies = []
    eye = np.eye(F.ndim)
    for i in range(F.max_vertices):
        strategies.append(SelectionStrategy("vertex", i))
        for a in range(F.ndim):
            for s in (1.0, -1.0):
                strategies.append(SelectionStrategy("vertex", i, perturb="fixed",
                                                    perturb_direction=tuple(s * eye[a])))
    for r in range(n_random):
        strategies.append(SelectionStrategy("random", perturb="random", seed=seed, stream=r))
    return strategies


def bundle(F: SetValuedField, eps: Margin, x0, n_random: int, dt: float, horizon: float,
           direction: str = FORWARD, *, seed: int = 0, window: Window | None = None,
           extra=()) -> SolutionBundle:
    """Finite sample of solutions from ``x0``; deterministic for a given seed."""
    x0 = np.asarray(x0, dtype=float).ravel()
    strategies = bundle_strategies(F, n_random, seed) + list(extra)
    trajs = [integrate(F, eps, x0, s, dt, horizon, direction, window=window)
             for s in strategies]
    dt_used = trajs[0].dt if trajs else dt
    return SolutionBundle(x0, trajs, horizon, dt_used, direction)


def bundle_many(F, eps, starts, strategies, dt, horizon, direction=FORWARD, *,
                window=None, guide=None) -> list:
    """Trajectories for every pair ``(start, strategy)``, integrated together.

    ``starts`` has one row per trajectory; returns a list of
    :class:`Trajectory` in the same order.
    """
    starts = np.asarray(starts, dtype=float).reshape(-1, F.ndim)
    dt, steps = step_plan(dt, horizon)
    M = len(starts)
    buf = np.full((steps + 1, M, F.ndim), np.nan)
    buf[0] = starts

    def record(k, ids, x_old, x_new):
        buf[k + 1, ids] = x_new
        return np.zeros(len(ids), dtype=bool)

    _, lengths, trunc = euler_stream(F, eps, starts, strategies, dt, steps, direction,
                                     window=window, guide=guide, on_step=record)
    out = []
    for j in range(M):
        st = buf[: lengths[j], j].copy()
        out.append(Trajectory(dt * np.arange(len(st)), st, direction, dt,
                              bool(trunc[j]), strategies[j]))
    return out
