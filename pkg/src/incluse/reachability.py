"""Grid reach tubes, final-slice reach sets and infinite-horizon reachable sets.

Propagation runs on a refined bin grid (``refine`` bins per cell and axis)
and moves exact particle positions by a fixed spatial hop ``ell`` (slightly
longer than a bin diagonal, so every hop leaves its bin) along each
perturbed velocity ``v + eps·d_j``, taking time ``ell/|v + eps·d_j|``.
Keeping exact positions avoids the outward drift that snapping to cell
centers causes.

Particles must be thinned to keep the flood finite. Keeping the first
arrival per bin erodes the set boundary by several cells, because the
discarded particle is often the extremal one. The infinite-horizon flood
instead keeps, per bin, the particle extremal along each of a few support
directions, so the kept set spans the hull of every arrival in the bin.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .grid import OutOfWindowError, Window
from .inclusion import (
    BACKWARD,
    FORWARD,
    Margin,
    SelectionStrategy,
    SetValuedField,
    ball_directions,
    bundle_many,
    minkowski_vertices_batch,
)
from .regions import Region, RegionError, inflate


@dataclass(frozen=True)
class ReachConfig:
    """Numerical knobs of the propagation.

    Attributes:
        dt: Euler step for trajectory-sampled sets (final slices).
        max_steps: cap on propagation generations; None picks
            ``10 · diameter / ell``.
        directions_m: ball directions per velocity vertex.
        stop_when_stable: stop at the first generation adding no bin.
        refine: bins per cell and axis.
        hop_factor: hop length in bin diagonals.
    """

    dt: float = 0.01
    max_steps: int | None = None
    directions_m: int = 16
    stop_when_stable: bool = True
    refine: int = 2
    hop_factor: float = 1.05

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if self.directions_m < 8:
            raise ValueError("directions_m must be at least 8")
        if self.refine < 1:
            raise ValueError("refine must be at least 1")
        if not self.hop_factor > 1:
            raise ValueError("hop_factor must exceed 1")


@dataclass
class ReachResult:
    region: Region
    converged: bool
    steps_used: int
    edge_truncated: bool
    particles: np.ndarray = field(default=None, repr=False)

    def sidecar(self) -> dict:
        return {
            "converged": bool(self.converged),
            "steps_used": int(self.steps_used),
            "edge_truncated": bool(self.edge_truncated),
        }

    def sidecar_json(self) -> str:
        return json.dumps(self.sidecar(), sort_keys=True, indent=2) + "\n"


def reversed_field(F: SetValuedField) -> SetValuedField:
    """``-F``: the right-hand side of the time-reversed inclusion."""
    return SetValuedField(lambda p: -F.vertices(p), F.max_vertices, F.ndim,
                          name=f"-{F.name}", params=F.params,
                          continuity_modulus=F.continuity_modulus)


# support improvements below this fraction of a bin do not re-propagate
SUPPORT_TOL = 0.1


class _Flood:
    """Particle flood on the refined bin grid."""

    def __init__(self, F, eps, window: Window, cfg: ReachConfig):
        self.F, self.eps, self.window, self.cfg = F, eps, window, cfg
        self.fine = window.refined(cfg.refine)
        self.ell = cfg.hop_factor * self.fine.cell_diagonal
        self.best = np.full(self.fine.size, np.inf)
        self.pos = np.zeros((self.fine.size, window.ndim))
        self.edge = False
        self.extra_cells = []
        self.kept = None

    def max_steps(self) -> int:
        if self.cfg.max_steps is not None:
            return self.cfg.max_steps
        return int(math.ceil(10 * self.window.diameter / self.ell))

    def hop_targets(self, P) -> np.ndarray:
        """Endpoints of one hop from each point along every perturbed velocity."""
        V = minkowski_vertices_batch(self.F, self.eps, P, self.cfg.directions_m)
        speed = np.linalg.norm(V, axis=-1)
        src, slot = np.nonzero(speed > 1e-12)
        Q = P[src] + (self.ell / speed[src, slot])[:, None] * V[src, slot]
        return Q[self._inside(Q)]

    def _inside(self, Q):
        inside = self.window.contains(Q, tol=0.0)
        if not inside.all():
            self.edge = True
        return inside

    def _claim(self, Q) -> np.ndarray:
        """Store points that push a bin's support value out; return their indices."""
        S = len(self.sup_dirs)
        keys = self.fine.flat_index(Q)[:, None] * S + np.arange(S)
        vals = Q @ self.sup_dirs.T
        up = vals > self.sup[keys] + self.sup_tol
        key, val, idx = keys[up], vals[up], np.nonzero(up)[0]
        order = np.lexsort((-val, key))
        key, val, idx = key[order], val[order], idx[order]
        uk, first = np.unique(key, return_index=True)
        self.sup[uk] = val[first]
        self.sup_pos[uk] = Q[idx[first]]
        return np.unique(idx[first])

    def run_infinite(self, pts):
        """Hop until no point extends any bin's support by more than ``sup_tol``."""
        self.sup_dirs = ball_directions(self.window.ndim, 4)
        S = len(self.sup_dirs)
        self.sup = np.full(self.fine.size * S, -np.inf)
        self.sup_pos = np.zeros((self.fine.size * S, self.window.ndim))
        self.sup_tol = SUPPORT_TOL * self.fine.h_min
        P = np.atleast_2d(pts)
        P = P[self._claim(P)]
        steps = 0
        # support revisits need more hops than a single sweep
        limit = 4 * self.max_steps()
        while len(P) and steps < limit:
            Q = self.hop_targets(P)
            P = Q[self._claim(Q)]
            steps += 1
        stored = np.isfinite(self.sup)
        self.best[np.flatnonzero(stored.reshape(-1, S).any(axis=1))] = 0.0
        self.kept = self.sup_pos[stored]
        return steps, len(P) == 0

    def run_tube(self, pts, t):
        """Earliest arrival per (bin, velocity slot) up to time ``t``.

        Keeping one particle per slot lets each constant selection travel
        along its own straight hops instead of being overwritten by
        earlier arrivals from other directions.
        """
        P = np.atleast_2d(np.asarray(pts, dtype=float))
        T = np.zeros(len(P))
        slots = None
        steps = 0
        limit = self.max_steps()
        while len(P) and steps < limit:
            V = minkowski_vertices_batch(self.F, self.eps, P, self.cfg.directions_m)
            if slots is None:
                slots = V.shape[1]
                best = np.full(self.fine.size * slots, np.inf)
                pos = np.zeros((self.fine.size * slots, self.window.ndim))
            speed = np.linalg.norm(V, axis=-1)
            src, slot = np.nonzero(speed > 1e-12)
            v, sp = V[src, slot], speed[src, slot]
            arr = T[src] + self.ell / sp
            late = arr > t
            if late.any():
                # partial hop ending exactly at time t
                end = P[src[late]] + (t - T[src[late]])[:, None] * v[late]
                end = end[self._inside(end)]
                self.extra_cells.append(self.window.flat_index(end))
            keep = ~late
            Q = P[src[keep]] + (self.ell / sp[keep])[:, None] * v[keep]
            arr, slot = arr[keep], slot[keep]
            inside = self._inside(Q)
            Q, arr, slot = Q[inside], arr[inside], slot[inside]
            key = self.fine.flat_index(Q) * slots + slot
            order = np.lexsort((arr, key))
            key, arr, Q = key[order], arr[order], Q[order]
            uk, first = np.unique(key, return_index=True)
            cand_t, cand_q = arr[first], Q[first]
            better = cand_t < best[uk] - 1e-12
            uk = uk[better]
            best[uk] = cand_t[better]
            pos[uk] = cand_q[better]
            P, T = pos[uk], best[uk]
            steps += 1
        if slots is not None:
            reached = np.isfinite(best.reshape(-1, slots)).any(axis=1)
            self.best[reached] = 0.0
        return steps, len(P) == 0

    def visited_cells(self) -> np.ndarray:
        bins = np.flatnonzero(np.isfinite(self.best))
        idx = np.stack(np.unravel_index(bins, self.fine.shape), axis=-1) // self.cfg.refine
        cells = np.ravel_multi_index(tuple(idx.T), self.window.shape)
        if self.extra_cells:
            cells = np.concatenate([cells] + self.extra_cells)
        return cells

    def particles(self) -> np.ndarray:
        if self.kept is not None:
            return self.kept.copy()
        return self.pos[np.isfinite(self.best)].copy()


def _system(F, t):
    return (F, abs(t)) if t >= 0 else (reversed_field(F), -t)


def reach_tube(F: SetValuedField, eps: Margin, x, t: float, cfg: ReachConfig,
               window: Window) -> Region:
    """Cells reachable from ``x`` within time ``|t|`` (backward when ``t < 0``)."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    if not window.contains(x)[0]:
        raise OutOfWindowError("initial state lies outside the window")
    G, T = _system(F, t)
    fl = _Flood(G, eps, window, cfg)
    fl.run_tube(x, T)
    occ = np.zeros(window.size, dtype=bool)
    occ[fl.visited_cells()] = True
    occ[window.flat_index(x)] = True
    return Region(window, occ)


def reach_final_slice(F: SetValuedField, eps: Margin, x, t: float, cfg: ReachConfig,
                      window: Window) -> Region:
    """Cells holding the time-``|t|`` states of a bundle of extremal selections.

    The bundle pairs every vertex selection with each of the
    ``directions_m`` fixed ball directions (no perturbation when
    ``eps(x) = 0``).
    """
    x = np.asarray(x, dtype=float).reshape(1, -1)
    if not window.contains(x)[0]:
        raise OutOfWindowError("initial state lies outside the window")
    if t == 0:
        return Region.from_cells(window, window.flat_index(x))
    direction = FORWARD if t > 0 else BACKWARD
    dirs = ball_directions(F.ndim, cfg.directions_m)
    strategies = []
    unperturbed = eps.eval(x[0]) == 0
    for i in range(F.max_vertices):
        if unperturbed:
            strategies.append(SelectionStrategy("vertex", i))
            continue
        strategies += [SelectionStrategy("vertex", i, perturb="fixed",
                                         perturb_direction=tuple(d)) for d in dirs]
    starts = np.repeat(x, len(strategies), axis=0)
    trajs = bundle_many(F, eps, starts, strategies, cfg.dt, abs(t), direction,
                        window=window)
    ends = np.array([tr.states[-1] for tr in trajs if not tr.truncated]).reshape(-1, F.ndim)
    return Region.from_cells(window, window.flat_index(ends) if len(ends) else [])


def _seed_points(X0: Region, refine: int) -> np.ndarray:
    """Bin centers of the refined grid that lie in occupied cells of ``X0``."""
    fine = X0.window.refined(refine)
    c = fine.centers()
    return c[X0.contains(c)]


def reach_set_infinite(F: SetValuedField, eps_bar: Margin, X0: Region,
                       cfg: ReachConfig) -> ReachResult:
    """Infinite-horizon reachable set from ``X0`` as a propagation fixed point."""
    if X0.is_empty:
        raise RegionError("initial set is empty")
    w = X0.window
    fl = _Flood(F, eps_bar, w, cfg)
    steps, converged = fl.run_infinite(_seed_points(X0, cfg.refine))
    occ = X0.occupancy.ravel().copy()
    occ[fl.visited_cells()] = True
    region = Region(w, occ)
    return ReachResult(region, converged, steps, bool(fl.edge or region.edge_flag),
                       fl.particles())


def propagate_step(F: SetValuedField, eps: Margin, result: ReachResult,
                   cfg: ReachConfig) -> Region:
    """Region after hopping every stored particle once more."""
    w = result.region.window
    Q = _Flood(F, eps, w, cfg).hop_targets(result.particles)
    occ = result.region.occupancy.ravel().copy()
    occ[w.flat_index(Q)] = True
    return Region(w, occ)


def reach_inflate(F: SetValuedField, K: Region, rho_o, eps1: Margin,
                  cfg: ReachConfig) -> ReachResult:
    """Reachable set under ``eps1`` from the ``rho_o``-inflation of ``K``."""
    return reach_set_infinite(F, eps1, inflate(K, rho_o), cfg)
