"""Time-to-impact barrier on a boundary band, its extension to the window and
the shifted barrier.

Signs follow the set ``K``: points inside get the negative of the slowest
backward escape time, points outside get the slowest forward arrival time.
Finite bundles approximate the supremum over all solutions from below; an
adversarial selection that steers away from ``∂K`` is added so that the
extremal solution of simple fields is part of every bundle.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .grid import GridSpline, Window, interpolate
from .inclusion import (
    BACKWARD,
    FORWARD,
    Margin,
    SelectionStrategy,
    SetValuedField,
    SolutionBundle,
    Trajectory,
    bundle_strategies,
    euler_stream,
    step_plan,
)
from .regions import Region, RegionError, projection_tolerance

KINDS = ("time-to-impact", "extended", "shifted", "smoothed")


class BarrierField:
    """Cell-center samples of a barrier with bilinear interpolation.

    Attributes:
        window: grid.
        values: array of shape ``window.shape`` (NaN where undefined).
        clip_flags: cells whose value was clipped at the horizon or whose
            lookup left the window.
        kind: one of ``KINDS``.
    """

    def __init__(self, window: Window, values, clip_flags=None, kind: str = "extended"):
        if kind not in KINDS:
            raise ValueError(f"unknown barrier kind {kind!r}")
        self.window = window
        self.values = np.asarray(values, dtype=float).reshape(window.shape)
        if clip_flags is None:
            clip_flags = np.zeros(window.shape, dtype=bool)
        self.clip_flags = np.asarray(clip_flags, dtype=bool).reshape(window.shape)
        self.kind = kind

    @property
    def defined(self) -> np.ndarray:
        return np.isfinite(self.values)

    def __call__(self, pts) -> np.ndarray:
        return interpolate(self.window, self.values, pts)

    def __add__(self, other):
        return BarrierField(self.window, self.values + other.values,
                            self.clip_flags | other.clip_flags, self.kind)

    def scaled(self, a: float) -> "BarrierField":
        return BarrierField(self.window, a * self.values, self.clip_flags, self.kind)

    def to_csv(self) -> str:
        """Rows ``x, y, B, clip_flag`` in row-major cell order."""
        buf = io.StringIO()
        names = ["x", "y"][: self.window.ndim]
        buf.write(",".join(names + ["B", "clip_flag"]) + "\n")
        for c, v, f in zip(self.window.centers(), self.values.ravel(), self.clip_flags.ravel()):
            buf.write(",".join(f"{a:.12g}" for a in c) + f",{v:.12g},{int(f)}\n")
        return buf.getvalue()


@dataclass(frozen=True)
class ImpactQuery:
    """Bundle parameters for time-to-impact evaluation.

    Attributes:
        dt, horizon: Euler step and integration horizon.
        n_random: random-convex selections per point.
        seed: base seed; each point uses its own stream.
        crossing_tol: ``|sdist|`` below which a start counts as on ``∂K``.
        adversarial: add the selection steering away from ``∂K``.
    """

    dt: float
    horizon: float
    n_random: int = 4
    seed: int = 0
    crossing_tol: float = 0.0
    adversarial: bool = True

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.n_random < 0:
            raise ValueError("n_random must be nonnegative")


def first_impact_time(traj: Trajectory, K: Region) -> float | None:
    """Signed first time at which ``sdist_K`` changes sign along ``traj``.

    The crossing is located by linear interpolation between samples. A
    trajectory starting on ``∂K`` impacts at time 0.
    """
    s = K.signed_distance(traj.states)
    sign = -1.0 if traj.direction == BACKWARD else 1.0
    if s[0] == 0:
        return 0.0
    cross = np.flatnonzero(np.sign(s[1:]) != np.sign(s[:-1]))
    if not len(cross):
        return None
    k = cross[0]
    frac = s[k] / (s[k] - s[k + 1])
    t = traj.times[k] + frac * (traj.times[k + 1] - traj.times[k])
    return sign * float(t)


def _impact_batch(points, K, F, eps2, q, direction, stream_ids):
    """Worst impact time per point for one integration direction.

    Returns ``(|t| worst, clipped)`` for each point.
    """
    base = bundle_strategies(F, 0)
    if q.adversarial:
        base.append(SelectionStrategy("extremal", perturb="guide"))
    per = len(base) + q.n_random
    P = len(points)
    strategies = []
    for p in range(P):
        strategies += base
        strategies += [SelectionStrategy("random", perturb="random", seed=q.seed,
                                         stream=(int(stream_ids[p]), r))
                       for r in range(q.n_random)]
    starts = np.repeat(points, per, axis=0)
    owner = np.repeat(np.arange(P), per)
    dt, steps = step_plan(q.dt, q.horizon)
    hit_time = np.full(len(starts), np.nan)
    s_prev = K.signed_distance(starts)
    outward = 1.0 if direction == FORWARD else -1.0

    def guide(x):
        return outward * K.sdist_gradient(x)

    def monitor(k, ids, x_old, x_new):
        s_new = K.signed_distance(x_new)
        s_old = s_prev[ids]
        crossed = (np.sign(s_new) != np.sign(s_old)) | (s_new == 0)
        if crossed.any():
            a, b = s_old[crossed], s_new[crossed]
            frac = np.where(a == b, 1.0, a / np.where(a == b, 1.0, a - b))
            hit_time[ids[crossed]] = dt * (k + frac)
        s_prev[ids] = s_new
        return crossed

    euler_stream(F, eps2, starts, strategies, dt, steps, direction,
                 window=K.window, guide=guide, on_step=monitor)
    clipped_traj = np.isnan(hit_time)
    t = np.where(clipped_traj, q.horizon, hit_time)
    worst = np.zeros(P)
    np.maximum.at(worst, owner, t)
    clipped = np.zeros(P, dtype=bool)
    np.logical_or.at(clipped, owner, clipped_traj)
    return worst, clipped


def time_to_impact_many(points, K: Region, F: SetValuedField, eps2: Margin,
                        q: ImpactQuery, stream_ids=None):
    """Vectorized :func:`time_to_impact`; returns ``(values, clip_flags)``."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if stream_ids is None:
        stream_ids = np.arange(len(pts))
    stream_ids = np.asarray(stream_ids)
    s = K.signed_distance(pts)
    vals = np.zeros(len(pts))
    clip = np.zeros(len(pts), dtype=bool)
    on = np.abs(s) <= q.crossing_tol
    for side, direction, sgn in ((s > 0) & ~on, FORWARD, 1.0), ((s < 0) & ~on, BACKWARD, -1.0):
        idx = np.flatnonzero(side)
        if not len(idx):
            continue
        t, c = _impact_batch(pts[idx], K, F, eps2, q, direction, stream_ids[idx])
        vals[idx] = sgn * t
        clip[idx] = c
    return vals, clip


def time_to_impact(x, K: Region, F: SetValuedField, eps2: Margin, q: ImpactQuery) -> tuple:
    """Signed worst time to ``∂K`` over a bundle from ``x``.

    Returns:
        ``(value, clipped)``; ``clipped`` marks a bundle member that never
        reached ``∂K`` within the horizon (its contribution is ``±horizon``).
    """
    v, c = time_to_impact_many(np.atleast_2d(x), K, F, eps2, q)
    return float(v[0]), bool(c[0])


def time_to_impact_field(U1: Region, K: Region, F: SetValuedField, eps2: Margin,
                         q: ImpactQuery) -> BarrierField:
    """Time-to-impact samples on the cells of ``U1`` (NaN elsewhere)."""
    w = U1.window
    cells = np.flatnonzero(U1.occupancy.ravel())
    vals, clip = time_to_impact_many(w.centers()[cells], K, F, eps2, q, stream_ids=cells)
    out = np.full(w.size, np.nan)
    flags = np.zeros(w.size, dtype=bool)
    out[cells] = vals
    flags[cells] = clip
    return BarrierField(w, out, flags, kind="time-to-impact")


def extend_barrier(bhat: BarrierField, U1: Region, K: Region) -> BarrierField:
    """Extend band values to the window through the projection onto ``U1``.

    Inside ``K`` a cell takes the smallest band value among its nearest
    ``U1`` boundary points, outside the largest. Band cells are kept.
    """
    w = U1.window
    band = U1.occupancy.ravel()
    vals = bhat.values.ravel()
    if np.any(np.isnan(vals[band])):
        raise RegionError("time-to-impact values missing on the band")
    if not U1.has_boundary:
        raise RegionError("band has no boundary to project onto")
    out = vals.copy()
    flags = bhat.clip_flags.ravel().copy()
    rest = np.flatnonzero(~band)
    if len(rest):
        centers = w.centers()[rest]
        d, _ = U1._tree.query(centers)
        tol = projection_tolerance(w)
        hits = U1._tree.query_ball_point(centers, d + tol)
        face_vals = vals[U1.boundary_inside]
        face_flags = flags[U1.boundary_inside]
        inside_K = K.occupancy.ravel()[rest]
        for j, (cell, h) in enumerate(zip(rest, hits)):
            fv = face_vals[h]
            pick = int(np.argmin(fv)) if inside_K[j] else int(np.argmax(fv))
            out[cell] = fv[pick]
            flags[cell] = face_flags[h][pick]
    return BarrierField(w, out, flags, kind="extended")


def _cell_values(window: Window, field) -> np.ndarray:
    if callable(field):
        return np.asarray(field(window.centers()), dtype=float).reshape(window.size)
    arr = np.asarray(field, dtype=float)
    if arr.size == window.size:
        return arr.reshape(window.size)
    return np.broadcast_to(arr, window.shape).reshape(window.size)


def shifted_barrier(BK: BarrierField, rho2, v) -> BarrierField:
    """``x -> BK(x + rho2(x)·v)`` sampled at cell centers.

    A cell inherits the clip flag of the cell its lookup lands in; lookups
    outside the hull of cell centers are clamped and flagged.
    """
    w = BK.window
    v = np.asarray(v, dtype=float).ravel()
    if np.linalg.norm(v) > 1 + 1e-12:
        raise ValueError("shift direction must lie in the unit ball")
    c = w.centers()
    y = c + _cell_values(w, rho2)[:, None] * v
    out = ~w.interpolates(y)
    vals = BK(y)
    flags = BK.clip_flags.ravel()[w.flat_index(y)] | out
    return BarrierField(w, vals, flags, kind="shifted")


@dataclass
class DecreaseProfile:
    """``B`` sampled along trajectories and the worst rate-1 slack.

    ``worst_slack`` is the largest ``B(t') - B(t) + (t' - t)`` over sample
    pairs ``t < t'`` (None when no pair exists); nonpositive values mean
    ``B`` decreased at least at unit rate.
    """

    series: list
    worst_slack: float | None

    def __len__(self):
        return len(self.series)


def clip_to_region(traj: Trajectory, U1: Region) -> Trajectory:
    """Initial segment of ``traj`` that stays inside ``U1``."""
    inside = U1.contains(traj.states)
    stop = len(inside) if inside.all() else int(np.argmin(inside))
    return Trajectory(traj.times[:stop], traj.states[:stop], traj.direction, traj.dt,
                      traj.truncated, traj.strategy)


def decrease_profile(B, bundle, U1: Region) -> DecreaseProfile:
    """Rate-1 decrease diagnostics of ``B`` along the bundle inside ``U1``.

    Args:
        B: any callable field on points (e.g. :class:`BarrierField`).
        bundle: a :class:`~incluse.inclusion.SolutionBundle` or a list of
            trajectories.
    """
    trajs = bundle.trajectories if isinstance(bundle, SolutionBundle) else list(bundle)
    series = []
    worst = None
    for tr in trajs:
        cl = clip_to_region(tr, U1)
        if len(cl) == 0:
            continue
        b = np.asarray(B(cl.states), dtype=float)
        series.append((cl.times.copy(), b))
        if len(b) < 2:
            continue
        g = b + cl.times
        prior_min = np.minimum.accumulate(g)[:-1]
        slack = float(np.max(g[1:] - prior_min))
        worst = slack if worst is None else max(worst, slack)
    return DecreaseProfile(series, worst)


def rho2_field(eps2: Margin, rho_o, window: Window, scale: float = 0.9,
               sigma_cells: float = 2.0) -> GridSpline:
    """Smooth shift radius ``rho2 <= scale · min(eps2, rho_o)`` at grid nodes.

    A minimum filter over the Gaussian support followed by a Gaussian pass
    keeps every node below the cap while making the field smooth.
    """
    cap = scale * np.minimum(eps2.on_window(window), _cell_values(window, rho_o).reshape(window.shape))
    if np.any(cap <= 0):
        raise ValueError("shift radius cap must be positive")
    radius = int(np.ceil(3 * sigma_cells))
    low = ndimage.minimum_filter(cap, size=2 * radius + 1, mode="nearest")
    smooth = ndimage.gaussian_filter(low, sigma=sigma_cells, truncate=3.0, mode="nearest")
    return GridSpline(window, smooth)
