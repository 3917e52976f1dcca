"""Verdicts on barrier candidates and the end-to-end certification pipeline.

Pipeline stages, in order: reachable set ``K`` under ``eps_bar``; bands
``U1`` and ``U1_hat`` around ``∂K``; inflation radius ``delta``; reach
inflation ``K'`` of ``K`` by ``rho_o`` under ``eps1``; time-to-impact to
``∂K'`` on ``U1`` under ``eps2``; extension to the window; smooth shift
radius ``rho2``; mollification; checks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from . import __version__
from .barrier import (
    BarrierField,
    ImpactQuery,
    decrease_profile,
    extend_barrier,
    rho2_field,
    time_to_impact_field,
)
from .grid import Window, interpolate
from .inclusion import (
    FORWARD,
    Margin,
    SelectionStrategy,
    SetValuedField,
    bundle_many,
    bundle_strategies,
    default_dt,
    minkowski_vertices,
)
from .reachability import ReachConfig, ReachResult, reach_inflate, reach_set_infinite
from .regions import (
    HalfSpace,
    Region,
    RegionError,
    boundary_band,
    inflate,
    margin_inside,
    tangent_cone,
)
from .smoothing import Mollifier, SmoothBarrier, smooth_barrier

PASS, FAIL, UNRESOLVED, UNTESTED = "pass", "fail", "unresolved", "untested"


@dataclass
class Verdict:
    """Outcome of one check together with the tolerance it was judged by."""

    name: str
    status: str
    value: float | None
    tolerance: float | None
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.status == PASS

    def to_dict(self) -> dict:
        return _jsonable({"status": self.status, "value": self.value,
                          "tolerance": self.tolerance, "details": self.details})


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


def _values(B) -> np.ndarray:
    return np.asarray(B.values, dtype=float)


# -----------------------------------------------------------------------------
# Sign conditions
# -----------------------------------------------------------------------------


def check_candidate(B, X0: Region, Xu: Region) -> Verdict:
    """``B <= 0`` on every cell of ``X0`` and ``B > 0`` on every cell of ``Xu``."""
    if X0.is_empty or Xu.is_empty:
        raise RegionError("candidate check needs nonempty initial and unsafe sets")
    v = _values(B)
    hi0 = float(np.max(v[X0.occupancy]))
    lou = float(np.min(v[Xu.occupancy]))
    ok = hi0 <= 0 and lou > 0
    return Verdict("candidate", PASS if ok else FAIL, min(-hi0, lou), 0.0,
                   {"max_on_initial": hi0, "min_on_unsafe": lou})


def check_consistency(B, K: Region, K_delta: Region) -> Verdict:
    """``B <= 0`` on ``K`` and ``B > 0`` off ``K_delta``, cell by cell."""
    v = _values(B)
    inside = v[K.occupancy]
    outside = v[~K_delta.occupancy]
    hi = float(inside.max()) if inside.size else -np.inf
    lo = float(outside.min()) if outside.size else np.inf
    bad_in = int(np.sum(inside > 0))
    bad_out = int(np.sum(outside <= 0))
    ok = bad_in == 0 and bad_out == 0
    return Verdict("consistency", PASS if ok else FAIL, min(-hi, lo), 0.0,
                   {"max_on_K": hi, "min_off_K_delta": lo,
                    "violations_on_K": bad_in, "violations_off_K_delta": bad_out})


# -----------------------------------------------------------------------------
# Boundary samples and the infinitesimal condition
# -----------------------------------------------------------------------------


@dataclass
class BoundarySampleSet:
    """Sub-cell points on a zero level set with unit outward normals."""

    points: np.ndarray
    normals: np.ndarray

    def __len__(self):
        return len(self.points)

    def restrict(self, region: Region) -> "BoundarySampleSet":
        keep = region.contains(self.points) if len(self.points) else np.zeros(0, bool)
        return BoundarySampleSet(self.points[keep], self.normals[keep])


def boundary_samples(window: Window, values, gradient=None) -> BoundarySampleSet:
    """Zero crossings of the bilinear field through ``values``.

    Each grid segment joining two cell centers with ``v <= 0`` at one end and
    ``v > 0`` at the other contributes its exact linear zero. Normals come
    from ``gradient(points)`` when given, else from the bilinear gradient.
    """
    if window.ndim != 2:
        raise ValueError("boundary samples are implemented for planar windows")
    vals = np.asarray(values, dtype=float).reshape(window.shape)
    centers = window.centers().reshape(window.shape + (2,))
    pts = []
    for a in range(2):
        s0 = [slice(None)] * 2
        s1 = [slice(None)] * 2
        s0[a], s1[a] = slice(0, -1), slice(1, None)
        v0, v1 = vals[tuple(s0)], vals[tuple(s1)]
        c0, c1 = centers[tuple(s0)], centers[tuple(s1)]
        cross = (v0 <= 0) != (v1 <= 0)
        cross &= np.isfinite(v0) & np.isfinite(v1)
        a0, a1 = v0[cross], v1[cross]
        frac = np.where(a0 == a1, 0.5, a0 / np.where(a0 == a1, 1.0, a0 - a1))
        pts.append(c0[cross] + frac[:, None] * (c1[cross] - c0[cross]))
    P = np.concatenate(pts) if pts else np.zeros((0, 2))
    if gradient is not None:
        g = np.asarray(gradient(P), dtype=float).reshape(-1, 2)
    else:
        _, g = interpolate(window, vals, P, gradient=True)
    nrm = np.linalg.norm(g, axis=1, keepdims=True)
    ok = nrm[:, 0] > 0
    return BoundarySampleSet(P[ok], g[ok] / nrm[ok])


def check_C3(B, F: SetValuedField, samples: BoundarySampleSet, mode: str = "rate-one",
             tol: float = 0.1, eps: Margin | None = None) -> Verdict:
    """Worst ``max_{η ∈ F(x)} <∇B(x), η>`` over boundary samples.

    ``strict-negative`` passes when every maximum is below 0, ``rate-one``
    when every maximum is at most ``-1 + tol``. With ``eps`` the ball term
    ``eps(x)·|∇B(x)|`` is added in closed form.
    """
    if mode not in ("rate-one", "strict-negative"):
        raise ValueError("mode must be 'rate-one' or 'strict-negative'")
    if len(samples) == 0:
        raise RegionError("no boundary samples")
    g = np.asarray(B.gradient(samples.points), dtype=float)
    V = F.vertices(samples.points)
    m = np.einsum("qvn,qn->qv", V, g).max(axis=1)
    if eps is not None:
        m = m + eps(samples.points) * np.linalg.norm(g, axis=1)
    worst = float(m.max())
    if mode == "strict-negative":
        ok, thr = worst < 0, 0.0
    else:
        thr = -1.0 + tol
        ok = worst <= thr
    return Verdict("c3", PASS if ok else FAIL, worst, thr,
                   {"mode": mode, "samples": len(samples), "mean": float(m.mean())})


# -----------------------------------------------------------------------------
# Trajectory decrease
# -----------------------------------------------------------------------------


def _stride_sample(cells: np.ndarray, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    n = min(n, len(cells))
    return np.sort(rng.choice(cells, size=n, replace=False))


def check_C2(B: BarrierField, F: SetValuedField, eps: Margin, U1: Region, n_start: int, *,
             dt: float | None = None, horizon: float = 1.0, n_random: int = 0,
             seed: int = 0, tol: float | None = None) -> Verdict:
    """Rate-1 decrease of ``B`` along bundles started in ``U1``.

    Each start uses the vertex/axis-perturbation bundle, ``n_random`` random
    selections and one selection steering up the gradient of ``B``.
    Starts and clipping use the one-cell interior of ``U1``, where every
    bilinear lookup of ``B`` reads band values only.
    """
    w = U1.window
    if dt is None:
        dt = default_dt(F, eps, w)
    if tol is None:
        tol = 2 * (dt + w.h_max)
    if n_start <= 0:
        return Verdict("c2", UNTESTED, None, tol, {"trajectories": 0})
    # B is known only on U1; the bilinear stencil stays in U1 on its interior
    core = U1.interior()
    cells = _stride_sample(np.flatnonzero(core.occupancy.ravel()), n_start, seed)
    starts_c = w.centers()[cells]
    base = bundle_strategies(F, 0) + [SelectionStrategy("extremal", perturb="guide")]
    strategies, starts = [], []
    for j, x in enumerate(starts_c):
        strategies += base
        strategies += [SelectionStrategy("random", perturb="random", seed=seed,
                                         stream=(int(cells[j]), r)) for r in range(n_random)]
        starts += [x] * (len(base) + n_random)
    vals = _values(B)

    def guide(x):
        _, g = interpolate(w, vals, x, gradient=True)
        return g

    trajs = bundle_many(F, eps, np.array(starts), strategies, dt, horizon, FORWARD,
                        window=w, guide=guide)
    prof = decrease_profile(B, trajs, core)
    visited = np.concatenate([tr.states for tr in trajs])
    in_band = core.contains(visited)
    clipped = int(np.sum(B.clip_flags.ravel()[w.flat_index(visited[in_band])]))
    worst = prof.worst_slack
    details = {"trajectories": len(trajs), "clipped_samples": clipped, "starts": len(cells)}
    if worst is None:
        return Verdict("c2", UNTESTED, None, tol, details)
    if worst > tol:
        status = FAIL
    elif clipped:
        status = UNRESOLVED
    else:
        status = PASS
    return Verdict("c2", status, worst, tol, details)


# -----------------------------------------------------------------------------
# Invariance, separation and simulation
# -----------------------------------------------------------------------------


def check_invariance_tangent(H: HalfSpace, F: SetValuedField, eps: Margin, n_samples: int,
                             m_directions: int, *, seed: int = 0, extent: float = 2.0) -> Verdict:
    """Tangent-cone containment of ``F(x) + eps(x)·B`` at projections onto ``∂H``.

    Points ``x`` are drawn outside ``H`` within ``extent`` of the boundary
    point nearest the origin, and each is tested against the cone at its
    projection ``y``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    normal = np.asarray(H.normal)
    n = len(normal)
    base = H.offset * normal
    depth = rng.uniform(0.0, extent, n_samples)
    depth = np.where(depth == 0, extent, depth)
    pts = base - depth[:, None] * normal
    if n == 2:
        tangent = np.array([-normal[1], normal[0]])
        pts = pts + rng.uniform(-extent, extent, n_samples)[:, None] * tangent
    ys = H.project(pts)
    worst = np.inf
    outside = 0
    for x, y in zip(pts, ys):
        cone = tangent_cone(H, y, tol=1e-9 * max(1.0, abs(H.offset)) + 1e-12)
        V = minkowski_vertices(F, eps, x, m_directions)
        worst = min(worst, float(np.min(V @ normal)))
        outside += int(not np.all(cone(V)))
    status = PASS if outside == 0 else FAIL
    return Verdict("invariance", status, worst, 0.0,
                   {"samples": n_samples, "directions": m_directions, "violations": outside})


def check_separation(K: Region, Xu: Region) -> Verdict:
    """Smallest center distance between cells of ``K`` and of ``Xu``."""
    w = K.window
    tol = 2 * w.h_max
    if Xu.is_empty or K.is_empty:
        return Verdict("separation", PASS, math.inf, tol, {})
    if np.any(K.occupancy & Xu.occupancy):
        return Verdict("separation", FAIL, 0.0, tol, {"overlap_cells": int(np.sum(K.occupancy & Xu.occupancy))})
    d, _ = cKDTree(Xu.cell_centers()).query(K.cell_centers())
    dist = float(d.min())
    if dist > tol:
        return Verdict("separation", PASS, dist, tol, {})
    # gaps of two cells or less cannot be told apart from contact
    return Verdict("separation", FAIL, dist, tol, {"note": "unresolved at grid scale"})


def simulate_safety(F: SetValuedField, eps: Margin, X0: Region, Xu: Region, n_solutions: int,
                    horizon: float, *, dt: float | None = None, seed: int = 0,
                    return_trajectories: bool = False):
    """Monte-Carlo search for an unsafe solution starting in ``X0``.

    Starts are cells of ``X0`` drawn without replacement (cycled when
    ``n_solutions`` exceeds the cell count). Selections cycle through the
    vertex/axis bundle, random selections and a selection steering toward
    ``Xu``.
    """
    if n_solutions < 1:
        raise ValueError("n_solutions must be positive")
    w = X0.window
    if np.any(X0.occupancy & Xu.occupancy):
        v = Verdict("simulate", FAIL, -math.inf, 0.0, {"reason": "initial set meets unsafe set"})
        return (v, []) if return_trajectories else v
    if dt is None:
        dt = default_dt(F, eps, w)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
    cells = np.flatnonzero(X0.occupancy.ravel())
    order = rng.permutation(cells)
    pick = order[np.arange(n_solutions) % len(order)]
    starts = w.centers()[pick]
    base = bundle_strategies(F, 0) + [SelectionStrategy("extremal", perturb="guide")]
    strategies = []
    for j in range(n_solutions):
        k = j % (len(base) + 1)
        if k < len(base):
            strategies.append(base[k])
        else:
            strategies.append(SelectionStrategy("random", perturb="random", seed=seed, stream=(j,)))

    def guide(x):
        if not Xu.has_boundary:
            return np.zeros_like(x)
        return -Xu.sdist_gradient(x)

    trajs = bundle_many(F, eps, starts, strategies, dt, horizon, FORWARD, window=w, guide=guide)
    closest = math.inf
    entered = 0
    for tr in trajs:
        inside = Xu.contains(tr.states)
        if inside.any():
            entered += 1
        if Xu.has_boundary:
            closest = min(closest, float(np.min(Xu.signed_distance(tr.states))))
    status = PASS if entered == 0 else FAIL
    v = Verdict("simulate", status, closest, 0.0,
                {"solutions": n_solutions, "entered": entered, "horizon": horizon,
                 "truncated": int(sum(tr.truncated for tr in trajs))})
    return (v, trajs) if return_trajectories else v


# -----------------------------------------------------------------------------
# Pipeline
# -----------------------------------------------------------------------------


@dataclass
class Stages:
    """Intermediate products of the pipeline, for artifact emission."""

    X0: Region = None
    Xu: Region = None
    reach: ReachResult = None
    U1: Region = None
    U1_hat: Region = None
    delta: np.ndarray = None
    K_delta: Region = None
    rho_o: np.ndarray = None
    reach_inflated: ReachResult = None
    bhat: BarrierField = None
    BK: BarrierField = None
    rho2: object = None
    B: SmoothBarrier = None
    band_width: float = None
    U1_hat_width: float = None
    horizon: float = None
    dt: float = None
    timings: dict = field(default_factory=dict)


@dataclass
class CertificateReport:
    scenario: str
    digest: str
    seed: int
    verdicts: dict
    edge_caveat: bool
    stages: dict
    parameters: dict
    artifacts: Stages = field(default=None, repr=False)

    @property
    def status(self) -> str:
        st = [v.status for v in self.verdicts.values()]
        if FAIL in st:
            return FAIL
        if UNRESOLVED in st:
            return UNRESOLVED
        return PASS

    def to_dict(self) -> dict:
        return _jsonable({
            "scenario": self.scenario,
            "provenance": {"scenario_sha256": self.digest, "seed": self.seed,
                           "version": __version__},
            "status": self.status,
            "edge_caveat": self.edge_caveat,
            "checks": {k: v.to_dict() for k, v in sorted(self.verdicts.items())},
            "stages": self.stages,
            "parameters": self.parameters,
            "notes": [
                "trajectory checks sample finitely many solutions and can only falsify",
                "statements are relative to the window when edge_caveat is set",
            ],
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def _reach_config(sc, dt) -> ReachConfig:
    n = sc.numerics
    return ReachConfig(dt=dt, directions_m=int(n["directions_m"]), refine=int(n["refine"]))


def _timed(st: Stages, name: str, fn, *args, **kw):
    import time

    t0 = time.perf_counter()
    out = fn(*args, **kw)
    st.timings[name] = time.perf_counter() - t0
    return out


def stage_reach(sc, st: Stages | None = None) -> Stages:
    st = st or Stages()
    w = sc.window
    st.X0 = sc.X0.to_region(w)
    st.Xu = sc.Xu.to_region(w)
    st.dt = float(sc.numerics["dt"] or default_dt(sc.field, sc.eps_bar, w))
    st.reach = _timed(st, "reach", reach_set_infinite, sc.field, sc.eps_bar, st.X0,
                      _reach_config(sc, st.dt))
    return st


def _band_setup(sc, st: Stages, width: float):
    w = sc.window
    K = st.reach.region
    n = sc.numerics
    hat = float(n["band_u1_hat"] or 4 * w.h_max)
    st.band_width = width
    st.U1 = boundary_band(K, width)
    st.U1_hat_width = min(hat, width - w.h_max)
    st.U1_hat = boundary_band(K, st.U1_hat_width)
    delta = margin_inside(K, K.union(st.U1_hat))
    if not st.Xu.is_empty:
        dxu = ndimage.distance_transform_edt(~st.Xu.occupancy, sampling=w.h)
        delta = np.minimum(delta, np.maximum(0.5 * dxu, w.h_min))
    st.delta = delta
    st.K_delta = inflate(K, delta)
    # constant radius: only boundary cells of K can be pushed out of K, and
    # shifts of U1_hat points must stay inside U1
    gap = 0.5 * (width - st.U1_hat_width)
    ring = K.boundary_cells()
    rho = min(float(np.min(0.5 * delta[ring])), gap)
    st.rho_o = np.full(w.shape, max(rho, 0.5 * w.h_min))
    st.reach_inflated = reach_inflate(sc.field, K, st.rho_o, sc.eps1, _reach_config(sc, st.dt))


def stage_barrier(sc, st: Stages) -> Stages:
    w = sc.window
    n = sc.numerics
    width = float(n["band_u1"] or 8 * w.h_max)
    eps2_min = float(np.min(sc.eps2.on_window(w)))
    retries = int(n["band_retries"])
    dt = float(n["dt"] or default_dt(sc.field, sc.eps2, w))
    for attempt in range(retries + 1):
        _timed(st, "bands", _band_setup, sc, st, width)
        horizon = float(n["horizon"] or 4 * width / eps2_min)
        q = ImpactQuery(dt=dt, horizon=horizon, n_random=int(n["n_random"]), seed=sc.seed)
        st.bhat = _timed(st, "time_to_impact", time_to_impact_field, st.U1,
                         st.reach_inflated.region, sc.field, sc.eps2, q)
        st.horizon = horizon
        if not st.bhat.clip_flags.any() or attempt == retries:
            break
        width *= 2
    st.BK = _timed(st, "extend", extend_barrier, st.bhat, st.U1, st.reach_inflated.region)
    return st


def stage_smooth(sc, st: Stages) -> Stages:
    n = sc.numerics
    st.rho2 = rho2_field(sc.eps2, st.rho_o, sc.window, scale=float(n["rho_scale"]))
    M = Mollifier(int(n["quadrature_radial"]), int(n["quadrature_angular"]))
    st.B = _timed(st, "smooth", smooth_barrier, st.BK, st.rho2, M)
    return st


def run_checks(sc, st: Stages, checks=None) -> dict:
    n = sc.numerics
    checks = tuple(checks or sc.checks)
    out = {}
    if "candidate" in checks:
        out["candidate"] = check_candidate(st.B, st.X0, st.Xu)
    if "consistency" in checks:
        out["consistency"] = check_consistency(st.B, st.reach.region, st.K_delta)
    if "separation" in checks:
        out["separation"] = check_separation(st.reach.region, st.Xu)
    if "c3" in checks:
        samples = boundary_samples(sc.window, st.B.values, st.B.gradient).restrict(st.U1_hat)
        if len(samples):
            out["c3"] = check_C3(st.B, sc.field, samples, n["c3_mode"], float(n["c3_tol"]))
        else:
            out["c3"] = Verdict("c3", UNRESOLVED, None, float(n["c3_tol"]),
                                {"samples": 0})
    if "c2" in checks:
        out["c2"] = _timed(st, "c2", check_C2, st.BK, sc.field, sc.eps2, st.U1,
                           int(n["c2_starts"]), dt=float(n["dt"] or default_dt(sc.field, sc.eps2, sc.window)),
                           horizon=st.horizon, n_random=int(n["n_random"]), seed=sc.seed)
    if "invariance" in checks:
        out["invariance"] = check_invariance_tangent(
            sc.halfspace, sc.field, sc.eps_bar, int(n["invariance_samples"]),
            int(n["invariance_directions"]), seed=sc.seed)
    if "simulate" in checks:
        out["simulate"] = _timed(st, "simulate", simulate_safety, sc.field, sc.eps_bar, st.X0,
                                 st.Xu, int(n["sim_solutions"]), float(n["sim_horizon"]),
                                 dt=n["sim_dt"], seed=sc.seed)
    return out


def _stage_summary(st: Stages) -> dict:
    d = {}
    if st.reach is not None:
        d["reach"] = {**st.reach.sidecar(), "cells": st.reach.region.cell_count}
    if st.reach_inflated is not None:
        d["reach_inflated"] = {**st.reach_inflated.sidecar(),
                               "cells": st.reach_inflated.region.cell_count}
    if st.U1 is not None:
        d["bands"] = {"u1_width": st.band_width, "u1_cells": st.U1.cell_count,
                      "u1_hat_cells": st.U1_hat.cell_count}
    if st.bhat is not None:
        d["barrier"] = {"horizon": st.horizon,
                        "clipped_band_cells": int(st.bhat.clip_flags.sum()),
                        "clipped_cells": int(st.BK.clip_flags.sum())}
    if st.B is not None:
        d["smooth"] = {"clipped_cells": int(st.B.clip_flags.sum())}
    return d


def edge_caveat(st: Stages) -> bool:
    flags = []
    for r in (st.reach, st.reach_inflated):
        if r is not None:
            flags.append(r.edge_truncated)
    return bool(any(flags))


def build_report(sc, st: Stages, verdicts: dict) -> CertificateReport:
    params = {
        "window": {"lo": list(sc.window.lo), "hi": list(sc.window.hi),
                   "cells": list(sc.window.cells)},
        "dt": st.dt,
        "numerics": {k: v for k, v in sorted(sc.numerics.items()) if v is not None},
    }
    return CertificateReport(sc.name, sc.digest(), sc.seed, verdicts, edge_caveat(st),
                             _stage_summary(st), params, st)


def certify_pipeline(sc, checks=None) -> CertificateReport:
    """Run every stage and every enabled check on a scenario."""
    st = stage_reach(sc)
    stage_barrier(sc, st)
    stage_smooth(sc, st)
    verdicts = run_checks(sc, st, checks)
    return build_report(sc, st, verdicts)
