"""Grid-backed closed sets and the geometric operators the constructions use.

A :class:`Region` is a closed subset of a :class:`~incluse.grid.Window`
stored as cell occupancy. Its boundary is the set of face midpoints between
occupied and free neighbouring cells; the signed distance of every cell is
the exact Euclidean distance from the cell center to the nearest such
point, negative inside.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .grid import OutOfWindowError, Window, interpolate


class RegionError(ValueError):
    """Invalid geometric operation on a region."""


_MAGIC = b"INCR"


class Region:
    """Closed set on a window, immutable after construction.

    Attributes:
        window: the grid.
        occupancy: boolean array of shape ``window.shape``.
        sdist: signed distance per cell (negative inside, ``±inf`` when the
            region has no boundary inside the window).
        edge_flag: True when occupied cells touch the window boundary.
    """

    def __init__(self, window: Window, occupancy):
        occ = np.asarray(occupancy, dtype=bool).reshape(window.shape).copy()
        occ.setflags(write=False)
        self.window = window
        self.occupancy = occ
        pts, inside, outside = _boundary_faces(window, occ)
        self.boundary_points = pts
        self.boundary_inside = inside
        self.boundary_outside = outside
        self._tree = cKDTree(pts) if len(pts) else None
        if self._tree is None:
            sd = np.where(occ, -np.inf, np.inf)
        else:
            d, _ = self._tree.query(window.centers())
            sd = np.where(occ.ravel(), -d, d).reshape(window.shape)
        sd.setflags(write=False)
        self.sdist = sd
        self.edge_flag = _touches_edge(occ)

    # construction -----------------------------------------------------------

    @classmethod
    def from_sdf(cls, window: Window, sdf) -> "Region":
        """Occupy every cell whose center satisfies ``sdf(center) <= 0``."""
        return cls(window, np.asarray(sdf(window.centers())) <= 0)

    @classmethod
    def from_cells(cls, window: Window, flat_indices) -> "Region":
        occ = np.zeros(window.size, dtype=bool)
        occ[np.asarray(flat_indices, dtype=np.int64)] = True
        return cls(window, occ)

    @classmethod
    def empty(cls, window: Window) -> "Region":
        return cls(window, np.zeros(window.shape, dtype=bool))

    # queries ------------------------------------------------------------------

    @property
    def is_empty(self) -> bool:
        return not self.occupancy.any()

    @property
    def has_boundary(self) -> bool:
        return self._tree is not None

    @property
    def cell_count(self) -> int:
        return int(self.occupancy.sum())

    def cell_centers(self) -> np.ndarray:
        return self.window.centers()[self.occupancy.ravel()]

    def contains(self, pts) -> np.ndarray:
        """Occupancy of the cell holding each point; False outside the window."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        inside = self.window.contains(pts)
        flat = self.window.flat_index(pts)
        return inside & self.occupancy.ravel()[flat]

    def signed_distance(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if not self.window.contains(pts).all():
            raise OutOfWindowError("signed distance queried outside the window")
        if self._tree is None:
            return np.where(self.contains(pts), -np.inf, np.inf)
        return interpolate(self.window, self.sdist, pts)

    def sdist_gradient(self, pts) -> np.ndarray:
        """Gradient of the interpolated signed distance (clamped at the edge)."""
        if self._tree is None:
            return np.zeros((len(np.atleast_2d(pts)), self.window.ndim))
        _, g = interpolate(self.window, self.sdist, pts, gradient=True)
        return g

    def distance_to_boundary(self, pts) -> np.ndarray:
        if self._tree is None:
            raise RegionError("region has no boundary inside the window")
        d, _ = self._tree.query(np.atleast_2d(pts))
        return d

    def boundary_cells(self) -> np.ndarray:
        """Occupied cells with at least one free face-neighbour."""
        mask = np.zeros(self.window.size, dtype=bool)
        mask[self.boundary_inside] = True
        return mask.reshape(self.window.shape)

    # set algebra ---------------------------------------------------------------

    def _check(self, other: "Region"):
        if other.window != self.window:
            raise RegionError("regions live on different windows")

    def union(self, other: "Region") -> "Region":
        self._check(other)
        return Region(self.window, self.occupancy | other.occupancy)

    def intersection(self, other: "Region") -> "Region":
        self._check(other)
        return Region(self.window, self.occupancy & other.occupancy)

    def difference(self, other: "Region") -> "Region":
        self._check(other)
        return Region(self.window, self.occupancy & ~other.occupancy)

    def complement(self) -> "Region":
        return Region(self.window, ~self.occupancy)

    def interior(self) -> "Region":
        """One-cell erosion; cells beyond the window count as occupied."""
        st = ndimage.generate_binary_structure(self.window.ndim, self.window.ndim)
        occ = ndimage.binary_erosion(self.occupancy, structure=st, border_value=1)
        return Region(self.window, occ)

    def dilate(self, rings: int = 1) -> "Region":
        st = ndimage.generate_binary_structure(self.window.ndim, self.window.ndim)
        occ = ndimage.binary_dilation(self.occupancy, structure=st, iterations=rings)
        return Region(self.window, occ)

    def issubset(self, other: "Region") -> bool:
        self._check(other)
        return bool(np.all(~self.occupancy | other.occupancy))

    def __eq__(self, other):
        if not isinstance(other, Region):
            return NotImplemented
        return self.window == other.window and np.array_equal(
            self.occupancy, other.occupancy
        )

    def __hash__(self):
        return hash((self.window, self.occupancy.tobytes()))

    def __repr__(self):
        return f"Region(cells={self.cell_count}/{self.window.size}, edge={self.edge_flag})"

    # serialization ---------------------------------------------------------------

    def to_csv(self) -> str:
        """Cell centers, signed distance and occupancy, one row per cell."""
        names = ["x", "y"][: self.window.ndim]
        buf = io.StringIO()
        buf.write(",".join(names + ["sdist", "occupied"]) + "\n")
        c = self.window.centers()
        sd = self.sdist.ravel()
        occ = self.occupancy.ravel()
        for row, s, o in zip(c, sd, occ):
            buf.write(",".join(f"{v:.12g}" for v in row))
            buf.write(f",{s:.12g},{int(o)}\n")
        return buf.getvalue()

    def to_bytes(self) -> bytes:
        """Compact occupancy dump.

        Layout (little-endian): magic ``INCR``, u8 version, u8 ndim,
        f64 lo[ndim], f64 hi[ndim], u32 cells[ndim], then the occupancy
        bits in row-major order packed with :func:`numpy.packbits`.
        """
        n = self.window.ndim
        head = _MAGIC + struct.pack("<BB", 1, n)
        head += struct.pack(f"<{n}d", *self.window.lo)
        head += struct.pack(f"<{n}d", *self.window.hi)
        head += struct.pack(f"<{n}I", *self.window.cells)
        return head + np.packbits(self.occupancy.ravel()).tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Region":
        if data[:4] != _MAGIC:
            raise RegionError("not an occupancy dump")
        version, n = struct.unpack_from("<BB", data, 4)
        if version != 1:
            raise RegionError(f"unsupported dump version {version}")
        off = 6
        lo = struct.unpack_from(f"<{n}d", data, off)
        off += 8 * n
        hi = struct.unpack_from(f"<{n}d", data, off)
        off += 8 * n
        cells = struct.unpack_from(f"<{n}I", data, off)
        off += 4 * n
        window = Window(lo, hi, cells)
        bits = np.unpackbits(np.frombuffer(data[off:], dtype=np.uint8))
        return cls(window, bits[: window.size].astype(bool))


def _boundary_faces(window: Window, occ: np.ndarray):
    centers = window.centers()
    flat = np.arange(window.size).reshape(window.shape)
    pts, inside, outside = [], [], []
    for a in range(window.ndim):
        s0 = [slice(None)] * window.ndim
        s1 = [slice(None)] * window.ndim
        s0[a] = slice(0, -1)
        s1[a] = slice(1, None)
        o0, o1 = occ[tuple(s0)], occ[tuple(s1)]
        diff = o0 != o1
        i0 = flat[tuple(s0)][diff]
        i1 = flat[tuple(s1)][diff]
        pts.append(0.5 * (centers[i0] + centers[i1]))
        first_in = o0[diff]
        inside.append(np.where(first_in, i0, i1))
        outside.append(np.where(first_in, i1, i0))
    return (
        np.concatenate(pts) if pts else np.zeros((0, window.ndim)),
        np.concatenate(inside).astype(np.int64),
        np.concatenate(outside).astype(np.int64),
    )


def _touches_edge(occ: np.ndarray) -> bool:
    for a in range(occ.ndim):
        if np.take(occ, 0, axis=a).any() or np.take(occ, -1, axis=a).any():
            return True
    return False


# -----------------------------------------------------------------------------
# Half-spaces and shape primitives
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class HalfSpace:
    """Closed half-space ``{x : <normal, x> >= offset}`` (normal points inward)."""

    normal: tuple
    offset: float = 0.0

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        norm = np.linalg.norm(n)
        if norm == 0:
            raise ValueError("half-space normal must be nonzero")
        object.__setattr__(self, "normal", tuple(n / norm))
        object.__setattr__(self, "offset", float(self.offset))

    def sdf(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return self.offset - pts @ np.asarray(self.normal)

    def contains(self, pts) -> np.ndarray:
        return self.sdf(pts) <= 0

    def project(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        s = np.maximum(self.sdf(pts), 0.0)
        return pts + s[:, None] * np.asarray(self.normal)


class Shape:
    """Analytic closed set given by a signed distance (or a bound on it)."""

    complement = False

    def _sdf(self, pts):
        raise NotImplementedError

    def sdf(self, pts) -> np.ndarray:
        d = self._sdf(np.atleast_2d(np.asarray(pts, dtype=float)))
        return -d if self.complement else d

    def to_region(self, window: Window) -> Region:
        return Region.from_sdf(window, self.sdf)

    def to_dict(self) -> dict:
        raise NotImplementedError


class Disk(Shape):
    def __init__(self, center, radius, complement=False):
        self.center = tuple(float(c) for c in center)
        self.radius = float(radius)
        self.complement = bool(complement)
        if self.radius <= 0:
            raise ValueError("disk radius must be positive")

    def _sdf(self, pts):
        return np.linalg.norm(pts - np.asarray(self.center), axis=1) - self.radius

    def to_dict(self):
        return {"shape": "disk", "center": list(self.center), "radius": self.radius,
                "complement": self.complement}


class Box(Shape):
    def __init__(self, lo, hi, complement=False):
        self.lo = tuple(float(v) for v in lo)
        self.hi = tuple(float(v) for v in hi)
        self.complement = bool(complement)
        if any(a > b for a, b in zip(self.lo, self.hi)):
            raise ValueError("box requires lo <= hi")

    def _sdf(self, pts):
        c = 0.5 * (np.asarray(self.lo) + np.asarray(self.hi))
        r = 0.5 * (np.asarray(self.hi) - np.asarray(self.lo))
        q = np.abs(pts - c) - r
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        return outside + np.minimum(q.max(axis=1), 0.0)

    def to_dict(self):
        return {"shape": "box", "lo": list(self.lo), "hi": list(self.hi),
                "complement": self.complement}


class HalfPlane(Shape):
    def __init__(self, normal, offset=0.0, complement=False):
        self.space = HalfSpace(tuple(normal), offset)
        self.complement = bool(complement)

    def _sdf(self, pts):
        return self.space.sdf(pts)

    def to_dict(self):
        return {"shape": "halfplane", "normal": list(self.space.normal),
                "offset": self.space.offset, "complement": self.complement}


class Union(Shape):
    def __init__(self, parts, complement=False):
        self.parts = list(parts)
        self.complement = bool(complement)
        if not self.parts:
            raise ValueError("union needs at least one part")

    def _sdf(self, pts):
        return np.min([p.sdf(pts) for p in self.parts], axis=0)

    def to_dict(self):
        return {"shape": "union", "parts": [p.to_dict() for p in self.parts],
                "complement": self.complement}


def shape_from_dict(spec: dict) -> Shape:
    kind = spec.get("shape")
    comp = bool(spec.get("complement", False))
    if kind == "disk":
        return Disk(spec["center"], spec["radius"], comp)
    if kind == "box":
        return Box(spec["lo"], spec["hi"], comp)
    if kind == "halfplane":
        return HalfPlane(spec["normal"], spec.get("offset", 0.0), comp)
    if kind == "union":
        return Union([shape_from_dict(p) for p in spec["parts"]], comp)
    raise ValueError(f"unknown shape {kind!r}")


# -----------------------------------------------------------------------------
# Operators
# -----------------------------------------------------------------------------


def signed_distance(R: Region, x) -> float:
    """Bilinearly interpolated signed distance of a single point."""
    return float(R.signed_distance(np.atleast_2d(x))[0])


def projection_tolerance(window: Window) -> float:
    return 1.5 * window.h_max


def project(x, R: Region, tol: float | None = None) -> np.ndarray:
    """Nearest boundary points of ``R`` from ``x``, one per cluster.

    Boundary points within ``dist(x, R) + tol`` are grouped into clusters of
    mutually adjacent points; each cluster contributes its point nearest to
    ``x``. Points inside ``R`` project to themselves.
    """
    if R.is_empty:
        raise RegionError("cannot project onto an empty region")
    x = np.asarray(x, dtype=float).ravel()
    if R.contains(x)[0]:
        return x[None, :].copy()
    if not R.has_boundary:
        raise RegionError("region has no boundary inside the window")
    tol = projection_tolerance(R.window) if tol is None else tol
    d, _ = R._tree.query(x)
    idx = np.asarray(R._tree.query_ball_point(x, d + tol), dtype=np.int64)
    idx.sort()
    cand = R.boundary_points[idx]
    dist = np.linalg.norm(cand - x, axis=1)
    link = 1.5 * R.window.cell_diagonal
    pairs = cKDTree(cand).query_pairs(link, output_type="ndarray")
    m = len(cand)
    graph = coo_matrix(
        (np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])) if len(pairs) else
        (np.zeros(0), (np.zeros(0, int), np.zeros(0, int))),
        shape=(m, m),
    )
    n_comp, labels = connected_components(graph, directed=False)
    reps = []
    for c in range(n_comp):
        members = np.flatnonzero(labels == c)
        reps.append(cand[members[np.argmin(dist[members])]])
    reps = np.array(reps)
    order = np.lexsort(reps.T[::-1])
    return reps[order]


def _cell_field(window: Window, field) -> np.ndarray:
    if callable(field):
        vals = np.asarray(field(window.centers()), dtype=float)
    else:
        vals = np.asarray(field, dtype=float)
    return np.broadcast_to(vals, (window.size,)).reshape(window.shape) if vals.ndim == 0 \
        else vals.reshape(window.shape)


def inflate(R: Region, delta) -> Region:
    """Grid Minkowski inflation ``∪_{x∈R} (x + delta(x)·ball)``.

    A cell joins the result when its center lies within ``delta(k)`` of the
    center of some cell ``k`` of ``R``. ``delta`` is a scalar, a per-cell
    array or a callable on points.
    """
    w = R.window
    if R.is_empty:
        return R
    d = _cell_field(w, delta)
    occ = R.occupancy
    if np.any(d[occ] <= 0) or not np.all(np.isfinite(d[occ])):
        raise RegionError("inflation radius must be positive and finite on the region")
    slack = 1e-9 * w.h_min
    dv = d[occ]
    if np.ptp(dv) == 0:
        dist = ndimage.distance_transform_edt(~occ, sampling=w.h)
        return Region(w, dist <= dv[0] + slack)
    # only cells whose ball can leave R matter
    depth = -R.sdist[occ]
    reach = dv >= depth - w.cell_diagonal
    src = w.centers()[occ.ravel()][reach]
    rad = dv[reach] + slack
    out = occ.ravel().copy()
    if len(src):
        tree = cKDTree(w.centers())
        for hits in tree.query_ball_point(src, rad):
            out[hits] = True
    return Region(w, out)


def boundary_band(R: Region, width: float) -> Region:
    """Closed band ``{x : |sdist_R(x)| <= width}``."""
    if width < 2 * R.window.h_max:
        raise RegionError("band width must be at least two cells")
    if not R.has_boundary:
        raise RegionError("region has no boundary inside the window")
    return Region(R.window, np.abs(R.sdist) <= width)


def margin_inside(K: Region, U: Region) -> np.ndarray:
    """Per-cell radius ``delta = max(dist(x, complement U) / 2, h)``.

    Guarantees ``inflate(K, delta) ⊆ U`` on the grid. Requires ``K`` to sit
    in the one-cell interior of ``U``.
    """
    w = K.window
    if U.window != w:
        raise RegionError("regions live on different windows")
    if not K.issubset(U.interior()):
        raise RegionError("K is not contained in the interior of U")
    if U.occupancy.all():
        dist = np.full(w.shape, w.diameter)
    else:
        dist = ndimage.distance_transform_edt(U.occupancy, sampling=w.h)
    return np.maximum(0.5 * dist, w.h_min)


def tangent_cone(H: HalfSpace, y, tol: float = 1e-9):
    """Predicate ``v -> <normal, v> >= 0`` of the tangent cone at ``y ∈ ∂H``."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if abs(float(H.sdf(y)[0])) > tol:
        raise RegionError("point is not on the half-space boundary")
    normal = np.asarray(H.normal)

    def contains(v) -> bool | np.ndarray:
        v = np.asarray(v, dtype=float)
        res = v @ normal >= 0
        return bool(res) if np.ndim(res) == 0 else res

    return contains
