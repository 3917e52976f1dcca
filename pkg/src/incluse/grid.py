"""Uniform cell grids over a rectangular window and interpolation on them."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import RectBivariateSpline


class OutOfWindowError(ValueError):
    """A query point lies outside the computational window."""


@dataclass(frozen=True)
class Window:
    """Axis-aligned box split into ``cells`` uniform cells per axis.

    Cell ``i`` along axis ``a`` has its center at ``lo[a] + (i + 0.5) * h[a]``.
    Only one- and two-dimensional windows are supported.
    """

    lo: tuple
    hi: tuple
    cells: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lo))
        hi = tuple(float(v) for v in np.atleast_1d(self.hi))
        cells = np.atleast_1d(self.cells).astype(int)
        if cells.size == 1 and len(lo) > 1:
            cells = np.repeat(cells, len(lo))
        cells = tuple(int(c) for c in cells)
        if not (len(lo) == len(hi) == len(cells)):
            raise ValueError("lo, hi and cells must have the same length")
        if len(lo) not in (1, 2):
            raise ValueError("only 1-D and 2-D windows are supported")
        if any(a >= b for a, b in zip(lo, hi)):
            raise ValueError("window requires lo < hi componentwise")
        if any(c < 2 for c in cells):
            raise ValueError("window needs at least two cells per axis")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "cells", cells)

    @property
    def ndim(self) -> int:
        return len(self.lo)

    @property
    def shape(self) -> tuple:
        return self.cells

    @property
    def size(self) -> int:
        return int(np.prod(self.cells))

    @property
    def h(self) -> np.ndarray:
        return (np.asarray(self.hi) - np.asarray(self.lo)) / np.asarray(self.cells)

    @property
    def h_max(self) -> float:
        return float(self.h.max())

    @property
    def h_min(self) -> float:
        return float(self.h.min())

    @property
    def cell_diagonal(self) -> float:
        return float(np.linalg.norm(self.h))

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(np.asarray(self.hi) - np.asarray(self.lo)))

    def axes(self) -> list:
        """Cell-center coordinates along each axis."""
        return [
            lo + (np.arange(c) + 0.5) * h
            for lo, c, h in zip(self.lo, self.cells, self.h)
        ]

    def centers(self) -> np.ndarray:
        """All cell centers, shape ``(size, ndim)``, C (row-major) order."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def contains(self, pts, tol: float = 1e-12) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        lo = np.asarray(self.lo) - tol
        hi = np.asarray(self.hi) + tol
        return np.all((pts >= lo) & (pts <= hi), axis=1)

    def interpolates(self, pts, tol: float = 1e-12) -> np.ndarray:
        """True where bilinear lookups are unclamped (inside the hull of cell centers)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        half = 0.5 * np.asarray(self.h)
        lo = np.asarray(self.lo) + half - tol
        hi = np.asarray(self.hi) - half + tol
        return np.all((pts >= lo) & (pts <= hi), axis=1)

    def locate(self, pts) -> np.ndarray:
        """Multi-index ``(N, ndim)`` of the cell containing each point (clipped)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        idx = np.floor((pts - np.asarray(self.lo)) / self.h).astype(np.int64)
        return np.clip(idx, 0, np.asarray(self.cells) - 1)

    def flat_index(self, pts) -> np.ndarray:
        idx = self.locate(pts)
        return np.ravel_multi_index(tuple(idx.T), self.cells)

    def refined(self, factor: int) -> "Window":
        return Window(self.lo, self.hi, tuple(c * factor for c in self.cells))


def interpolate(window: Window, values: np.ndarray, pts, *, gradient: bool = False):
    """Multilinear interpolation of cell-center samples.

    Points beyond the outermost cell centers are clamped, so the value there
    is the nearest-edge extrapolation and the clamped gradient component is 0.

    Returns values ``(N,)``, or ``(values, grad)`` with ``grad`` of shape
    ``(N, ndim)`` when ``gradient`` is set.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    n = window.ndim
    cells = np.asarray(window.cells)
    h = window.h
    u = (pts - np.asarray(window.lo)) / h - 0.5
    inside = (u >= 0) & (u <= cells - 1)
    u = np.clip(u, 0, cells - 1)
    i0 = np.minimum(np.floor(u).astype(np.int64), cells - 2)
    f = u - i0
    out = np.zeros(len(pts))
    grad = np.zeros((len(pts), n)) if gradient else None
    for corner in itertools.product((0, 1), repeat=n):
        idx = tuple(i0[:, a] + corner[a] for a in range(n))
        v = values[idx]
        factors = [f[:, a] if corner[a] else 1.0 - f[:, a] for a in range(n)]
        out += np.prod(factors, axis=0) * v
        if gradient:
            for b in range(n):
                d = np.ones(len(pts)) if corner[b] else -np.ones(len(pts))
                for a in range(n):
                    if a != b:
                        d = d * factors[a]
                grad[:, b] += d * v / h[b]
    if gradient:
        grad[~inside] = 0.0
        return out, grad
    return out


class GridSpline:
    """C2 bicubic interpolant of cell-center samples with analytic gradient.

    Used for fields that must be differentiable between grid nodes.
    """

    def __init__(self, window: Window, values: np.ndarray):
        if window.ndim != 2:
            raise ValueError("GridSpline is two-dimensional")
        self.window = window
        self.values = np.asarray(values, dtype=float).reshape(window.shape)
        xs, ys = window.axes()
        self._spline = RectBivariateSpline(xs, ys, self.values, kx=3, ky=3, s=0)
        self._lo = np.array([xs[0], ys[0]])
        self._hi = np.array([xs[-1], ys[-1]])

    def __call__(self, pts) -> np.ndarray:
        pts = self._clamp(pts)
        return self._spline.ev(pts[:, 0], pts[:, 1])

    def gradient(self, pts) -> np.ndarray:
        raw = np.atleast_2d(np.asarray(pts, dtype=float))
        pts = self._clamp(raw)
        g = np.stack(
            [
                self._spline.ev(pts[:, 0], pts[:, 1], dx=1),
                self._spline.ev(pts[:, 0], pts[:, 1], dy=1),
            ],
            axis=-1,
        )
        g[(raw < self._lo) | (raw > self._hi)] = 0.0
        return g

    def _clamp(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return np.clip(pts, self._lo, self._hi)
