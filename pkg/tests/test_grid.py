import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from incluse.grid import GridSpline, Window, interpolate


def test_window_geometry():
    w = Window((-1.0, 0.0), (1.0, 4.0), (4, 8))
    assert w.shape == (4, 8)
    assert w.size == 32
    np.testing.assert_allclose(w.h, [0.5, 0.5])
    np.testing.assert_allclose(w.axes()[0], [-0.75, -0.25, 0.25, 0.75])
    c = w.centers()
    assert c.shape == (32, 2)
    np.testing.assert_allclose(c[1], [-0.75, 0.75])
    assert w.flat_index(c).tolist() == list(range(32))


def test_window_scalar_cells_broadcast():
    assert Window((0, 0), (1, 1), 10).cells == (10, 10)


@pytest.mark.parametrize("lo,hi,cells", [((0, 0), (0, 1), (4, 4)), ((0,), (1,), (1,)),
                                          ((0, 0, 0), (1, 1, 1), (2, 2, 2))])
def test_window_rejects_bad_input(lo, hi, cells):
    with pytest.raises(ValueError):
        Window(lo, hi, cells)


def test_contains_and_locate_clip():
    w = Window((0, 0), (1, 1), (10, 10))
    assert w.contains([[0.5, 0.5], [1.0, 1.0]]).all()
    assert not w.contains([[1.01, 0.5]])[0]
    assert w.locate([[1.0, 1.0]]).tolist() == [[9, 9]]


def test_refined():
    w = Window((0, 0), (1, 1), (10, 10)).refined(3)
    assert w.cells == (30, 30)


@given(a=st.floats(-3, 3), b=st.floats(-3, 3), c=st.floats(-3, 3))
def test_interpolate_reproduces_affine(a, b, c):
    w = Window((-1, -1), (1, 1), (9, 7))
    vals = (a * w.centers()[:, 0] + b * w.centers()[:, 1] + c).reshape(w.shape)
    pts = np.random.default_rng(0).uniform(-0.8, 0.8, (50, 2))
    v, g = interpolate(w, vals, pts, gradient=True)
    np.testing.assert_allclose(v, a * pts[:, 0] + b * pts[:, 1] + c, atol=1e-10)
    np.testing.assert_allclose(g, np.tile([a, b], (50, 1)), atol=1e-9)


def test_interpolate_clamps_outside_centers():
    w = Window((0, 0), (1, 1), (4, 4))
    vals = w.centers()[:, 0].reshape(w.shape)
    v, g = interpolate(w, vals, [[0.99, 0.5]], gradient=True)
    assert v[0] == pytest.approx(0.875)
    assert g[0, 0] == 0.0


def test_interpolate_1d():
    w = Window((0,), (1,), (5,))
    vals = 2 * w.axes()[0]
    assert interpolate(w, vals, [[0.5]])[0] == pytest.approx(1.0)


def test_grid_spline_exact_on_cubics():
    w = Window((-1, -1), (1, 1), (12, 12))
    c = w.centers()
    f = lambda p: p[:, 0] ** 3 - 2 * p[:, 0] * p[:, 1] + p[:, 1] ** 2
    S = GridSpline(w, f(c).reshape(w.shape))
    pts = np.random.default_rng(1).uniform(-0.8, 0.8, (40, 2))
    np.testing.assert_allclose(S(pts), f(pts), atol=1e-10)
    grad = np.stack([3 * pts[:, 0] ** 2 - 2 * pts[:, 1], -2 * pts[:, 0] + 2 * pts[:, 1]], axis=1)
    np.testing.assert_allclose(S.gradient(pts), grad, atol=1e-9)
