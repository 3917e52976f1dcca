import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from incluse.grid import OutOfWindowError, Window
from incluse.inclusion import (
    BACKWARD,
    FORWARD,
    Margin,
    SelectionStrategy,
    ball_directions,
    bundle,
    bundle_many,
    bundle_strategies,
    constant_field,
    default_dt,
    eval_F,
    example1_field,
    field_from_dict,
    integrate,
    linear_field,
    minkowski_vertices,
    step_plan,
    table_field,
)
from incluse.regions import Disk

ZERO = Margin.constant(0.0)
LIN = linear_field(-np.eye(2))
EX1 = example1_field()


def test_eval_example1():
    np.testing.assert_array_equal(eval_F(EX1, (0.0, -1.0)), [[0.0, 1.0]])
    got = eval_F(EX1, (0.0, 1.0))
    assert {tuple(v) for v in got} == {(0.0, 1.0), (-1.0, 0.0)}


def test_eval_linear():
    np.testing.assert_array_equal(eval_F(LIN, (2.0, 0.0)), [[-2.0, 0.0]])


def test_field_dicts_round_trip():
    for F in (EX1, LIN, constant_field([[1.0, 0.0], [0.0, 1.0]])):
        G = field_from_dict(F.to_dict())
        pts = np.random.default_rng(0).uniform(-2, 2, (20, 2))
        np.testing.assert_array_equal(G.vertices(pts), F.vertices(pts))
    with pytest.raises(ValueError):
        field_from_dict({"name": "nope"})


def test_table_field_rows_and_default():
    F = table_field([(Disk((0, 0), 1.0), [[1.0, 0.0], [0.0, 1.0]])], [[0.0, -1.0]])
    inside = F.eval((0.1, 0.1))
    outside = F.eval((1.5, 0.0))
    assert {tuple(v) for v in inside} == {(1.0, 0.0), (0.0, 1.0)}
    np.testing.assert_array_equal(outside, [[0.0, -1.0]])
    G = field_from_dict(F.to_dict())
    np.testing.assert_array_equal(G.eval((1.5, 0.0)), outside)


def test_margin_constant_and_grid():
    assert Margin.constant(0.5)(np.zeros((3, 2))).tolist() == [0.5] * 3
    with pytest.raises(ValueError):
        Margin.constant(-1.0)
    w = Window((0, 0), (1, 1), (4, 4))
    vals = w.centers()[:, 0].reshape(w.shape)
    m = Margin.from_grid(w, vals)
    assert m.eval((0.5, 0.5)) == pytest.approx(0.5)
    assert m.eval((5.0, 0.5)) == pytest.approx(0.875)
    with pytest.raises(ValueError):
        Margin.from_grid(w, -vals)


# Minkowski vertices ----------------------------------------------------------


def test_minkowski_axis_directions():
    F = constant_field([[0.0, 1.0]])
    got = minkowski_vertices(F, Margin.constant(0.5), (0.0, 0.0), 4)
    want = [(0.5, 1.0), (0.0, 1.5), (-0.5, 1.0), (0.0, 0.5)]
    np.testing.assert_allclose(got, want, atol=1e-15)


def test_minkowski_example1_min_second_component():
    got = minkowski_vertices(EX1, Margin.constant(0.5), (0.3, -1.0), 1024)
    assert got[:, 1].min() == pytest.approx(0.5, abs=1e-12)


def test_minkowski_zero_margin_is_F():
    np.testing.assert_array_equal(minkowski_vertices(EX1, ZERO, (0.0, 1.0), 8),
                                  eval_F(EX1, (0.0, 1.0)))


def test_minkowski_rejects_few_directions():
    with pytest.raises(ValueError):
        minkowski_vertices(EX1, ZERO, (0.0, 0.0), 3)


@given(st.integers(4, 64), st.floats(0.0, 2.0))
def test_minkowski_vertices_on_ball_sphere(m, e):
    F = constant_field([[0.3, -0.2]])
    V = minkowski_vertices(F, Margin.constant(e), (0.0, 0.0), m)
    if e == 0:
        assert len(V) == 1
        return
    assert len(V) == m
    np.testing.assert_allclose(np.linalg.norm(V - [0.3, -0.2], axis=1), e, atol=1e-12)


def test_ball_directions_1d():
    np.testing.assert_array_equal(ball_directions(1, 16), [[1.0], [-1.0]])


# integration ------------------------------------------------------------------


def test_integrate_linear_decay():
    dt = 1e-3
    tr = integrate(LIN, ZERO, (2.0, 0.0), SelectionStrategy(), dt, math.log(2))
    np.testing.assert_allclose(tr.states[-1], [1.0, 0.0], atol=2 * dt)
    assert tr.times[-1] == pytest.approx(math.log(2))


def test_integrate_constant_field_exact():
    tr = integrate(constant_field([[1.0, 0.0]]), ZERO, (0.0, 0.0), SelectionStrategy(), 0.1, 1.0)
    np.testing.assert_allclose(tr.states[-1], [1.0, 0.0], atol=1e-14)


def test_integrate_example1_reaches_axis():
    tr = integrate(EX1, ZERO, (0.0, -1.0), SelectionStrategy("vertex", 0), 1e-3, 1.0)
    np.testing.assert_allclose(tr.states[-1], [0.0, 0.0], atol=1e-9)


def test_integrate_backward_reverses_time():
    tr = integrate(LIN, ZERO, (1.0, 0.0), SelectionStrategy(), 1e-4, 1.0, BACKWARD)
    assert tr.states[-1, 0] == pytest.approx(math.e, rel=1e-3)
    assert tr.signed_times[-1] == pytest.approx(-1.0)


def test_integrate_truncates_at_window_edge():
    w = Window((-1, -1), (1, 1), (10, 10))
    tr = integrate(constant_field([[1.0, 0.0]]), ZERO, (0.0, 0.0), SelectionStrategy(), 0.01, 5.0,
                   window=w)
    assert tr.truncated
    assert w.contains(tr.states).all()
    with pytest.raises(OutOfWindowError):
        integrate(LIN, ZERO, (3.0, 0.0), SelectionStrategy(), 0.01, 1.0, window=w)


def test_step_plan():
    dt, n = step_plan(0.3, 1.0)
    assert n == 4 and dt == pytest.approx(0.25)
    with pytest.raises(ValueError):
        step_plan(0.0, 1.0)


def test_default_dt():
    w = Window((-2, -2), (2, 2), (64, 64))
    dt = default_dt(LIN, Margin.constant(0.5), w)
    vmax = np.linalg.norm(w.centers(), axis=1).max() + 0.5
    assert dt == pytest.approx(w.h_min / (2 * vmax))


def test_strategy_validation():
    with pytest.raises(ValueError):
        SelectionStrategy("bogus")
    with pytest.raises(ValueError):
        SelectionStrategy(perturb="fixed")
    s = SelectionStrategy(perturb="fixed", perturb_direction=(3.0, 4.0))
    assert s.perturb_direction == pytest.approx((0.6, 0.8))


# bundles ----------------------------------------------------------------------


def test_bundle_vertex_count_example1():
    b = bundle(EX1, ZERO, (0.0, 1.0), 0, 0.01, 0.5)
    assert len(b) >= 2
    ends = {tuple(np.round(e, 9)) for e in b.endpoints()}
    assert (0.0, 1.5) in ends and (-0.5, 1.0) in ends


def test_bundle_endpoints_near_exponential():
    eps, T, dt = 0.1, 1.0, 1e-3
    x0 = np.array([1.5, -0.5])
    b = bundle(LIN, Margin.constant(eps), x0, 8, dt, T, seed=3)
    err = np.linalg.norm(b.endpoints() - math.exp(-T) * x0, axis=1)
    assert err.max() <= eps * T + 10 * dt


def test_bundle_determinism():
    a = bundle(EX1, Margin.constant(0.5), (0.2, 0.1), 32, 0.01, 1.0, seed=7)
    b = bundle(EX1, Margin.constant(0.5), (0.2, 0.1), 32, 0.01, 1.0, seed=7)
    for ta, tb in zip(a.trajectories, b.trajectories):
        np.testing.assert_array_equal(ta.states, tb.states)
    c = bundle(EX1, Margin.constant(0.5), (0.2, 0.1), 32, 0.01, 1.0, seed=8)
    assert any(not np.array_equal(ta.states, tc.states)
               for ta, tc in zip(a.trajectories, c.trajectories))


@given(st.integers(0, 2**31 - 1))
def test_velocities_stay_in_perturbed_hull(seed):
    eps = 0.4
    strategies = bundle_strategies(EX1, 3, seed)
    starts = np.tile([0.0, -0.5], (len(strategies), 1))
    trajs = bundle_many(EX1, Margin.constant(eps), starts, strategies, 0.01, 0.3)
    for tr in trajs:
        v = np.diff(tr.states, axis=0) / tr.dt
        below = tr.states[:-1, 1] < 0
        # below the axis F = {(0, 1)}
        assert np.all(np.linalg.norm(v[below] - [0.0, 1.0], axis=1) <= eps + 1e-9)


def test_bundle_many_matches_integrate():
    strategies = bundle_strategies(LIN, 2, seed=1)
    starts = np.tile([1.0, 0.5], (len(strategies), 1))
    eps = Margin.constant(0.2)
    trajs = bundle_many(LIN, eps, starts, strategies, 0.01, 0.5, FORWARD)
    for s, tr in zip(strategies, trajs):
        one = integrate(LIN, eps, (1.0, 0.5), s, 0.01, 0.5)
        np.testing.assert_allclose(tr.states, one.states, atol=1e-14)


def test_bundle_spread_grows_with_margin():
    x0, dt, T = (1.0, 0.5), 1e-2, 1.0
    small = bundle(LIN, Margin.constant(0.05), x0, 8, dt, T, seed=3).endpoints()
    big = bundle(LIN, Margin.constant(0.3), x0, 8, dt, T, seed=3).endpoints()
    centre = math.exp(-T) * np.asarray(x0)
    assert np.linalg.norm(big - centre, axis=1).max() > np.linalg.norm(small - centre, axis=1).max()
    # endpoints of the small bundle sit inside the hull of the large one up to O(dt)
    from scipy.spatial import Delaunay

    hull = Delaunay(big)
    near = np.array([np.min(np.linalg.norm(big - p, axis=1)) for p in small])
    assert np.all((hull.find_simplex(small) >= 0) | (near <= 2 * dt))


def test_zero_margin_singleton_bundle_coincides():
    b = bundle(LIN, ZERO, (1.0, -0.5), 6, 1e-2, 1.0, seed=9)
    first = b.trajectories[0].states
    for tr in b.trajectories[1:]:
        np.testing.assert_allclose(tr.states, first, atol=1e-14)


def test_backward_increments_in_negated_field():
    tr = integrate(LIN, ZERO, (0.5, 0.2), SelectionStrategy(), 1e-3, 1.0, BACKWARD)
    v = np.diff(tr.states, axis=0) / tr.dt
    # reversed time: increments are +x rather than -x
    np.testing.assert_allclose(v, tr.states[:-1], atol=1e-12)
    np.testing.assert_allclose(tr.states[-1], math.e * np.array([0.5, 0.2]), rtol=1e-3)
