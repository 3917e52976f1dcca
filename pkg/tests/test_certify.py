import json
import math

import numpy as np
import pytest

from incluse.barrier import BarrierField
from incluse.certify import (
    FAIL,
    PASS,
    UNRESOLVED,
    UNTESTED,
    BoundarySampleSet,
    CertificateReport,
    Verdict,
    _jsonable,
    boundary_samples,
    check_C2,
    check_C3,
    check_candidate,
    check_consistency,
    check_invariance_tangent,
    check_separation,
    simulate_safety,
)
from incluse.grid import Window
from incluse.inclusion import Margin, constant_field, example1_field, linear_field
from incluse.regions import Box, Disk, HalfPlane, HalfSpace, Region, RegionError, boundary_band

W = Window((-2.0, -2.0), (2.0, 2.0), (96, 96))
H = W.h_max
LIN = linear_field(-np.eye(2))
EX1 = example1_field()
K = Disk((0, 0), 1.0).to_region(W)
X0 = Disk((0, 0), 0.3).to_region(W)
XU = Disk((0, 0), 1.6, complement=True).to_region(W)


class Analytic:
    """Closed-form barrier with values on ``W`` and an exact gradient."""

    def __init__(self, fn, grad):
        self.fn, self.grad = fn, grad
        self.values = fn(W.centers()).reshape(W.shape)

    def __call__(self, pts):
        return self.fn(np.atleast_2d(pts))

    def gradient(self, pts):
        return self.grad(np.atleast_2d(pts))


RADIUS = Analytic(lambda p: np.linalg.norm(p, axis=1) - 1.0,
                  lambda p: p / np.linalg.norm(p, axis=1, keepdims=True))
LOG_RADIUS = Analytic(lambda p: np.log(np.linalg.norm(p, axis=1)),
                      lambda p: p / np.sum(p**2, axis=1, keepdims=True))


# candidate and consistency ----------------------------------------------------


def test_candidate_zero_barrier_fails():
    v = check_candidate(BarrierField(W, np.zeros(W.shape)), X0, XU)
    assert v.status == FAIL
    assert v.details["min_on_unsafe"] == 0.0


def test_candidate_signed_distance_passes():
    v = check_candidate(BarrierField(W, K.sdist), X0, XU)
    assert v.status == PASS and v.value > 0


def test_candidate_needs_sets():
    with pytest.raises(RegionError):
        check_candidate(BarrierField(W, K.sdist), Region.empty(W), XU)


def test_consistency():
    K_delta = K.dilate(2)
    assert check_consistency(BarrierField(W, K.sdist), K, K_delta).status == PASS
    v = check_consistency(BarrierField(W, K.sdist - 0.5), K, K_delta)
    assert v.status == FAIL and v.details["violations_off_K_delta"] > 0


# boundary samples and C3 ------------------------------------------------------


def test_boundary_samples_lie_on_the_circle():
    s = boundary_samples(W, RADIUS.values, RADIUS.gradient)
    assert len(s) > 100
    np.testing.assert_allclose(np.linalg.norm(s.points, axis=1), 1.0, atol=H ** 2)
    unit = s.points / np.linalg.norm(s.points, axis=1, keepdims=True)
    np.testing.assert_allclose(s.normals, unit, atol=1e-12)


def test_boundary_samples_restrict():
    s = boundary_samples(W, RADIUS.values)
    upper = s.restrict(HalfPlane((0, 1), 0.0).to_region(W))
    assert 0 < len(upper) < len(s)
    assert np.all(upper.points[:, 1] >= -H)


def test_c3_inward_linear_field_rate_one():
    s = boundary_samples(W, LOG_RADIUS.values, LOG_RADIUS.gradient)
    v = check_C3(LOG_RADIUS, LIN, s)
    # <x/|x|², -x> = -1 exactly
    assert v.status == PASS and v.value == pytest.approx(-1.0, abs=1e-12)


def test_c3_outward_field_fails():
    s = boundary_samples(W, RADIUS.values, RADIUS.gradient)
    v = check_C3(RADIUS, linear_field(np.eye(2)), s, mode="strict-negative")
    assert v.status == FAIL and v.value > 0


def test_c3_zero_field_fails_strict():
    s = boundary_samples(W, RADIUS.values, RADIUS.gradient)
    v = check_C3(RADIUS, constant_field([[0.0, 0.0]]), s, mode="strict-negative")
    assert v.status == FAIL and v.value == 0.0


def test_c3_margin_term():
    s = boundary_samples(W, LOG_RADIUS.values, LOG_RADIUS.gradient)
    v = check_C3(LOG_RADIUS, LIN, s, eps=Margin.constant(0.05))
    assert v.value == pytest.approx(-0.95, abs=1e-3)


def test_c3_errors():
    with pytest.raises(ValueError):
        check_C3(RADIUS, LIN, boundary_samples(W, RADIUS.values), mode="bogus")
    with pytest.raises(RegionError):
        check_C3(RADIUS, LIN, BoundarySampleSet(np.zeros((0, 2)), np.zeros((0, 2))))


# C2 ---------------------------------------------------------------------------


U1 = boundary_band(K, 0.3)


def test_c2_exact_time_to_impact_passes():
    B = BarrierField(W, LOG_RADIUS.values)
    v = check_C2(B, LIN, Margin.constant(0.0), U1, 10, dt=1e-2, horizon=0.5)
    assert v.status == PASS and v.details["trajectories"] >= 10


def test_c2_negated_distance_fails():
    B = BarrierField(W, -K.sdist)
    v = check_C2(B, LIN, Margin.constant(0.05), U1, 10, dt=1e-2, horizon=0.5)
    assert v.status == FAIL and v.value > v.tolerance


def test_c2_no_starts_is_untested():
    v = check_C2(BarrierField(W, K.sdist), LIN, Margin.constant(0.0), U1, 0)
    assert v.status == UNTESTED and v.value is None


def test_c2_clipped_barrier_is_unresolved():
    flags = np.ones(W.shape, bool)
    B = BarrierField(W, LOG_RADIUS.values, flags)
    v = check_C2(B, LIN, Margin.constant(0.0), U1, 5, dt=1e-2, horizon=0.3)
    assert v.status == UNRESOLVED


# invariance -------------------------------------------------------------------


def test_invariance_example1_margin():
    v = check_invariance_tangent(HalfSpace((0, 1), 0.0), EX1, Margin.constant(0.5), 200, 1024)
    assert v.status == PASS and v.value == pytest.approx(0.5, abs=1e-9)


def test_invariance_example1_large_margin_fails():
    v = check_invariance_tangent(HalfSpace((0, 1), 0.0), EX1, Margin.constant(1.5), 200, 1024)
    assert v.status == FAIL and v.value == pytest.approx(-0.5, abs=1e-9)
    assert v.details["violations"] == 200


@pytest.mark.parametrize("c", [0.0, 0.4, -0.7])
def test_invariance_constant_field_along_normal(c):
    n = np.array([0.6, 0.8])
    v = check_invariance_tangent(HalfSpace(tuple(n), 0.3), constant_field([c * n]),
                                 Margin.constant(0.0), 50, 8)
    assert v.value == pytest.approx(c, abs=1e-12)
    assert v.status == (PASS if c >= 0 else FAIL)


def test_invariance_needs_samples():
    with pytest.raises(ValueError):
        check_invariance_tangent(HalfSpace((0, 1)), EX1, Margin.constant(0.5), 0, 8)


# separation -------------------------------------------------------------------


def test_separation_passes_with_gap():
    v = check_separation(K, XU)
    assert v.status == PASS and v.value == pytest.approx(0.6, abs=2 * H)


def test_separation_overlap_fails():
    v = check_separation(K, Disk((1.0, 0), 0.3).to_region(W))
    assert v.status == FAIL and v.value == 0.0 and v.details["overlap_cells"] > 0


def test_separation_touching_fails_with_note():
    right = Box((1.0, -2.0), (2.0, 2.0)).to_region(W)
    v = check_separation(K, right)
    assert v.status == FAIL and v.value <= 2 * H
    assert v.details["note"] == "unresolved at grid scale"


def test_separation_empty_unsafe_set():
    assert check_separation(K, Region.empty(W)).status == PASS


# simulation -------------------------------------------------------------------


def test_simulate_contracting_field_is_safe():
    v = simulate_safety(LIN, Margin.constant(0.1), X0, XU, 40, 2.0, dt=1e-2)
    assert v.status == PASS and v.value > 0
    assert v.details["entered"] == 0


def test_simulate_ball_flood_reaches_unsafe_set():
    v, trajs = simulate_safety(constant_field([[0.0, 0.0]]), Margin.constant(1.0), X0, XU, 20,
                               3.0, dt=1e-2, return_trajectories=True)
    assert v.status == FAIL and v.details["entered"] > 0
    assert len(trajs) == 20


def test_simulate_initial_set_inside_unsafe_set():
    v = simulate_safety(LIN, Margin.constant(0.1), K, Disk((0, 0), 0.5).to_region(W), 5, 1.0)
    assert v.status == FAIL and v.details["reason"] == "initial set meets unsafe set"


def test_simulate_is_deterministic():
    a = simulate_safety(EX1, Margin.constant(0.5), Box((-1, 0), (1, 0.05)).to_region(W),
                        HalfPlane((0, -1), 0.2).to_region(W), 30, 1.0, dt=1e-2, seed=4)
    b = simulate_safety(EX1, Margin.constant(0.5), Box((-1, 0), (1, 0.05)).to_region(W),
                        HalfPlane((0, -1), 0.2).to_region(W), 30, 1.0, dt=1e-2, seed=4)
    assert a == b


# reports ----------------------------------------------------------------------


def test_jsonable_handles_numpy_and_nonfinite():
    out = _jsonable({1: np.float64(2.5), "b": np.bool_(True), "n": np.int64(3),
                     "x": [math.inf, -math.inf, math.nan], "t": (1, 2)})
    assert out == {"1": 2.5, "b": True, "n": 3, "x": ["inf", "-inf", "nan"], "t": [1, 2]}
    json.dumps(out)


def test_report_status_precedence():
    def rep(*statuses):
        vs = {f"c{i}": Verdict(f"c{i}", s, 0.0, 0.0) for i, s in enumerate(statuses)}
        return CertificateReport("s", "d", 0, vs, False, {}, {})

    assert rep(PASS, PASS).status == PASS
    assert rep(PASS, UNRESOLVED).status == UNRESOLVED
    assert rep(UNRESOLVED, FAIL).status == FAIL


def test_report_json_is_stable():
    vs = {"candidate": Verdict("candidate", PASS, 0.25, 0.0, {"k": np.float32(1.5)})}
    r = CertificateReport("s", "abc", 3, vs, True, {}, {"dt": 0.01})
    d = json.loads(r.to_json())
    assert d["status"] == PASS and d["edge_caveat"] is True
    assert d["provenance"]["seed"] == 3 and d["provenance"]["scenario_sha256"] == "abc"
    assert d["checks"]["candidate"]["details"]["k"] == 1.5
    assert r.to_json() == r.to_json()


# full pipeline ----------------------------------------------------------------


def test_linear_pipeline_certifies(linear_run):
    _, report, _ = linear_run
    assert report.status == PASS
    assert set(report.verdicts) >= {"candidate", "c2", "c3", "separation", "simulate"}
    assert not report.edge_caveat
    st = report.artifacts
    assert st.reach.region.issubset(st.reach_inflated.region)
    assert st.reach_inflated.region.issubset(st.K_delta)


# properties behind the C3 vertex scan ----------------------------------------


def test_vertex_sufficiency_on_random_polytopes():
    rng = np.random.default_rng(8)
    for _ in range(20):
        V = rng.normal(size=(rng.integers(3, 7), 2))
        g = rng.normal(size=2)
        lam = rng.dirichlet(np.ones(len(V)), size=4000)
        dense = lam @ V
        assert np.max(dense @ g) <= np.max(V @ g) + 1e-12


@pytest.mark.parametrize("m", [8, 32, 256])
def test_ball_closed_form_matches_sampling(m):
    from incluse.inclusion import minkowski_vertices

    rng = np.random.default_rng(m)
    eps = 0.3
    for g in rng.normal(size=(10, 2)):
        F = constant_field([[0.2, -0.1]])
        sampled = np.max(minkowski_vertices(F, Margin.constant(eps), (0, 0), m) @ g)
        closed = 0.2 * g[0] - 0.1 * g[1] + eps * np.linalg.norm(g)
        assert 0 <= closed - sampled <= eps * np.linalg.norm(g) * (1 - math.cos(math.pi / m)) + 1e-12


def test_boundary_samples_on_signed_distance_level():
    from incluse.grid import interpolate

    s = boundary_samples(W, K.sdist)
    vals = interpolate(W, K.sdist, s.points)
    assert np.all(np.abs(vals) <= H / 4)
    np.testing.assert_allclose(np.linalg.norm(s.normals, axis=1), 1.0)


def test_every_verdict_carries_tolerance(linear_run):
    _, report, _ = linear_run
    for v in report.verdicts.values():
        assert v.tolerance is not None
        assert "tolerance" in v.to_dict()


def test_pipeline_consistency_chain(linear_run):
    _, report, _ = linear_run
    st = report.artifacts
    assert report.verdicts["consistency"].status == PASS
    below = st.B.values <= 0
    assert st.reach.region.occupancy[~below].sum() == 0
    assert below[~st.K_delta.occupancy].sum() == 0
