import numpy as np
import pytest
import tomli
from hypothesis import given
from hypothesis import strategies as st

from incluse.regions import Box, Disk, HalfPlane
from incluse.scenario import (
    CHECKS,
    ScenarioError,
    bundled_scenario_path,
    load_bundled,
    parse_scenario,
    scenario_from_dict,
)

BASE = """
name = "tiny"
seed = 1

[window]
lo = [-1.0, -1.0]
hi = [1.0, 1.0]
cells = 32

[field]
name = "linear"
A = [[-1.0, 0.0], [0.0, -1.0]]

[margins]
eps_bar = 0.3
eps1 = 0.2
eps2 = 0.1

[initial]
shape = "disk"
center = [0.0, 0.0]
radius = 0.2

[unsafe]
shape = "disk"
center = [0.0, 0.0]
radius = 0.8
complement = true
"""


def write(tmp_path, text, name="s.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


@pytest.mark.parametrize("name", ["example1", "linear"])
def test_bundled_scenarios_parse(name):
    sc = load_bundled(name)
    assert sc.name == name
    assert bundled_scenario_path(name).exists()
    assert set(sc.checks) <= set(CHECKS)
    c = sc.window.centers()
    assert np.all(sc.eps2(c) < sc.eps1(c)) and np.all(sc.eps1(c) < sc.eps_bar(c))


def test_example1_has_invariance_half_space():
    sc = load_bundled("example1")
    assert sc.halfspace.normal == (0.0, 1.0)
    assert "invariance" in sc.checks


def test_minimal_scenario_defaults(tmp_path):
    sc = parse_scenario(write(tmp_path, BASE))
    assert sc.window.cells == (32, 32)
    assert sc.numerics["directions_m"] == 16
    assert "invariance" not in sc.checks and "c2" in sc.checks


def test_margin_ordering_violation(tmp_path):
    text = BASE.replace("eps1 = 0.2", "eps1 = 0.05")
    with pytest.raises(ScenarioError, match="ordering"):
        parse_scenario(write(tmp_path, text))


def test_eps_bar_o_ordering(tmp_path):
    text = BASE.replace("eps2 = 0.1", "eps2 = 0.1\neps_bar_o = 0.25")
    with pytest.raises(ScenarioError, match="eps_bar_o"):
        parse_scenario(write(tmp_path, text))


def test_shape_outside_window(tmp_path):
    text = BASE.replace("center = [0.0, 0.0]\nradius = 0.2", "center = [5.0, 0.0]\nradius = 0.2")
    with pytest.raises(ScenarioError, match="initial"):
        parse_scenario(write(tmp_path, text))


def test_toml_syntax_error_reports_line(tmp_path):
    text = BASE.replace("eps1 = 0.2", "eps1 = = 0.2")
    with pytest.raises(ScenarioError, match="line"):
        parse_scenario(write(tmp_path, text))


def test_missing_file(tmp_path):
    with pytest.raises(ScenarioError):
        parse_scenario(tmp_path / "nope.toml")


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ScenarioError, match="numerics"):
        parse_scenario(write(tmp_path, BASE + "\n[numerics]\nbogus = 1\n"))
    with pytest.raises(ScenarioError, match="checks"):
        parse_scenario(write(tmp_path, 'checks = ["bogus"]\n' + BASE))


def test_invariance_check_needs_half_space(tmp_path):
    with pytest.raises(ScenarioError, match="half-space"):
        parse_scenario(write(tmp_path, 'checks = ["invariance"]\n' + BASE))


def test_missing_margin(tmp_path):
    with pytest.raises(ScenarioError, match="eps2"):
        parse_scenario(write(tmp_path, BASE.replace("eps2 = 0.1", "")))


def test_field_dimension_mismatch(tmp_path):
    text = BASE.replace("A = [[-1.0, 0.0], [0.0, -1.0]]", "A = [[-1.0]]")
    with pytest.raises(ScenarioError):
        parse_scenario(write(tmp_path, text))


def test_overrides_and_digest(tmp_path):
    sc = parse_scenario(write(tmp_path, BASE))
    other = sc.with_overrides(seed=9, cells=16)
    assert other.seed == 9 and other.window.cells == (16, 16)
    assert other.digest() != sc.digest()
    assert sc.with_overrides().digest() == sc.digest()
    assert len(sc.digest()) == 64


def test_toml_round_trip_of_bundled():
    for name in ("example1", "linear"):
        sc = load_bundled(name)
        again = scenario_from_dict(tomli.loads(sc.to_toml()))
        assert again == sc and again.digest() == sc.digest()


shapes = st.one_of(
    st.builds(lambda x, y, r, c: Disk((x, y), r, c), st.floats(-0.5, 0.5), st.floats(-0.5, 0.5),
              st.floats(0.2, 0.4), st.booleans()),
    st.builds(lambda x, y: Box((x, y), (x + 0.3, y + 0.3)), st.floats(-0.5, 0.2),
              st.floats(-0.5, 0.2)),
    st.builds(lambda a, o: HalfPlane((np.cos(a), np.sin(a)), o), st.floats(0, 6.28),
              st.floats(-0.2, 0.2)),
)


@given(shapes, shapes, st.integers(0, 2**31 - 1), st.floats(0.01, 0.3))
def test_round_trip_property(X0, Xu, seed, e2):
    sc = parse_scenario_dict(X0, Xu, seed, e2)
    again = scenario_from_dict(tomli.loads(sc.to_toml()))
    assert again == sc
    pts = np.random.default_rng(0).uniform(-1, 1, (10, 2))
    np.testing.assert_allclose(again.X0.sdf(pts), sc.X0.sdf(pts))
    np.testing.assert_allclose(again.eps2(pts), sc.eps2(pts))


def parse_scenario_dict(X0, Xu, seed, e2):
    d = tomli.loads(BASE)
    d["initial"], d["unsafe"] = X0.to_dict(), Xu.to_dict()
    d["seed"] = seed
    d["margins"] = {"eps_bar": 3 * e2, "eps1": 2 * e2, "eps2": e2}
    return scenario_from_dict(d)
