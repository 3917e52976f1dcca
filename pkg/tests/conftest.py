import time
from collections import defaultdict

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from incluse.certify import certify_pipeline
from incluse.grid import Window
from incluse.scenario import load_bundled

settings.register_profile(
    "default", max_examples=40, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")

ACCEPTANCE_TITLES = {
    1: "Example-1 tangent-cone invariance margin",
    2: "Example-1 simulated safety",
    3: "time-to-impact against ln|x|",
    4: "rate-1 decrease slack on the linear scenario",
    5: "zero sublevel of the extended barrier",
    6: "reach-set nesting, fixed point and disk oracle",
    7: "mollifier quadrature and gradient",
    8: "end-to-end pipeline on the linear scenario",
    9: "byte-identical certify runs",
}

_outcomes = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): acceptance criterion number")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        ok = call.excinfo is None
        _outcomes[marker.args[0]].append((item.name, ok))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_TITLES):
        runs = _outcomes.get(n)
        if not runs:
            status = "NOT RUN"
        else:
            status = "PASS" if all(ok for _, ok in runs) else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status}  {ACCEPTANCE_TITLES[n]}")


@pytest.fixture(scope="session")
def linear_run():
    """Full pipeline on the bundled linear scenario, with its wall time."""
    sc = load_bundled("linear")
    t0 = time.perf_counter()
    report = certify_pipeline(sc)
    return sc, report, time.perf_counter() - t0


@pytest.fixture
def square():
    return Window((-2.0, -2.0), (2.0, 2.0), (128, 128))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
