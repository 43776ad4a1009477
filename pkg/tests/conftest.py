import numpy as np
import pytest

from lidarmos.projection import ProjectionConfig
from lidarmos.synth import make_benchmark

SYNTH_CFG = ProjectionConfig.from_degrees(64, 1024)


@pytest.fixture(scope="session")
def synth_cfg():
    return SYNTH_CFG


@pytest.fixture(scope="session")
def busy():
    # rendering takes ~10 s, shared across the whole session
    return make_benchmark("busy-intersection", seed=0)


@pytest.fixture(scope="session")
def crossing():
    return make_benchmark("crossing-box", seed=0)[0]


@pytest.fixture(scope="session")
def room():
    return make_benchmark("static-room", seed=0)[0]


@pytest.fixture(scope="session")
def approaching():
    return make_benchmark("approach", seed=0)[0]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance():
    """Record one pass/fail line per acceptance criterion, then assert."""

    def verdict(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE.append((number, line))
        print(line)
        assert ok, line

    return verdict


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_ACCEPTANCE):
        terminalreporter.write_line(line)
