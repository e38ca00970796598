import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from roverscape import synthworld as sw
from roverscape.camera import Intrinsics

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def intr800():
    return Intrinsics(fx=800.0, fy=800.0, cx=320.0, cy=240.0, width=640, height=480)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def capture():
    """Full-resolution oracle stereo capture shared across modules."""
    return sw.oracle_scene(3)


@pytest.fixture(scope="session")
def small_capture():
    return sw.oracle_scene(8, size=128)


@pytest.fixture(scope="session")
def oracle_images():
    """Ten clean single-view renders for image-quality tests."""
    return [sw.oracle_view(seed).image for seed in range(10)]


@pytest.fixture(scope="session")
def defect_sources():
    """Renders outside the clean set, used as the base of planted defects."""
    return [sw.oracle_view(seed).image for seed in range(10, 14)]


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
