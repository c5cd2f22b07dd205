import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nomae.data import SceneConfig, synth_scene
from nomae.geometry import voxelize_pyramid

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# filled by test_acceptance, printed once at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def desk_clouds():
    return [synth_scene(SceneConfig.desk(s)) for s in range(6)]


@pytest.fixture(scope="session")
def desk_pyramids(desk_clouds):
    return [voxelize_pyramid(c) for c in desk_clouds]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
