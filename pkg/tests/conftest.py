import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from carparse.carmodel import CarParams, default_template
from carparse.geometry import CarDimensions, LabeledMesh
from carparse.pose import default_camera
from carparse.shape_space import family_shape_space

settings.register_profile("ci", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


@pytest.fixture(scope="session")
def space():
    return family_shape_space()


@pytest.fixture(scope="session")
def template():
    return default_template()


@pytest.fixture(scope="session")
def car_mesh(template):
    return template.mesh(CarParams())


@pytest.fixture(scope="session")
def camera():
    return default_camera()


def unit_cube() -> LabeledMesh:
    v = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float)
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    faces, labels = [], []
    for i, q in enumerate(quads):
        faces += [(q[0], q[1], q[2]), (q[0], q[2], q[3])]
        labels += [i, i]
    return LabeledMesh(v, np.array(faces), np.array(labels), CarDimensions(1, 1, 1, 1))


@pytest.fixture(scope="session")
def cube():
    return unit_cube()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
