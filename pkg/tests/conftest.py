import numpy as np
import pytest

from fbcbf.config import ScenarioConfig
from fbcbf.dynamics import reference_dynamics
from fbcbf.kinematics import axis_angle, reference_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def kin():
    return reference_model()


@pytest.fixture(scope="session")
def dyn():
    return reference_dynamics()


@pytest.fixture(scope="session")
def cfg():
    return ScenarioConfig()


def random_q(rng, n=10, pitch=1.2):
    q = np.empty(n)
    q[:3] = rng.uniform(-1.0, 1.0, 3)
    q[3] = rng.uniform(-np.pi, np.pi)
    q[4] = rng.uniform(-pitch, pitch)
    q[5] = rng.uniform(-np.pi, np.pi)
    q[6:] = rng.uniform(-1.5, 1.5, n - 6)
    return q


def random_rotation(rng, max_angle=np.pi):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return axis_angle(axis, rng.uniform(0.0, max_angle))


@pytest.fixture(scope="session")
def compiled(dyn):
    from fbcbf.dynamics import CompiledModel
    return CompiledModel(dyn)


ACCEPTANCE = {}


def record_criterion(number, ok, text):
    ACCEPTANCE[number] = (ok, text)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, text = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {text}")
