import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from flowtrack.cost import MlpParams
from flowtrack.graph import Detection

settings.register_profile("ci", deadline=None, max_examples=40, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


def det(frame, x=0.0, y=0.0, w=10.0, h=20.0, score=1.0, id=None):
    return Detection(frame, float(x), float(y), float(w), float(h), score, id)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def chain3():
    """Three detections of one object in frames 0, 1, 2."""
    return [det(0, 0, 0, id=1), det(1, 2, 0, id=1), det(2, 4, 0, id=1)]


def appearance_model():
    """Hand-set MLP: p = sigmoid(20 * relu(cos_sim) - 10)."""
    W1 = np.zeros((1, 6))
    W1[0, 4] = 1.0
    return MlpParams(W1, np.zeros(1), np.array([[20.0]]), -10.0)


ACCEPTANCE = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion."""
    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
