import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from reoi import sim, trustregion, wm

settings.register_profile(
    "repo", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("repo")

TRAIN_SEED = 0
TRAIN_EPISODES = 500


@pytest.fixture(scope="session")
def trained():
    """Default-config dataset and conv model, built once per session and timed."""
    t0 = time.perf_counter()
    data = wm.generate_dataset(TRAIN_SEED, TRAIN_EPISODES, "mixed")
    t1 = time.perf_counter()
    model = wm.train(data)
    t2 = time.perf_counter()
    return {"data": data, "model": model, "gen_seconds": t1 - t0, "train_seconds": t2 - t1}


@pytest.fixture(scope="session")
def model(trained):
    return trained["model"]


@pytest.fixture(scope="session")
def region(trained):
    return trustregion.fit(trained["model"], trained["data"])


@pytest.fixture(scope="session")
def small_data():
    return wm.generate_dataset(11, 24, "mixed")


@pytest.fixture
def gray():
    f = np.empty((sim.H, sim.W, 3))
    f[:] = sim.BACKGROUND
    return f


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""

    def record(name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
