import numpy as np
import pytest
from hypothesis import settings

from sendal.refine import make_windows
from sendal.synth import gen_dataset, profile
from sendal.training import TrainConfig, train_full

settings.register_profile("repo", deadline=None, max_examples=60)
settings.load_profile("repo")

FAST = TrainConfig(epochs_1=4, epochs_2=4, epochs_3=4, lr=3e-3, xi=0.5)


@pytest.fixture(scope="session")
def small_windows():
    ds, _ = gen_dataset(profile("env-b", seed=11, duration_s=4 * 3600.0))
    return make_windows(ds, 20)


@pytest.fixture(scope="session")
def trained(small_windows):
    return train_full(small_windows, FAST, "lstm")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance lines collected during the run and echoed at the end of the session
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
