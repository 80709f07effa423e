import numpy as np
import pytest

from taskdisc.data import SyntheticSpec, generate_synthetic, split_dataset


@pytest.fixture(scope="session")
def small_ds():
    return generate_synthetic(SyntheticSpec(256, 8, 3, 0.1), 7)


@pytest.fixture(scope="session")
def small_split(small_ds):
    return split_dataset(small_ds, 0.25, 1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
