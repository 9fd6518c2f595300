import numpy as np
import pytest

from kdseg.data import SyntheticSpec, generate, generate_arrays

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_arrays():
    return generate_arrays(SyntheticSpec(num_classes=6, images=40, size=32, seed=3))


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("small")
    return generate(SyntheticSpec(num_classes=6, images=60, size=32, seed=11), out)


def as_training(samples):
    return [(img.astype(np.float32) / np.float32(255), lab.astype(np.int64)) for img, lab in samples]
