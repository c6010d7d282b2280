import numpy as np
import pytest

from grcnn.data import Dataset, synthetic_shapes


def separable(n=64, size=16, seed=0):
    """Two classes: dark versus bright images."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    base = np.where(labels[:, None, None, None] == 1, 0.75, 0.25)
    images = np.clip(base + rng.normal(0, 0.05, (n, 3, size, size)), 0, 1)
    return Dataset(images, labels, 2, ("dark", "bright"))


@pytest.fixture
def toy():
    return separable()


@pytest.fixture(scope="session")
def shapes_small():
    return synthetic_shapes(40, seed=1, size=16)


CRITERIA: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])
