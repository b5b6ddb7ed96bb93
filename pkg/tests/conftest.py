import numpy as np
import pytest

from advmix.model import Architecture, init_state
from advmix.trainer import MixSets


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_problem(seed, K=2, N=2, size=8, channels=1, classes=3, widths=(4, 4, 8, 8)):
    """Small architecture, fresh state and a batch of K mix sets."""
    rng = np.random.default_rng(seed)
    arch = Architecture(channels, size, classes, widths, 1)
    state = init_state(arch, 3, rng)
    X = rng.uniform(size=(K, N, channels, size, size))
    Y = np.eye(classes)[rng.integers(0, classes, size=(K, N))]
    lam = rng.dirichlet(np.ones(N), size=K)
    return arch, state, MixSets(X, Y, lam)


@pytest.fixture
def tiny():
    return tiny_problem(0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
