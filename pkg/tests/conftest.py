import numpy as np
import pytest

from inhomspike.core import NoiseProfile, Prior


@pytest.fixture
def rademacher():
    return Prior(kappa=1, atoms=[[-1.0], [1.0]], weights=[0.5, 0.5])


@pytest.fixture
def quarter_rademacher():
    return Prior(kappa=1, atoms=[[-1.0], [0.0], [1.0]], weights=[0.25, 0.5, 0.25])


@pytest.fixture
def homogeneous():
    return NoiseProfile([1.0], [[1.0]])


def random_profile(rng, n=None, constant=False):
    """Random valid profile with a nonnegative-entry PSD inverse-variance matrix."""
    n = n or int(rng.integers(1, 5))
    rho = rng.dirichlet(np.ones(n))
    rho = rho / rho.sum()
    rho[-1] = 1.0 - rho[:-1].sum()
    if constant:
        inv = np.full((n, n), rng.uniform(0.1, 5.0))
    else:
        B = rng.uniform(0.0, 1.0, size=(n, int(rng.integers(1, n + 2))))
        inv = B @ B.T
    return NoiseProfile(rho, inv)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
