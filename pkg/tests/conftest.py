import numpy as np
import pytest

from aslmcrb.kinetic import Protocol, default_plds

# acceptance criterion result lines, echoed in the terminal summary
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)


@pytest.fixture
def brain_protocol():
    return Protocol(plds=default_plds(), tau=1.5, sigma=5e-4, t1_tissue=1.2)


@pytest.fixture
def kidney_protocol():
    return Protocol(plds=default_plds(), tau=1.5, sigma=5e-4, t1_tissue=1.4)


@pytest.fixture
def short_protocol():
    # small N keeps brute-force oracles cheap
    return Protocol(plds=(0.2, 0.7, 1.3, 2.1, 2.9), tau=1.5, sigma=1e-3)


def interior_points(rng: np.random.Generator, n, f_range=(1.0, 150.0),
                    att_range=(0.05, 2.0)):
    """Random (f, att) pairs inside the physiological box."""
    f = rng.uniform(*f_range, size=n)
    att = rng.uniform(*att_range, size=n)
    return f, att
