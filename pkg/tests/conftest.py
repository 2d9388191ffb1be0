import numpy as np
import pytest

from ddstc.model import LtiSystem, is_controllable, is_observable


def random_system(rng, n_x=None, n_u=None, n_y=None, spectral_radius=0.95, with_d=True):
    """Random controllable and observable plant with a stable ``A``."""
    while True:
        nx = n_x or int(rng.integers(1, 5))
        nu = n_u or int(rng.integers(1, 3))
        ny = n_y or int(rng.integers(1, 3))
        A = rng.standard_normal((nx, nx))
        A *= spectral_radius / max(np.max(np.abs(np.linalg.eigvals(A))), 1e-9)
        B = rng.standard_normal((nx, nu))
        C = rng.standard_normal((ny, nx))
        D = rng.standard_normal((ny, nu)) * 0.1 if with_d else np.zeros((ny, nu))
        sys = LtiSystem(A, B, C, D)
        if is_controllable(sys) and is_observable(sys):
            return sys


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


# PASS/FAIL lines of the acceptance suite, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
