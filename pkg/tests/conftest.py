import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from reactodiff.discretization import BoundaryCondition, CoefficientSet, build_grid

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def line64():
    return build_grid(0.0, math.pi, 64)


@pytest.fixture
def laplace1d():
    return CoefficientSet.laplacian(1)


@pytest.fixture
def dirichlet():
    return BoundaryCondition("dirichlet")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion for the terminal summary."""
    log = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number, passed, detail, seconds, budget):
        within = seconds < budget
        ok = passed and within
        line = (f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}  "
                f"[{seconds:.1f} s of {budget:g} s]")
        log.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
