import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from jumpdiff.datasets import DatasetSpec
from jumpdiff.network import ArchConfig, init_params
from jumpdiff.schedule import ScheduleConfig

settings.register_profile("repo", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy2_schedule():
    return ScheduleConfig(N=2, d=1)


@pytest.fixture(scope="session")
def toy2_data():
    return DatasetSpec("toy2", size=256, seed=0).generate()


@pytest.fixture
def small_params():
    """Untrained set-mode network with several inputs per item."""
    arch = ArchConfig(N=4, d=2, hidden=8, depth=2)
    return init_params(arch, np.random.default_rng(7))


@pytest.fixture(scope="session")
def grid_toy_marginals():
    from jumpdiff.oracle import GridToy, evolve_grid
    return evolve_grid(GridToy(), ScheduleConfig(N=2, d=1))


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion."""

    def record(label, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
