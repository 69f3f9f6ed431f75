import numpy as np
import pytest

from fusedrive.config import tiny_model

# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return tiny_model()


@pytest.fixture(scope="session")
def short_route():
    from fusedrive.sim.routes import generate_route
    return generate_route(7, name="short", hazards=False, n_segments=1)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory, short_route):
    """Expert data from one short hazard-free route."""
    from fusedrive.sim.dataset import Dataset, collect_dataset
    out = tmp_path_factory.mktemp("ds")
    collect_dataset([short_route], out, seed=0)
    return Dataset.open(out)
