import numpy as np
import pytest

from autobrane.tracegen import DatasetConfig, make_dataset
from autobrane.trainer import StepCache


@pytest.fixture(scope="session")
def tiny_data():
    cfg = DatasetConfig(n_train=12, n_val=6, n_test=6, nodes_train=6, nodes_test=7, seed=3)
    return StepCache({t: make_dataset(t, cfg) for t in ("bfs", "dfs", "bellman_ford")})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(LINES):
            terminalreporter.write_line(LINES[k])
