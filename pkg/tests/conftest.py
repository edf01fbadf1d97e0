import numpy as np
import pytest

from se2lio.config import PipelineConfig
from se2lio.pipeline import in_memory, run_dataset
from se2lio.sim import SimulationSpec, ground_truth, simulate

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def noiseless_run():
    """100-frame noiseless box-room simulation at the default resolution."""
    return simulate(SimulationSpec(frames=100))


@pytest.fixture(scope="session")
def noiseless_result(noiseless_run):
    run = noiseless_run
    return run_dataset(in_memory(run.times, run.scans, run.imu), PipelineConfig())


@pytest.fixture(scope="session")
def noiseless_gt(noiseless_run):
    return ground_truth(noiseless_run)


@pytest.fixture(scope="session")
def short_run():
    """Small, fast simulation for pipeline plumbing tests."""
    from se2lio.sim import LidarSpec

    return simulate(SimulationSpec(frames=12, lidar=LidarSpec(columns=900)))
