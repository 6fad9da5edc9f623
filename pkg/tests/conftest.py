import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cpcure.simulation import SimConfig, default_truth, generate_dataset  # noqa: E402


@pytest.fixture(scope="session")
def truth():
    return default_truth(stable_rate=0.3)


@pytest.fixture(scope="session")
def small_sim():
    cfg = SimConfig.scenario(n=40, stable_rate=0.3, max_visits=6)
    return generate_dataset(cfg, np.random.default_rng(11))


@pytest.fixture(scope="session")
def medium_sim():
    cfg = SimConfig.scenario(n=120, stable_rate=0.2)
    return generate_dataset(cfg, np.random.default_rng(7))


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(acceptance_log.LINES):
            terminalreporter.write_line(acceptance_log.LINES[k])
