import numpy as np
import pytest

from ldmquant.diffusion import make_scheduler
from ldmquant.graph import build_toy_unet
from ldmquant.quantizer import calibrate

SMALL = dict(depth=2, base_channels=4, latent=(1, 4, 8, 8))


@pytest.fixture(scope="session")
def small_graph():
    return build_toy_unet(seed=3, **SMALL)


@pytest.fixture(scope="session")
def scheduler3():
    return make_scheduler(3)


@pytest.fixture(scope="session")
def small_table(small_graph, scheduler3):
    return calibrate(small_graph, scheduler3, [3], 8, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# One line per acceptance criterion, filled in by test_acceptance.py.
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
