import numpy as np
import pytest

from unite_sampler import kernels
from unite_sampler.schedule import NoiseSchedule, make_linear_schedule

ACCEPTANCE_LINES = []


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    previous = kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(previous)


@pytest.fixture(scope="session")
def linear1000():
    return make_linear_schedule(1000, 1e-4, 0.02)


def schedule_with_alpha_bar(alpha_bar):
    """One-step schedule whose alpha_bar_1 is the given value."""
    return NoiseSchedule.from_betas([1.0 - alpha_bar], "custom")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
