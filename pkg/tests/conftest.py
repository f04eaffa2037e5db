import numpy as np
import pytest

from worktraj.model import BathSpec, DriveProtocol

TEST_PROTOCOLS = {
    "linear": lambda tau: DriveProtocol("linear", (0.5,), tau),
    "sqrt": lambda tau: DriveProtocol("power", (1.0, 0.5), tau),
    "cbrt": lambda tau: DriveProtocol("power", (1.0, 1.0 / 3.0), tau),
    "tanh": lambda tau: DriveProtocol("tanh", (2.0,), tau),
    "ramp": lambda tau: DriveProtocol("ramp", (1.0,), tau),
}


@pytest.fixture
def bath():
    return BathSpec()


@pytest.fixture
def ohmic():
    return BathSpec(coupling="ohmic", strength=0.1)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and getattr(mod, "RESULTS", None):
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
