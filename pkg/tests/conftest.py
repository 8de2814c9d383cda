import sys

import numpy as np
import pytest

from avalign.nn_core import current_tape, set_precision


@pytest.fixture(autouse=True)
def float64_and_clean_tape():
    set_precision(64)
    current_tape().clear()
    yield
    current_tape().clear()
    set_precision(64)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    mod = next((m for name, m in list(sys.modules.items()) if name.endswith("test_acceptance")), None)
    lines = getattr(mod, "ACCEPTANCE", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
