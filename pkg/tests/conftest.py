import numpy as np
import pytest

from defxattn.core import set_nan_guard


@pytest.fixture(autouse=True)
def _nan_guard():
    old = set_nan_guard(True)
    yield
    set_nan_guard(old)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
