import math

import pytest

from sepcov.model import build_model, null_model

TWO_ATOM = [(1, 0.5), (4, 0.5)]
GOLDEN = (math.sqrt(5) - 1) / 2


@pytest.fixture(scope="session")
def two_atom():
    return build_model(TWO_ATOM, TWO_ATOM, 1000, 2000)


@pytest.fixture(scope="session")
def two_atom_small():
    return build_model(TWO_ATOM, TWO_ATOM, 200, 400)


@pytest.fixture(scope="session")
def mp1():
    return null_model(500, 500)


@pytest.fixture(scope="session")
def mp_half():
    return null_model(200, 400)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance") or __import__("sys").modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
