import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from talkfield.face_model import build_toy_basis  # noqa: E402
from talkfield.field import init_bundle  # noqa: E402

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def bundle0():
    return init_bundle(0)


@pytest.fixture(scope="session")
def basis0():
    return build_toy_basis(0)


@pytest.fixture(scope="session")
def basis7():
    return build_toy_basis(7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria are collected here and echoed once at the end of the run
_CRITERIA: dict[int, tuple[bool, str, str]] = {}


@pytest.fixture(scope="session")
def criteria_log():
    return _CRITERIA


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, name, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
