import re

import numpy as np
import pytest

from osdquant import _backend

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(params=sorted(_backend.available()))
def backend(request):
    """Run the test once per available kernel backend."""
    previous = _backend.BACKEND
    _backend.use(request.param)
    yield request.param
    _backend.use(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def criterion(request):
    """Recorder for one acceptance criterion; the number comes from the test name."""
    number = int(re.search(r"criterion_(\d+)", request.node.name).group(1))

    def record(ok: bool, detail: str) -> bool:
        ACCEPTANCE[number] = (bool(ok), detail)
        print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    yield record
    if number not in ACCEPTANCE:
        ACCEPTANCE[number] = (False, "raised before producing a result")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
