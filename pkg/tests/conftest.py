import numpy as np
import pytest

from kdesc.patch import Patch


def random_patch(rng: np.random.Generator, width: int = 8) -> Patch:
    return Patch(rng.uniform(0.0, 1.0, (width, width)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> (passed, one-line detail), filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}")
