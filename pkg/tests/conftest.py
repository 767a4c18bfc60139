import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_CRITERIA: dict[int, tuple] = {}


@pytest.fixture
def criterion():
    """Record one acceptance criterion's verdict for the end-of-run summary."""

    def record(number: int, passed, detail: str = ""):
        # passed is None for a criterion that could not run
        _CRITERIA[number] = (passed, detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, detail = _CRITERIA[number]
        verdict = "SKIP" if passed is None else "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {verdict}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
